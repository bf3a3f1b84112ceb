//! Hierarchical refinement by interior vertex insertion, state transfer,
//! redundant vertex removal and the refinement schedule.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datacost::{
    integrate_simplex_costs, integrate_vertex_costs, quadrature_simplex_costs, quadrature_vertex_costs, rho_point,
    update_quadrature_simplex_costs, update_quadrature_vertex_costs, update_simplex_costs, update_vertex_costs,
    CostField, DataCostParams, Observations, Sampler,
};
use crate::energy::{assemble, complete_diagonal, Flavor, Problem};
use crate::error::{Error, Result};
use crate::extract::transition_simplices;
use crate::geometry::GeometryCache;
use crate::linalg::cholesky_solve;
use crate::locate::PointLocator;
use crate::mesh::SimplexMesh;
use crate::solver::{SolverConfig, SolverState};

/// Smallest barycentric coordinate allowed for an insertion point.
pub const SPLIT_DELTA: f64 = 0.05;

/// How pointwise costs are integrated onto the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Integrator {
    Sampled(Sampler),
    /// Quadrature exact for quadratic integrands.
    Quadrature,
}

/// A pointwise cost together with its integration rule.
pub struct CostModel<'a> {
    pub rho: &'a (dyn Fn(&[f64], &mut [f64]) + Sync),
    pub integrator: Integrator,
    pub n_labels: usize,
}

impl CostModel<'_> {
    pub fn full(&self, flavor: Flavor, mesh: &SimplexMesh, geo: &GeometryCache) -> CostField {
        let rho = |p: &[f64], o: &mut [f64]| (self.rho)(p, o);
        match (self.integrator, flavor.is_p1()) {
            (Integrator::Sampled(s), true) => integrate_vertex_costs(mesh, geo, &s, self.n_labels, rho),
            (Integrator::Sampled(s), false) => integrate_simplex_costs(mesh, geo, &s, self.n_labels, rho),
            (Integrator::Quadrature, true) => quadrature_vertex_costs(mesh, geo, self.n_labels, rho),
            (Integrator::Quadrature, false) => quadrature_simplex_costs(mesh, geo, self.n_labels, rho),
        }
    }

    /// Recomputes the costs of `sites` (vertices for P1, simplices for RT).
    pub fn update(
        &self,
        flavor: Flavor,
        mesh: &SimplexMesh,
        geo: &GeometryCache,
        sites: &[usize],
        field: &mut CostField,
    ) {
        let rho = |p: &[f64], o: &mut [f64]| (self.rho)(p, o);
        match (self.integrator, flavor.is_p1()) {
            (Integrator::Sampled(s), true) => update_vertex_costs(mesh, geo, &s, &rho, sites, field),
            (Integrator::Sampled(s), false) => update_simplex_costs(mesh, geo, &s, &rho, sites, field),
            (Integrator::Quadrature, true) => update_quadrature_vertex_costs(mesh, geo, &rho, sites, field),
            (Integrator::Quadrature, false) => update_quadrature_simplex_costs(mesh, geo, &rho, sites, field),
        }
    }
}

/// Index maps of a refinement. Old vertices and unsplit simplices keep their
/// indices; every split simplex keeps its first child in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMaps {
    pub n_old_vertices: usize,
    pub n_old_simplices: usize,
    /// Parent of every simplex of the new mesh.
    pub parent: Vec<usize>,
    /// For children: the parent-local vertex replaced by the new vertex.
    pub slot: Vec<Option<usize>>,
    /// Per new vertex: parent simplex and barycentric coordinates in it.
    pub new_vertices: Vec<(usize, Vec<f64>)>,
}

/// Splits each listed simplex into `d + 1` children at an interior point.
pub fn split_simplices(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    splits: &[(usize, Vec<f64>)],
) -> Result<(SimplexMesh, SplitMaps)> {
    let d = mesh.dim();
    let (nv, ns) = (mesh.n_vertices(), mesh.n_simplices());
    let mut seen = vec![false; ns];
    let mut coords = mesh.coords().to_vec();
    let mut simplices = mesh.simplex_indices().to_vec();
    let mut parent: Vec<usize> = (0..ns).collect();
    let mut slot = vec![None; ns];
    let mut new_vertices = Vec::with_capacity(splits.len());
    for (s, p) in splits {
        let s = *s;
        if s >= ns || p.len() != d {
            return Err(Error::InvalidParams(format!("bad split of simplex {s}")));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::InvalidParams(format!("simplex {s} split twice")));
        }
        let mut bary = vec![0.0; d + 1];
        geo.barycentric_unchecked(mesh, s, p, &mut bary);
        if bary.iter().any(|&a| a < SPLIT_DELTA) {
            return Err(Error::TooCloseToFace(s));
        }
        let v = coords.len() / d;
        coords.extend_from_slice(p);
        let verts = mesh.simplex(s).to_vec();
        for k in 0..=d {
            let mut child = verts.clone();
            child[k] = v;
            if k == 0 {
                simplices[s * (d + 1)..(s + 1) * (d + 1)].copy_from_slice(&child);
                slot[s] = Some(0);
            } else {
                simplices.extend_from_slice(&child);
                parent.push(s);
                slot.push(Some(k));
            }
        }
        new_vertices.push((s, bary));
    }
    let new = SimplexMesh::new(d, coords, simplices)?;
    debug_assert_eq!(new.n_vertices(), nv + splits.len());
    Ok((
        new,
        SplitMaps {
            n_old_vertices: nv,
            n_old_simplices: ns,
            parent,
            slot,
            new_vertices,
        },
    ))
}

/// Single split at `p`.
pub fn split_simplex(mesh: &SimplexMesh, geo: &GeometryCache, s: usize, p: &[f64]) -> Result<(SimplexMesh, SplitMaps)> {
    split_simplices(mesh, geo, &[(s, p.to_vec())])
}

pub fn centroid(mesh: &SimplexMesh, s: usize) -> Vec<f64> {
    let d = mesh.dim();
    let mut c = vec![0.0; d];
    for &v in mesh.simplex(s) {
        for k in 0..d {
            c[k] += mesh.vertex(v)[k] / (d + 1) as f64;
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub problem: Problem,
    pub state: SolverState,
    /// Children whose transition masses could not be completed without a
    /// negative diagonal entry (clipped to zero).
    pub diagonal_failures: usize,
}

/// Carries a solution over to the refined mesh: indicators at new vertices by
/// barycentric interpolation, per-simplex variables copied from the parent
/// (non-metric masses re-balanced on the child geometry), face multipliers
/// mapped by face, and costs recomputed on the affected sites.
pub fn transfer_state(
    old: &Problem,
    state: &SolverState,
    mesh: SimplexMesh,
    maps: &SplitMaps,
    model: &CostModel,
) -> Result<Transfer> {
    let flavor = old.flavor;
    let m = old.n_labels();
    let d = old.dim();
    let geo = GeometryCache::new(&mesh)?;
    let mut costs = old.costs.clone();
    let x_old = old.indicators(state);
    let mut x;
    if flavor.is_p1() {
        x = x_old.to_vec();
        for (s, bary) in &maps.new_vertices {
            let verts = old.mesh.simplex(*s);
            for i in 0..m {
                x.push((0..=d).map(|l| bary[l] * x_old[verts[l] * m + i]).sum());
            }
        }
        let mut affected: Vec<usize> = (maps.n_old_vertices..mesh.n_vertices()).collect();
        for (s, _) in &maps.new_vertices {
            affected.extend_from_slice(old.mesh.simplex(*s));
        }
        affected.sort_unstable();
        affected.dedup();
        model.update(flavor, &mesh, &geo, &affected, &mut costs);
    } else {
        x = Vec::with_capacity(mesh.n_simplices() * m);
        for t in 0..mesh.n_simplices() {
            let s = maps.parent[t];
            x.extend_from_slice(&x_old[s * m..(s + 1) * m]);
        }
        let children: Vec<usize> = (0..mesh.n_simplices()).filter(|&t| maps.slot[t].is_some()).collect();
        model.update(flavor, &mesh, &geo, &children, &mut costs);
    }
    let problem = assemble(flavor, mesh, costs, old.table.clone())?;
    let mut st = SolverState {
        primal: vec![0.0; problem.saddle.n_primal()],
        dual: vec![0.0; problem.saddle.n_dual()],
    };
    st.primal[..x.len()].copy_from_slice(&x);
    let mut diagonal_failures = 0;
    let ns = problem.mesh.n_simplices();
    match flavor {
        Flavor::P1NonMetric => {
            for t in 0..ns {
                let s = maps.parent[t];
                for i in 0..m {
                    for j in 0..m {
                        for k in 0..d {
                            st.primal[problem.xt_index(t, i, j, k)] = state.primal[old.xt_index(s, i, j, k)];
                        }
                    }
                    for k in 0..d {
                        st.dual[problem.lambda_index(t, i, k)] = state.dual[old.lambda_index(s, i, k)];
                        st.dual[problem.theta_index(t, i, k)] = state.dual[old.theta_index(s, i, k)];
                    }
                }
                for p in 0..old.table.n_pairs() {
                    for k in 0..d {
                        st.dual[problem.q_index(p, t, k)] = state.dual[old.q_index(p, s, k)];
                    }
                }
                if maps.slot[t].is_some() && !complete_diagonal(&problem, &mut st, t) {
                    diagonal_failures += 1;
                }
            }
        }
        Flavor::P1Metric => {
            for t in 0..ns {
                let s = maps.parent[t];
                for i in 0..m {
                    for k in 0..d {
                        st.dual[problem.lambda_index(t, i, k)] = state.dual[old.lambda_index(s, i, k)];
                    }
                }
            }
        }
        Flavor::Rt => transfer_rt(old, state, &problem, &mut st, maps),
    }
    Ok(Transfer {
        problem,
        state: st,
        diagonal_failures,
    })
}

/// Children start from the parent's transition vectors scaled by relative
/// volume, which keeps the regularizer. A least-norm correction per pair then
/// restores the face constraints: the parent's flux on each old face and
/// zero net flux across the new inner faces. Face multipliers follow their
/// faces and start at zero on new faces.
fn transfer_rt(old: &Problem, state: &SolverState, new: &Problem, st: &mut SolverState, maps: &SplitMaps) {
    let d = old.dim();
    let m = old.n_labels();
    let k1 = d + 1;
    let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
    for t in 0..new.mesh.n_simplices() {
        let s = maps.parent[t];
        let ratio = new.geo.volume(t) / old.geo.volume(s);
        for p in 0..old.table.n_pairs() {
            for l in 0..k1 {
                for c in 0..d {
                    st.primal[new.y_index(p, t, l, c)] = ratio * state.primal[old.y_index(p, s, l, c)];
                }
            }
        }
        if maps.slot[t].is_some() {
            children.entry(s).or_default().push(t);
        }
    }
    let mut parents: Vec<usize> = children.keys().copied().collect();
    parents.sort_unstable();
    let split_vertex: HashMap<usize, usize> = maps
        .new_vertices
        .iter()
        .enumerate()
        .map(|(k, (s, _))| (*s, maps.n_old_vertices + k))
        .collect();
    for s in parents {
        let kids = &children[&s];
        let pv = split_vertex[&s];
        correct_children(old, state, new, st, s, kids, pv);
    }
    let mut faces: HashMap<Vec<usize>, usize> = HashMap::new();
    for f in 0..old.mesh.n_faces() {
        if let Some(fi) = old.interior_face(f) {
            faces.insert(old.mesh.face(f).to_vec(), fi);
        }
    }
    for f in 0..new.mesh.n_faces() {
        if let (Some(nf), Some(&of)) = (new.interior_face(f), faces.get(new.mesh.face(f))) {
            for i in 0..m {
                st.dual[nf * m + i] = state.dual[of * m + i];
            }
        }
    }
}

/// Flux coefficients of face `l` of simplex `s`: the constraint term of a
/// transition vector at local face `lb`, component `c`, is `w[lb * d + c]`.
fn flux_row(p: &Problem, s: usize, l: usize, w: &mut [f64]) {
    let d = p.dim();
    let v = p.mesh.vertex(p.mesh.simplex(s)[l]);
    let scale = p.geo.sign(s, l) / (p.geo.volume(s) * d as f64);
    for lb in 0..=d {
        let z = p.geo.face_midpoint(p.mesh.simplex_face(s, lb));
        for c in 0..d {
            w[lb * d + c] = scale * (z[c] - v[c]);
        }
    }
}

fn correct_children(
    old: &Problem,
    state: &SolverState,
    new: &Problem,
    st: &mut SolverState,
    s: usize,
    kids: &[usize],
    pv: usize,
) {
    let d = old.dim();
    let k1 = d + 1;
    let blk = k1 * d;
    let n = kids.len() * blk;
    let pverts = old.mesh.simplex(s);
    // rows: (coefficients over the stacked child unknowns, parent face or none)
    let mut rows: Vec<(Vec<f64>, Option<usize>)> = Vec::new();
    let mut w = vec![0.0; blk];
    for (a, &ta) in kids.iter().enumerate() {
        let l = new.mesh.local_index(ta, pv).unwrap();
        let missing = (0..k1)
            .find(|&k| new.mesh.local_index(ta, pverts[k]).is_none())
            .unwrap();
        flux_row(new, ta, l, &mut w);
        let mut row = vec![0.0; n];
        row[a * blk..(a + 1) * blk].copy_from_slice(&w);
        rows.push((row, Some(missing)));
    }
    for a in 0..kids.len() {
        for b in a + 1..kids.len() {
            let (ta, tb) = (kids[a], kids[b]);
            let va = pverts
                .iter()
                .copied()
                .find(|&v| new.mesh.local_index(tb, v).is_none())
                .unwrap();
            let vb = pverts
                .iter()
                .copied()
                .find(|&v| new.mesh.local_index(ta, v).is_none())
                .unwrap();
            let mut row = vec![0.0; n];
            flux_row(new, ta, new.mesh.local_index(ta, va).unwrap(), &mut w);
            row[a * blk..(a + 1) * blk].copy_from_slice(&w);
            flux_row(new, tb, new.mesh.local_index(tb, vb).unwrap(), &mut w);
            row[b * blk..(b + 1) * blk].copy_from_slice(&w);
            rows.push((row, None));
        }
    }
    let nr = rows.len();
    let mut gram = vec![0.0; nr * nr];
    for i in 0..nr {
        for j in 0..nr {
            gram[i * nr + j] = rows[i].0.iter().zip(&rows[j].0).map(|(a, b)| a * b).sum();
        }
    }
    let tol = 1e-14 * gram.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut u = vec![0.0; n];
    for p in 0..old.table.n_pairs() {
        for (a, &t) in kids.iter().enumerate() {
            for l in 0..k1 {
                for c in 0..d {
                    u[a * blk + l * d + c] = st.primal[new.y_index(p, t, l, c)];
                }
            }
        }
        let resid: Vec<f64> = rows
            .iter()
            .map(|(row, face)| {
                let target = face.map_or(0.0, |k| {
                    flux_row(old, s, k, &mut w);
                    (0..blk)
                        .map(|q| w[q] * state.primal[old.y_index(p, s, q / d, q % d)])
                        .sum()
                });
                target - row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let mult = cholesky_solve(&gram, &resid, nr, tol);
        for (i, (row, _)) in rows.iter().enumerate() {
            for q in 0..n {
                u[q] += row[q] * mult[i];
            }
        }
        for (a, &t) in kids.iter().enumerate() {
            for l in 0..k1 {
                for c in 0..d {
                    st.primal[new.y_index(p, t, l, c)] = u[a * blk + l * d + c];
                }
            }
        }
    }
}

/// Simplices containing a label transition.
pub fn mark_transition_simplices(problem: &Problem, state: &SolverState) -> Vec<usize> {
    transition_simplices(problem, state)
}

/// Removes interior vertex `v` whose star carries identical indicators (up
/// to `tol`), re-triangulating the star polygon by ear clipping (2D).
pub fn remove_vertex(
    problem: &Problem,
    state: &SolverState,
    v: usize,
    tol: f64,
    model: &CostModel,
) -> Result<(Problem, SolverState)> {
    let mesh = &problem.mesh;
    if mesh.dim() != 2 || !problem.flavor.is_p1() {
        return Err(Error::Unsupported("vertex removal needs a 2D P1 problem".into()));
    }
    if v >= mesh.n_vertices() || mesh.is_boundary_vertex(v) {
        return Err(Error::NotRemovable(v));
    }
    let m = problem.n_labels();
    let x = problem.indicators(state);
    let star = mesh.vertex_star(v).to_vec();
    let ring = link_cycle(mesh, v, &star).ok_or(Error::NotRemovable(v))?;
    for &u in &ring {
        if (0..m).any(|i| (x[u * m + i] - x[v * m + i]).abs() > tol) {
            return Err(Error::NotRemovable(v));
        }
    }
    let tris = ear_clip(mesh, &ring).ok_or(Error::NotRemovable(v))?;
    let in_star: Vec<bool> = (0..mesh.n_simplices()).map(|s| star.contains(&s)).collect();
    let mut simplices = Vec::new();
    let mut origin = Vec::new();
    for s in 0..mesh.n_simplices() {
        if !in_star[s] {
            simplices.extend_from_slice(mesh.simplex(s));
            origin.push(Some(s));
        }
    }
    for t in &tris {
        simplices.extend_from_slice(t);
        origin.push(None);
    }
    // drop v by moving the last vertex into its slot
    let nv = mesh.n_vertices();
    let last = nv - 1;
    let remap = |u: usize| if u == last { v } else { u };
    let mut coords = mesh.coords().to_vec();
    if v != last {
        let p = mesh.vertex(last).to_vec();
        coords[v * 2..v * 2 + 2].copy_from_slice(&p);
    }
    coords.truncate(last * 2);
    let simplices: Vec<usize> = simplices.into_iter().map(remap).collect();
    let new_mesh = SimplexMesh::new(2, coords, simplices)?;
    let geo = GeometryCache::new(&new_mesh)?;
    let old_of = |u: usize| if u == v { last } else { u };
    let mut costs = CostField::zeros(new_mesh.n_vertices(), m);
    for u in 0..new_mesh.n_vertices() {
        costs.get_mut(u).copy_from_slice(problem.costs.get(old_of(u)));
    }
    let affected: Vec<usize> = ring.iter().map(|&u| remap(u)).collect();
    model.update(problem.flavor, &new_mesh, &geo, &affected, &mut costs);
    let mut xn = Vec::with_capacity((nv - 1) * m);
    for u in 0..new_mesh.n_vertices() {
        xn.extend_from_slice(&x[old_of(u) * m..(old_of(u) + 1) * m]);
    }
    let new_problem = assemble(problem.flavor, new_mesh, costs, problem.table.clone())?;
    let fresh = new_problem.state_from_indicators(&xn)?;
    let mut st = fresh.clone();
    let d = 2;
    for (t, o) in origin.iter().enumerate() {
        let Some(s) = *o else { continue };
        match problem.flavor {
            Flavor::P1NonMetric => {
                for i in 0..m {
                    for j in 0..m {
                        for k in 0..d {
                            st.primal[new_problem.xt_index(t, i, j, k)] = state.primal[problem.xt_index(s, i, j, k)];
                        }
                    }
                    for k in 0..d {
                        st.dual[new_problem.lambda_index(t, i, k)] = state.dual[problem.lambda_index(s, i, k)];
                        st.dual[new_problem.theta_index(t, i, k)] = state.dual[problem.theta_index(s, i, k)];
                    }
                }
                for p in 0..problem.table.n_pairs() {
                    for k in 0..d {
                        st.dual[new_problem.q_index(p, t, k)] = state.dual[problem.q_index(p, s, k)];
                    }
                }
            }
            _ => {
                for i in 0..m {
                    for k in 0..d {
                        st.dual[new_problem.lambda_index(t, i, k)] = state.dual[problem.lambda_index(s, i, k)];
                    }
                }
            }
        }
    }
    Ok((new_problem, st))
}

/// Removes every removable vertex in one sweep (in index order, skipping
/// neighbours of removed vertices). Returns the number removed.
pub fn remove_redundant_vertices(
    problem: &Problem,
    state: &SolverState,
    tol: f64,
    model: &CostModel,
) -> Result<(Problem, SolverState, usize)> {
    let mut p = problem.clone();
    let mut st = state.clone();
    let mut removed = 0;
    let mut v = 0;
    while v < p.mesh.n_vertices() {
        match remove_vertex(&p, &st, v, tol, model) {
            Ok((np, ns)) => {
                p = np;
                st = ns;
                removed += 1;
            }
            Err(Error::NotRemovable(_)) => v += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((p, st, removed))
}

/// Link of interior vertex `v` as a counter-clockwise cycle.
fn link_cycle(mesh: &SimplexMesh, v: usize, star: &[usize]) -> Option<Vec<usize>> {
    let mut next: HashMap<usize, usize> = HashMap::new();
    for &s in star {
        let l = mesh.local_index(s, v)?;
        let verts = mesh.simplex(s);
        // positively oriented (v, a, b): b follows a counter-clockwise around v
        let a = verts[(l + 1) % 3];
        let b = verts[(l + 2) % 3];
        next.insert(a, b);
    }
    let start = *next.keys().min()?;
    let mut ring = vec![start];
    let mut cur = next[&start];
    while cur != start {
        ring.push(cur);
        cur = *next.get(&cur)?;
        if ring.len() > star.len() {
            return None;
        }
    }
    (ring.len() == star.len()).then_some(ring)
}

fn orient(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Triangulates a counter-clockwise simple polygon by repeatedly cutting the
/// ear with the largest smallest angle.
fn ear_clip(mesh: &SimplexMesh, ring: &[usize]) -> Option<Vec<[usize; 3]>> {
    let mut poly = ring.to_vec();
    let mut out = Vec::new();
    while poly.len() > 3 {
        let n = poly.len();
        let mut best: Option<(f64, usize)> = None;
        for k in 0..n {
            let (a, b, c) = (poly[(k + n - 1) % n], poly[k], poly[(k + 1) % n]);
            let (pa, pb, pc) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
            if orient(pa, pb, pc) <= 1e-14 {
                continue;
            }
            let blocked = poly.iter().any(|&q| {
                if q == a || q == b || q == c {
                    return false;
                }
                let pq = mesh.vertex(q);
                orient(pa, pb, pq) >= 0.0 && orient(pb, pc, pq) >= 0.0 && orient(pc, pa, pq) >= 0.0
            });
            if blocked {
                continue;
            }
            let q = min_angle(pa, pb, pc);
            if best.is_none_or(|(bq, _)| q > bq) {
                best = Some((q, k));
            }
        }
        let (_, k) = best?;
        let n = poly.len();
        out.push([poly[(k + n - 1) % n], poly[k], poly[(k + 1) % n]]);
        poly.remove(k);
    }
    let (pa, pb, pc) = (mesh.vertex(poly[0]), mesh.vertex(poly[1]), mesh.vertex(poly[2]));
    if orient(pa, pb, pc) <= 1e-14 {
        return None;
    }
    out.push([poly[0], poly[1], poly[2]]);
    Some(out)
}

fn min_angle(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let ang = |p: &[f64], q: &[f64], r: &[f64]| {
        let u = [q[0] - p[0], q[1] - p[1]];
        let w = [r[0] - p[0], r[1] - p[1]];
        (u[0] * w[1] - u[1] * w[0]).abs().atan2(u[0] * w[0] + u[1] * w[1])
    };
    ang(a, b, c).min(ang(b, c, a)).min(ang(c, a, b))
}

/// Where refined simplices receive their new vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    #[default]
    Centroid,
    /// The observed surface point nearest to the centroid if one lies well
    /// inside the simplex, otherwise the centroid.
    NearestObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub steps: usize,
    /// Factor applied to `eps` after every step.
    pub eps_factor: f64,
    pub split: SplitRule,
    pub solver: SolverConfig,
    /// Sample spacing is `eps / 4`, but never below this.
    pub min_sample_spacing: f64,
    /// Scales the costs by `eps_start / eps` so the data term keeps its
    /// weight against the regularizer as the band narrows.
    pub normalize_costs: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 3,
            eps_factor: 0.5,
            split: SplitRule::Centroid,
            solver: SolverConfig {
                max_iters: 2000,
                step_ratio: 10.0,
                restart_every: 64,
                rebalance: true,
                ..SolverConfig::default()
            },
            min_sample_spacing: 1.0 / 1024.0,
            normalize_costs: true,
        }
    }
}

impl RefineConfig {
    pub fn sampler(&self, eps: f64) -> Sampler {
        Sampler {
            spacing: (eps / 4.0).max(self.min_sample_spacing),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub vertices: usize,
    pub simplices: usize,
    pub marked: usize,
    /// `eps` used for the solve of this step.
    pub eps: f64,
    /// Energy before the split, at the previous `eps`.
    pub energy_before: f64,
    /// Energy of the transferred state, at the previous `eps`.
    pub energy_transferred: f64,
    /// Energy of the transferred state at the new `eps`.
    pub energy_rebased: f64,
    /// Energy after the solve at the new `eps`.
    pub energy_solved: f64,
    /// Whether the solve result was kept (it is dropped if worse).
    pub accepted: bool,
    pub diagonal_failures: usize,
    pub iterations: usize,
    pub wall_ms: f64,
}

impl StepStats {
    pub fn csv_header() -> &'static str {
        "step,vertices,simplices,marked,eps,energy_before,energy_transferred,energy_rebased,energy_solved,accepted,diagonal_failures,iterations,wall_ms"
    }

    pub fn csv_row(&self, with_timing: bool) -> String {
        let wall = if with_timing {
            format!("{:.3}", self.wall_ms)
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{},{}",
            self.step,
            self.vertices,
            self.simplices,
            self.marked,
            self.eps,
            self.energy_before,
            self.energy_transferred,
            self.energy_rebased,
            self.energy_solved,
            self.accepted,
            self.diagonal_failures,
            self.iterations,
            wall
        )
    }
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub problem: Problem,
    pub state: SolverState,
    pub params: DataCostParams,
    pub stats: Vec<StepStats>,
}

fn split_points(problem: &Problem, marked: &[usize], obs: &Observations, rule: SplitRule) -> Vec<(usize, Vec<f64>)> {
    let mesh = &problem.mesh;
    let mut chosen: HashMap<usize, (f64, Vec<f64>)> = HashMap::new();
    if rule == SplitRule::NearestObservation && mesh.dim() == 2 {
        let wanted: std::collections::HashSet<usize> = marked.iter().copied().collect();
        let locator = PointLocator::new(mesh);
        let mut bary = [0.0; 3];
        for (_, _, o) in obs.iter() {
            let Some(s) = locator.locate(mesh, &problem.geo, &o.hit, &mut bary) else {
                continue;
            };
            if !wanted.contains(&s) || bary.iter().any(|&a| a < SPLIT_DELTA) {
                continue;
            }
            let c = centroid(mesh, s);
            let dist = (o.hit[0] - c[0]).powi(2) + (o.hit[1] - c[1]).powi(2);
            if chosen.get(&s).is_none_or(|(bd, _)| dist < *bd) {
                chosen.insert(s, (dist, o.hit.to_vec()));
            }
        }
    }
    marked
        .iter()
        .map(|&s| (s, chosen.remove(&s).map_or_else(|| centroid(mesh, s), |(_, p)| p)))
        .collect()
}

fn scaled_rho(obs: &Observations, p: &DataCostParams, w: f64, x: &[f64], out: &mut [f64]) {
    rho_point(obs, p, x, out);
    if w != 1.0 {
        out.iter_mut().for_each(|v| *v *= w);
    }
}

/// Solve, mark transitions, split, transfer and lower `eps`, `steps` times.
/// The incoming state is taken as the solution on the base mesh.
pub fn refine_loop(
    problem: Problem,
    state: SolverState,
    obs: &Observations,
    params: DataCostParams,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    params.validate()?;
    let mut problem = problem;
    let mut state = state;
    let mut params = params;
    let mut stats = Vec::with_capacity(cfg.steps);
    let eps_start = params.eps;
    let cost_scale = |eps: f64| if cfg.normalize_costs { eps_start / eps } else { 1.0 };
    for step in 1..=cfg.steps {
        let start = Instant::now();
        let flavor = problem.flavor;
        let energy_before = problem.primal_energy(&state)?.total;
        let marked = mark_transition_simplices(&problem, &state);
        let (mut next, mut next_state, failures) = if marked.is_empty() {
            (problem.clone(), state.clone(), 0)
        } else {
            let splits = split_points(&problem, &marked, obs, cfg.split);
            let (mesh, maps) = split_simplices(&problem.mesh, &problem.geo, &splits)?;
            let (p, w) = (params, cost_scale(params.eps));
            let rho = move |x: &[f64], out: &mut [f64]| scaled_rho(obs, &p, w, x, out);
            let model = CostModel {
                rho: &rho,
                integrator: Integrator::Sampled(cfg.sampler(p.eps)),
                n_labels: obs.n_labels,
            };
            let t = transfer_state(&problem, &state, mesh, &maps, &model)?;
            (t.problem, t.state, t.diagonal_failures)
        };
        let energy_transferred = next.primal_energy(&next_state)?.total;
        params.eps *= cfg.eps_factor;
        let (p, w) = (params, cost_scale(params.eps));
        let rho = move |x: &[f64], out: &mut [f64]| scaled_rho(obs, &p, w, x, out);
        let model = CostModel {
            rho: &rho,
            integrator: Integrator::Sampled(cfg.sampler(p.eps)),
            n_labels: obs.n_labels,
        };
        next.set_costs(model.full(flavor, &next.mesh, &next.geo))?;
        let energy_rebased = next.primal_energy(&next_state)?.total;
        let out = next.solve(&cfg.solver, Some(next_state.clone()))?;
        let energy_solved = next.primal_energy(&out.state)?.total;
        let accepted = energy_solved <= energy_rebased;
        if accepted {
            next_state = out.state;
        }
        stats.push(StepStats {
            step,
            vertices: next.mesh.n_vertices(),
            simplices: next.mesh.n_simplices(),
            marked: marked.len(),
            eps: params.eps,
            energy_before,
            energy_transferred,
            energy_rebased,
            energy_solved,
            accepted,
            diagonal_failures: failures,
            iterations: out.iterations,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        problem = next;
        state = next_state;
    }
    Ok(RefineResult {
        problem,
        state,
        params,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_mesh_2d;
    use crate::shapes::{WulffShape, WulffTable};
    use crate::solver::SolverConfig;

    fn linear_rho(p: &[f64], o: &mut [f64]) {
        o[0] = 2.0 * (0.3 - p[0]);
        o[1] = 2.0 * (p[1] - 0.5);
        o[2] = 0.4 * p[0] - 0.4;
    }

    fn model() -> CostModel<'static> {
        CostModel {
            rho: &linear_rho,
            integrator: Integrator::Quadrature,
            n_labels: 3,
        }
    }

    fn problem(flavor: Flavor, n: usize) -> Problem {
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], n, n).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let costs = model().full(flavor, &mesh, &geo);
        let table =
            WulffTable::from_fn(3, 2, |i, j| WulffShape::ball(if i == 0 && j == 2 { 0.3 } else { 0.1 })).unwrap();
        assemble(flavor, mesh, costs, table).unwrap()
    }

    #[test]
    fn centroid_split_gives_equal_children() {
        let p = problem(Flavor::P1Metric, 1);
        let c = centroid(&p.mesh, 0);
        let (mesh, maps) = split_simplex(&p.mesh, &p.geo, 0, &c).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let kids: Vec<usize> = (0..mesh.n_simplices()).filter(|&t| maps.parent[t] == 0).collect();
        assert_eq!(kids.len(), 3);
        for &t in &kids {
            assert!((geo.volume(t) - p.geo.volume(0) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn split_coordinates_are_child_volume_ratios() {
        let p = problem(Flavor::P1Metric, 1);
        let pt = [0.55, 0.3];
        let s = (0..2)
            .find(|&s| p.geo.barycentric_coords(&p.mesh, s, &pt).is_ok())
            .unwrap();
        let (mesh, maps) = split_simplex(&p.mesh, &p.geo, s, &pt).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let bary = &maps.new_vertices[0].1;
        let mut total = 0.0;
        for t in (0..mesh.n_simplices()).filter(|&t| maps.parent[t] == s) {
            let k = maps.slot[t].unwrap();
            assert!((geo.volume(t) / p.geo.volume(s) - bary[k]).abs() < 1e-12);
            total += geo.volume(t);
        }
        assert!((total - p.geo.volume(s)).abs() < 1e-12);
    }

    #[test]
    fn split_near_face_is_rejected() {
        let p = problem(Flavor::P1Metric, 1);
        let v: Vec<Vec<f64>> = p.mesh.simplex(0).iter().map(|&v| p.mesh.vertex(v).to_vec()).collect();
        let pt: Vec<f64> = (0..2)
            .map(|c| 0.49 * v[0][c] + 0.49 * v[1][c] + 0.02 * v[2][c])
            .collect();
        assert!(matches!(
            split_simplex(&p.mesh, &p.geo, 0, &pt),
            Err(Error::TooCloseToFace(0))
        ));
        let c = centroid(&p.mesh, 0);
        let twice = [(0, c.clone()), (0, c)];
        assert!(matches!(
            split_simplices(&p.mesh, &p.geo, &twice),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn transfer_preserves_p1_energy() {
        for flavor in [Flavor::P1Metric, Flavor::P1NonMetric] {
            let p = problem(flavor, 3);
            let out = p
                .solve(
                    &SolverConfig {
                        max_iters: 500,
                        ..Default::default()
                    },
                    None,
                )
                .unwrap();
            let before = p.primal_energy(&out.state).unwrap().total;
            let splits: Vec<_> = (0..p.mesh.n_simplices())
                .step_by(3)
                .map(|s| (s, centroid(&p.mesh, s)))
                .collect();
            let (mesh, maps) = split_simplices(&p.mesh, &p.geo, &splits).unwrap();
            let t = transfer_state(&p, &out.state, mesh, &maps, &model()).unwrap();
            let after = t.problem.primal_energy(&t.state).unwrap().total;
            assert!((after - before).abs() < 1e-10, "{flavor:?}: {before} vs {after}");
        }
    }

    #[test]
    fn rt_transfer_keeps_constraints() {
        let p = problem(Flavor::Rt, 3);
        let out = p
            .solve(
                &SolverConfig {
                    max_iters: 500,
                    ..Default::default()
                },
                None,
            )
            .unwrap();
        let r0 = p.saddle.equality_residual(&out.state.primal);
        let splits: Vec<_> = (0..p.mesh.n_simplices())
            .step_by(2)
            .map(|s| (s, centroid(&p.mesh, s)))
            .collect();
        let (mesh, maps) = split_simplices(&p.mesh, &p.geo, &splits).unwrap();
        let t = transfer_state(&p, &out.state, mesh, &maps, &model()).unwrap();
        let r1 = t.problem.saddle.equality_residual(&t.state.primal);
        assert!(r1 <= r0 + 1e-10, "{r0} vs {r1}");
    }

    #[test]
    fn uniform_labeling_marks_nothing() {
        let p = problem(Flavor::P1Metric, 3);
        let mut x = vec![0.0; p.mesh.n_vertices() * 3];
        x.iter_mut().step_by(3).for_each(|v| *v = 1.0);
        let st = p.state_from_indicators(&x).unwrap();
        assert!(mark_transition_simplices(&p, &st).is_empty());
    }

    #[test]
    fn removal_inside_constant_region_keeps_energy() {
        let p = problem(Flavor::P1NonMetric, 4);
        let x: Vec<f64> = (0..p.mesh.n_vertices())
            .flat_map(|v| {
                if p.mesh.vertex(v)[0] < 0.6 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 1.0]
                }
            })
            .collect();
        let st = p.state_from_indicators(&x).unwrap();
        let before = p.primal_energy(&st).unwrap().total;
        let v = (0..p.mesh.n_vertices())
            .find(|&v| p.mesh.vertex(v) == [0.25, 0.5])
            .unwrap();
        let (q, qs) = remove_vertex(&p, &st, v, 1e-12, &model()).unwrap();
        assert_eq!(q.mesh.n_vertices(), p.mesh.n_vertices() - 1);
        let after = q.primal_energy(&qs).unwrap().total;
        assert!((after - before).abs() <= 1e-6 * before.abs(), "{before} vs {after}");
        let edge = (0..p.mesh.n_vertices())
            .find(|&v| p.mesh.vertex(v) == [0.5, 0.5])
            .unwrap();
        assert!(matches!(
            remove_vertex(&p, &st, edge, 1e-12, &model()),
            Err(Error::NotRemovable(_))
        ));
    }
}
