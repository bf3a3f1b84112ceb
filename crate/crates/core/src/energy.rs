//! Saddle point assembly of the three discretizations and their energies.
//!
//! * `P1NonMetric`: vertex indicators `x`, direction-split transition masses
//!   `X^{ij}` per simplex (diagonal `X^{ii}` included), free multipliers for
//!   the two balance equations and duals `q^{ij} in W^{ij}` for the
//!   regularizer `|s| sum_{i<j} ||X^{ij} - X^{ji}||_{W^{ij}}`.
//! * `P1Metric`: vertex indicators and per-simplex duals `lambda^i` with
//!   `lambda^i - lambda^j in W^{ij}` coupled by `|s| <grad x^i, lambda^i>`.
//! * `Rt`: simplex indicators, midpoint transition vectors `y^{ij}` and free
//!   face multipliers of the Raviart-Thomas dual field.

use serde::{Deserialize, Serialize};

use crate::datacost::CostField;
use crate::error::{Error, Result};
use crate::geometry::GeometryCache;
use crate::mesh::SimplexMesh;
use crate::shapes::{pair_index, pairs, WulffTable};
use crate::solver::{
    self, CsrMatrix, DualKind, Monitor, PrimalKind, Run, SaddleProblem, SolveOutcome, SolverConfig, SolverState,
};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    P1NonMetric,
    P1Metric,
    Rt,
}

impl Flavor {
    pub fn is_p1(self) -> bool {
        !matches!(self, Flavor::Rt)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p1" | "p1-nonmetric" => Ok(Flavor::P1NonMetric),
            "p1-metric" => Ok(Flavor::P1Metric),
            "rt" => Ok(Flavor::Rt),
            _ => Err(Error::InvalidParams(format!("unknown flavor '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Flavor::P1NonMetric => "p1",
            Flavor::P1Metric => "p1-metric",
            Flavor::Rt => "rt",
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    m: usize,
    d: usize,
    nv: usize,
    ns: usize,
    np: usize,
    /// Interior face index per mesh face (`NONE` on the boundary).
    interior: Vec<usize>,
    n_interior: usize,
    off_xt: usize,
    off_theta: usize,
    off_q: usize,
    off_y: usize,
}

/// An assembled labeling problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub flavor: Flavor,
    pub mesh: SimplexMesh,
    pub geo: GeometryCache,
    pub costs: CostField,
    pub table: WulffTable,
    pub saddle: SaddleProblem,
    layout: Layout,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    /// Largest deviation of an indicator block from the probability simplex.
    pub simplex_violation: f64,
    /// Most negative transition mass (zero if none).
    pub negativity: f64,
    /// Largest equality residual (balance or face constraints).
    pub balance_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub data: f64,
    pub regularizer: f64,
    pub total: f64,
    pub feasibility: Feasibility,
}

/// Builds the saddle problem for `flavor`. Costs live on vertices for the P1
/// flavors and on simplices for `Rt`.
pub fn assemble(flavor: Flavor, mesh: SimplexMesh, costs: CostField, table: WulffTable) -> Result<Problem> {
    let geo = GeometryCache::new(&mesh)?;
    let m = table.n_labels;
    let d = mesh.dim();
    if m < 2 {
        return Err(Error::InvalidParams("at least two labels are required".into()));
    }
    if costs.n_labels != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: costs.n_labels,
        });
    }
    if table.dim != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: table.dim,
        });
    }
    table.validate()?;
    let (nv, ns) = (mesh.n_vertices(), mesh.n_simplices());
    let expected = if flavor.is_p1() { nv } else { ns };
    if costs.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: costs.len(),
        });
    }
    if costs.values.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParams("non-finite cost".into()));
    }
    let np = m * (m - 1) / 2;
    for p in 0..np {
        // the energy needs support functions
        table.shape_by_index(p).support(&vec![1.0; d])?;
    }
    let mut interior = vec![NONE; mesh.n_faces()];
    let mut n_interior = 0;
    for (f, slot) in interior.iter_mut().enumerate() {
        if !mesh.is_boundary_face(f) {
            *slot = n_interior;
            n_interior += 1;
        }
    }
    let mut layout = Layout {
        m,
        d,
        nv,
        ns,
        np,
        interior,
        n_interior,
        off_xt: 0,
        off_theta: 0,
        off_q: 0,
        off_y: 0,
    };
    let shapes: Vec<_> = (0..np).map(|p| table.shape_by_index(p).clone()).collect();
    let saddle = match flavor {
        Flavor::P1NonMetric => build_p1_nonmetric(&mesh, &geo, &costs, &mut layout, shapes)?,
        Flavor::P1Metric => build_p1_metric(&mesh, &geo, &costs, &layout, shapes)?,
        Flavor::Rt => build_rt(&mesh, &geo, &costs, &mut layout, shapes)?,
    };
    Ok(Problem {
        flavor,
        mesh,
        geo,
        costs,
        table,
        saddle,
        layout,
    })
}

fn build_p1_nonmetric(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    costs: &CostField,
    lay: &mut Layout,
    shapes: Vec<crate::shapes::WulffShape>,
) -> Result<SaddleProblem> {
    let Layout { m, d, nv, ns, np, .. } = *lay;
    lay.off_xt = nv * m;
    let n_primal = lay.off_xt + ns * m * m * d;
    lay.off_theta = ns * m * d;
    lay.off_q = 2 * ns * m * d;
    let n_dual = lay.off_q + np * ns * d;
    let xt = |s: usize, i: usize, j: usize, k: usize| lay.off_xt + ((s * m + i) * m + j) * d + k;
    let mut t = Vec::with_capacity(ns * m * d * 2 * (d + 1 + m) + np * ns * d * 2);
    for s in 0..ns {
        let verts = mesh.simplex(s);
        let vol = geo.volume(s);
        for i in 0..m {
            for k in 0..d {
                let rl = (s * m + i) * d + k;
                let rt = lay.off_theta + rl;
                for (l, &v) in verts.iter().enumerate() {
                    let g = vol * geo.grad(s, l)[k];
                    if g > 0.0 {
                        t.push((rl, v * m + i, g));
                    } else if g < 0.0 {
                        t.push((rt, v * m + i, -g));
                    }
                }
                for j in 0..m {
                    t.push((rl, xt(s, i, j, k), -vol));
                    t.push((rt, xt(s, j, i, k), -vol));
                }
            }
        }
        for (i, j) in pairs(m) {
            let p = pair_index(m, i, j);
            for k in 0..d {
                let r = lay.off_q + (p * ns + s) * d + k;
                t.push((r, xt(s, i, j, k), vol));
                t.push((r, xt(s, j, i, k), -vol));
            }
        }
    }
    let k = CsrMatrix::from_triplets(n_dual, n_primal, t);
    let mut c = vec![0.0; n_primal];
    c[..nv * m].copy_from_slice(&costs.values);
    let primal_runs = vec![
        Run {
            start: 0,
            block_len: m,
            count: nv,
            kind: PrimalKind::Simplex,
        },
        Run {
            start: lay.off_xt,
            block_len: n_primal - lay.off_xt,
            count: 1,
            kind: PrimalKind::NonNegative,
        },
    ];
    let mut dual_runs = vec![Run {
        start: 0,
        block_len: lay.off_q,
        count: 1,
        kind: DualKind::Free,
    }];
    for p in 0..np {
        dual_runs.push(Run {
            start: lay.off_q + p * ns * d,
            block_len: d,
            count: ns,
            kind: DualKind::Shape(p),
        });
    }
    let mut sp = SaddleProblem::new(k, c, vec![0.0; n_dual], primal_runs, dual_runs, shapes)?;
    // balance rows carry the simplex volume; report residuals per unit volume
    sp.residual_scale = (0..lay.off_q).map(|r| geo.volume(r / (m * d) % ns)).collect();
    Ok(sp)
}

fn build_p1_metric(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    costs: &CostField,
    lay: &Layout,
    shapes: Vec<crate::shapes::WulffShape>,
) -> Result<SaddleProblem> {
    let Layout { m, d, nv, ns, np, .. } = *lay;
    let mut t = Vec::with_capacity(ns * m * d * (d + 1));
    for s in 0..ns {
        let vol = geo.volume(s);
        for (l, &v) in mesh.simplex(s).iter().enumerate() {
            let g = geo.grad(s, l);
            for i in 0..m {
                for k in 0..d {
                    t.push(((s * m + i) * d + k, v * m + i, vol * g[k]));
                }
            }
        }
    }
    let k = CsrMatrix::from_triplets(ns * m * d, nv * m, t);
    let primal_runs = vec![Run {
        start: 0,
        block_len: m,
        count: nv,
        kind: PrimalKind::Simplex,
    }];
    let dual_runs = vec![Run {
        start: 0,
        block_len: m * d,
        count: ns,
        kind: DualKind::PairDifference {
            m,
            d,
            ids: (0..np).collect(),
        },
    }];
    SaddleProblem::new(
        k,
        costs.values.clone(),
        vec![0.0; ns * m * d],
        primal_runs,
        dual_runs,
        shapes,
    )
}

fn build_rt(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    costs: &CostField,
    lay: &mut Layout,
    shapes: Vec<crate::shapes::WulffShape>,
) -> Result<SaddleProblem> {
    let Layout { m, d, ns, np, .. } = *lay;
    let k1 = d + 1;
    lay.off_y = ns * m;
    let n_primal = lay.off_y + np * ns * k1 * d;
    let n_dual = lay.n_interior * m;
    let y = |p: usize, s: usize, l: usize, c: usize| lay.off_y + ((p * ns + s) * k1 + l) * d + c;
    let mut t = Vec::new();
    for s in 0..ns {
        let verts = mesh.simplex(s);
        let vol = geo.volume(s);
        for l in 0..k1 {
            let f = mesh.simplex_face(s, l);
            let fi = lay.interior[f];
            if fi == NONE {
                continue;
            }
            let area = geo.face_area(f);
            let sg = geo.sign(s, l);
            let v = mesh.vertex(verts[l]);
            for i in 0..m {
                let r = fi * m + i;
                t.push((r, s * m + i, area * sg));
                for lb in 0..k1 {
                    let z = geo.face_midpoint(mesh.simplex_face(s, lb));
                    for c in 0..d {
                        let a = -area * sg / (vol * d as f64) * (z[c] - v[c]);
                        for j in 0..m {
                            if j > i {
                                t.push((r, y(pair_index(m, i, j), s, lb, c), a));
                            } else if j < i {
                                t.push((r, y(pair_index(m, j, i), s, lb, c), -a));
                            }
                        }
                    }
                }
            }
        }
    }
    let k = CsrMatrix::from_triplets(n_dual, n_primal, t);
    let mut c = vec![0.0; n_primal];
    c[..ns * m].copy_from_slice(&costs.values);
    let mut primal_runs = vec![Run {
        start: 0,
        block_len: m,
        count: ns,
        kind: PrimalKind::Simplex,
    }];
    for p in 0..np {
        primal_runs.push(Run {
            start: y(p, 0, 0, 0),
            block_len: d,
            count: ns * k1,
            kind: PrimalKind::Support(p),
        });
    }
    let dual_runs = vec![Run {
        start: 0,
        block_len: n_dual,
        count: 1,
        kind: DualKind::Free,
    }];
    SaddleProblem::new(k, c, vec![0.0; n_dual], primal_runs, dual_runs, shapes)
}

impl Problem {
    pub fn n_labels(&self) -> usize {
        self.layout.m
    }

    pub fn dim(&self) -> usize {
        self.layout.d
    }

    /// Number of indicator blocks (vertices for P1, simplices for RT).
    pub fn n_sites(&self) -> usize {
        if self.flavor.is_p1() {
            self.layout.nv
        } else {
            self.layout.ns
        }
    }

    /// Index of indicator `x^i` at site `e` in the primal vector.
    pub fn x_index(&self, e: usize, i: usize) -> usize {
        e * self.layout.m + i
    }

    /// Index of `X^{ij}_s` component `k` (P1 non-metric).
    pub fn xt_index(&self, s: usize, i: usize, j: usize, k: usize) -> usize {
        let l = &self.layout;
        l.off_xt + ((s * l.m + i) * l.m + j) * l.d + k
    }

    /// Dual indices of the balance multipliers `(lambda, theta)` (P1 non-metric)
    /// or of the constrained `lambda` (P1 metric).
    pub fn lambda_index(&self, s: usize, i: usize, k: usize) -> usize {
        let l = &self.layout;
        (s * l.m + i) * l.d + k
    }

    pub fn theta_index(&self, s: usize, i: usize, k: usize) -> usize {
        self.layout.off_theta + self.lambda_index(s, i, k)
    }

    pub fn q_index(&self, p: usize, s: usize, k: usize) -> usize {
        let l = &self.layout;
        l.off_q + (p * l.ns + s) * l.d + k
    }

    /// Index of `y^{p}_{s, f_l}` component `c` (RT).
    pub fn y_index(&self, p: usize, s: usize, l: usize, c: usize) -> usize {
        let lay = &self.layout;
        lay.off_y + ((p * lay.ns + s) * (lay.d + 1) + l) * lay.d + c
    }

    /// Interior index of face `f` (RT multipliers), if interior.
    pub fn interior_face(&self, f: usize) -> Option<usize> {
        let i = self.layout.interior[f];
        (i != NONE).then_some(i)
    }

    pub fn n_interior_faces(&self) -> usize {
        self.layout.n_interior
    }

    /// Face coefficient vector of label `i` (one per mesh face, boundary zero).
    pub fn rt_face_coefficients(&self, state: &SolverState, i: usize) -> Vec<f64> {
        (0..self.mesh.n_faces())
            .map(|f| {
                self.interior_face(f)
                    .map_or(0.0, |fi| state.dual[fi * self.layout.m + i])
            })
            .collect()
    }

    /// Indicator values, `n_labels` per site.
    pub fn indicators<'a>(&self, state: &'a SolverState) -> &'a [f64] {
        &state.primal[..self.n_sites() * self.layout.m]
    }

    pub fn initial_state(&self) -> SolverState {
        solver::initial_state(&self.saddle)
    }

    /// State with indicators `x` (one block per site) and, for the
    /// non-metric flavor, the feasible product coupling
    /// `X^{ij}_k = P^i_k N^j_k / T_k` of the positive and negative gradient
    /// parts. Other entries are zero.
    pub fn state_from_indicators(&self, x: &[f64]) -> Result<SolverState> {
        let Layout { m, d, ns, .. } = self.layout;
        let n = self.n_sites() * m;
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        let mut st = SolverState {
            primal: vec![0.0; self.saddle.n_primal()],
            dual: vec![0.0; self.saddle.n_dual()],
        };
        st.primal[..n].copy_from_slice(x);
        if self.flavor == Flavor::P1NonMetric {
            let mut pos = vec![0.0; m * d];
            let mut neg = vec![0.0; m * d];
            for s in 0..ns {
                pos.iter_mut().chain(neg.iter_mut()).for_each(|v| *v = 0.0);
                let mut total = vec![0.0; d];
                for (l, &v) in self.mesh.simplex(s).iter().enumerate() {
                    let g = self.geo.grad(s, l);
                    for k in 0..d {
                        total[k] += g[k].max(0.0);
                        for i in 0..m {
                            pos[i * d + k] += x[v * m + i] * g[k].max(0.0);
                            neg[i * d + k] += x[v * m + i] * (-g[k]).max(0.0);
                        }
                    }
                }
                for i in 0..m {
                    for j in 0..m {
                        for k in 0..d {
                            if total[k] > 0.0 {
                                st.primal[self.xt_index(s, i, j, k)] = pos[i * d + k] * neg[j * d + k] / total[k];
                            }
                        }
                    }
                }
            }
        }
        Ok(st)
    }

    /// Indicators from the data alone: the cheapest label of the costs pooled
    /// over `rings` rounds of neighbour summation where some cost is nonzero,
    /// elsewhere the label of the nearest such site in the mesh
    /// graph (vertex edges for P1, face neighbours for RT).
    pub fn data_indicators(&self, rings: usize) -> Vec<f64> {
        let m = self.layout.m;
        let n = self.n_sites();
        let adjacency = self.site_adjacency();
        let mut pooled = self.costs.values.clone();
        for _ in 0..rings {
            let prev = pooled.clone();
            for (e, nb) in adjacency.iter().enumerate() {
                for &f in nb {
                    for i in 0..m {
                        pooled[e * m + i] += prev[f * m + i];
                    }
                }
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        for (e, slot) in label.iter_mut().enumerate() {
            let c = &pooled[e * m..(e + 1) * m];
            if self.costs.get(e).iter().any(|&v| v != 0.0) {
                let mut best = 0;
                for i in 1..m {
                    if c[i] < c[best] {
                        best = i;
                    }
                }
                *slot = best;
                queue.push_back(e);
            }
        }
        while let Some(e) = queue.pop_front() {
            for &f in &adjacency[e] {
                if label[f] == usize::MAX {
                    label[f] = label[e];
                    queue.push_back(f);
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for (e, &l) in label.iter().enumerate() {
            if l == usize::MAX {
                x[e * m..(e + 1) * m].iter_mut().for_each(|v| *v = 1.0 / m as f64);
            } else {
                x[e * m + l] = 1.0;
            }
        }
        x
    }

    /// Replaces the data costs without reassembling the operator.
    pub fn set_costs(&mut self, costs: CostField) -> Result<()> {
        let n = self.n_sites() * self.layout.m;
        if costs.n_labels != self.layout.m || costs.values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: costs.values.len(),
            });
        }
        if costs.values.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParams("costs must be finite".into()));
        }
        self.saddle.c[..n].copy_from_slice(&costs.values);
        self.costs = costs;
        Ok(())
    }

    fn site_adjacency(&self) -> Vec<Vec<usize>> {
        let mesh = &self.mesh;
        let mut adj = vec![Vec::new(); self.n_sites()];
        if self.flavor.is_p1() {
            for s in 0..mesh.n_simplices() {
                for &a in mesh.simplex(s) {
                    for &b in mesh.simplex(s) {
                        if a != b {
                            adj[a].push(b);
                        }
                    }
                }
            }
        } else {
            for f in 0..mesh.n_faces() {
                if let (a, Some(b)) = mesh.face_simplices(f) {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn solve(&self, cfg: &SolverConfig, init: Option<SolverState>) -> Result<SolveOutcome> {
        solver::solve(&self.saddle, cfg, init, self)
    }

    fn data_energy(&self, state: &SolverState) -> f64 {
        let n = self.n_sites() * self.layout.m;
        self.costs
            .values
            .iter()
            .zip(&state.primal[..n])
            .map(|(a, b)| a * b)
            .sum()
    }

    fn simplex_violation(&self, state: &SolverState) -> f64 {
        let m = self.layout.m;
        self.indicators(state)
            .chunks(m)
            .map(|x| {
                let neg = x.iter().fold(0.0f64, |a, &v| a.max(-v));
                neg.max((x.iter().sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    fn p1_nonmetric_regularizer(&self, state: &SolverState) -> f64 {
        let Layout { m, d, ns, .. } = self.layout;
        let mut total = 0.0;
        let mut diff = vec![0.0; d];
        for s in 0..ns {
            let vol = self.geo.volume(s);
            for (i, j) in pairs(m) {
                for (k, dk) in diff.iter_mut().enumerate() {
                    *dk = state.primal[self.xt_index(s, i, j, k)] - state.primal[self.xt_index(s, j, i, k)];
                }
                total += vol * self.table.shape(i, j).support(&diff).unwrap_or(f64::INFINITY);
            }
        }
        total
    }

    fn rt_regularizer(&self, state: &SolverState) -> f64 {
        let Layout { d, ns, np, .. } = self.layout;
        let mut total = 0.0;
        for p in 0..np {
            let shape = self.table.shape_by_index(p);
            let a = self.y_index(p, 0, 0, 0);
            for y in state.primal[a..a + ns * (d + 1) * d].chunks(d) {
                total += shape.support(y).unwrap_or(f64::INFINITY);
            }
        }
        total
    }

    /// Gradients `grad x^i` on simplex `s` from vertex indicators (P1).
    pub fn simplex_gradients(&self, x: &[f64], s: usize) -> Vec<f64> {
        let Layout { m, d, .. } = self.layout;
        let mut g = vec![0.0; m * d];
        for (l, &v) in self.mesh.simplex(s).iter().enumerate() {
            let j = self.geo.grad(s, l);
            for i in 0..m {
                for k in 0..d {
                    g[i * d + k] += x[v * m + i] * j[k];
                }
            }
        }
        g
    }

    /// Smallest regularizer of simplex `s` over transition variables for the
    /// given vertex indicators, scaled by `|s|` (P1 flavors).
    pub fn local_regularizer(&self, x: &[f64], s: usize) -> f64 {
        let Layout { m, d, .. } = self.layout;
        let vol = self.geo.volume(s);
        match self.flavor {
            Flavor::P1Metric => vol * metric_local_cost(&self.simplex_gradients(x, s), m, d, &self.table),
            _ => {
                let xl: Vec<f64> = self
                    .mesh
                    .simplex(s)
                    .iter()
                    .flat_map(|&v| x[v * m..(v + 1) * m].to_vec())
                    .collect();
                vol * nonmetric_local_cost(self.geo.grads(s), &xl, m, d, &self.table)
            }
        }
    }

    /// Energy of vertex indicators with optimal transition variables (P1).
    pub fn p1_energy_of(&self, x: &[f64]) -> f64 {
        let data: f64 = self.costs.values.iter().zip(x).map(|(a, b)| a * b).sum();
        let reg: f64 = (0..self.layout.ns).map(|s| self.local_regularizer(x, s)).sum();
        data + reg
    }

    /// Data plus regularizer at the current iterate, with a feasibility report.
    pub fn primal_energy(&self, state: &SolverState) -> Result<EnergyReport> {
        if state.primal.len() != self.saddle.n_primal() || state.dual.len() != self.saddle.n_dual() {
            return Err(Error::InconsistentState("state does not match problem".into()));
        }
        let data = self.data_energy(state);
        let mut feas = Feasibility {
            simplex_violation: self.simplex_violation(state),
            ..Default::default()
        };
        let regularizer = match self.flavor {
            Flavor::P1NonMetric => {
                feas.negativity = state.primal[self.layout.off_xt..]
                    .iter()
                    .fold(0.0f64, |a, &v| a.max(-v));
                feas.balance_residual = self.saddle.equality_residual(&state.primal);
                self.p1_nonmetric_regularizer(state)
            }
            Flavor::P1Metric => {
                let x = self.indicators(state);
                (0..self.layout.ns).map(|s| self.local_regularizer(x, s)).sum()
            }
            Flavor::Rt => {
                feas.balance_residual = self.saddle.equality_residual(&state.primal);
                self.rt_regularizer(state)
            }
        };
        Ok(EnergyReport {
            data,
            regularizer,
            total: data + regularizer,
            feasibility: feas,
        })
    }
}

impl Monitor for Problem {
    /// Primal energy at the iterate. For the metric flavor the regularizer is
    /// the pairing `<K x, lambda>` with the (feasible) dual iterate.
    fn monitor(&self, state: &SolverState) -> (f64, f64) {
        let data = self.data_energy(state);
        match self.flavor {
            Flavor::P1NonMetric => (
                data + self.p1_nonmetric_regularizer(state),
                self.saddle.equality_residual(&state.primal),
            ),
            Flavor::P1Metric => {
                let kx = self.saddle.k.mul(&state.primal);
                (data + kx.iter().zip(&state.dual).map(|(a, b)| a * b).sum::<f64>(), 0.0)
            }
            Flavor::Rt => (
                data + self.rt_regularizer(state),
                self.saddle.equality_residual(&state.primal),
            ),
        }
    }
}

fn local_solver_config() -> SolverConfig {
    SolverConfig {
        max_iters: 400_000,
        tol: 1e-12,
        check_every: 200,
        ..Default::default()
    }
}

/// `min sum_{i<j} ||y^{ij}||_{W^{ij}}` subject to
/// `g^i = sum_{j>i} y^{ij} - sum_{j<i} y^{ji}` for gradients `g` (row per label).
pub fn metric_local_cost(g: &[f64], m: usize, d: usize, table: &WulffTable) -> f64 {
    if g.iter().all(|&v| v.abs() < 1e-300) {
        return 0.0;
    }
    if m == 2 {
        return table.shape(0, 1).support(&g[..d]).unwrap_or(f64::INFINITY);
    }
    let np = m * (m - 1) / 2;
    let yi = |p: usize, c: usize| p * d + c;
    let mut t = Vec::new();
    for (i, j) in pairs(m) {
        let p = pair_index(m, i, j);
        for c in 0..d {
            t.push((i * d + c, yi(p, c), 1.0));
            t.push((j * d + c, yi(p, c), -1.0));
        }
    }
    let k = CsrMatrix::from_triplets(m * d, np * d, t);
    let shapes: Vec<_> = (0..np).map(|p| table.shape_by_index(p).clone()).collect();
    let primal_runs = (0..np)
        .map(|p| Run {
            start: p * d,
            block_len: d,
            count: 1,
            kind: PrimalKind::Support(p),
        })
        .collect();
    let sp = SaddleProblem::new(
        k,
        vec![0.0; np * d],
        g.to_vec(),
        primal_runs,
        vec![Run {
            start: 0,
            block_len: m * d,
            count: 1,
            kind: DualKind::Free,
        }],
        shapes,
    )
    .expect("local metric problem");
    let mon = SupportMonitor { sp: &sp, d };
    let out = solver::solve(&sp, &local_solver_config(), None, &mon).expect("local metric solve");
    mon.monitor(&out.state).0
}

struct SupportMonitor<'a> {
    sp: &'a SaddleProblem,
    d: usize,
}

impl Monitor for SupportMonitor<'_> {
    fn monitor(&self, st: &SolverState) -> (f64, f64) {
        let mut e = 0.0;
        for run in &self.sp.primal_runs {
            if let PrimalKind::Support(id) = run.kind {
                for y in st.primal[run.start..run.end()].chunks(self.d) {
                    e += self.sp.shapes[id].support(y).unwrap_or(f64::INFINITY);
                }
            }
        }
        (e, self.sp.equality_residual(&st.primal))
    }
}

/// `min sum_{i<j} ||X^{ij} - X^{ji}||_{W^{ij}}` over non-negative `X` that
/// satisfy the componentwise balance equations of one simplex with
/// barycentric gradients `grads` and vertex indicators `xl` (row per vertex).
pub fn nonmetric_local_cost(grads: &[f64], xl: &[f64], m: usize, d: usize, table: &WulffTable) -> f64 {
    let k1 = d + 1;
    let mut pos = vec![0.0; m * d];
    let mut neg = vec![0.0; m * d];
    let mut grad = vec![0.0; m * d];
    for l in 0..k1 {
        for i in 0..m {
            for c in 0..d {
                let j = grads[l * d + c];
                let x = xl[l * m + i];
                pos[i * d + c] += x * j.max(0.0);
                neg[i * d + c] += x * (-j).max(0.0);
                grad[i * d + c] += x * j;
            }
        }
    }
    let present: Vec<usize> = (0..m).filter(|&i| (0..k1).any(|l| xl[l * m + i] != 0.0)).collect();
    if present.len() <= 1 {
        return 0.0;
    }
    if present.len() == 2 {
        let (a, b) = (present[0], present[1]);
        return table
            .shape(a, b)
            .support(&grad[a * d..(a + 1) * d])
            .unwrap_or(f64::INFINITY);
    }
    let np = m * (m - 1) / 2;
    let xt = |i: usize, j: usize, c: usize| (i * m + j) * d + c;
    let off_n = m * d;
    let off_q = 2 * m * d;
    let mut t = Vec::new();
    for i in 0..m {
        for c in 0..d {
            for j in 0..m {
                t.push((i * d + c, xt(i, j, c), 1.0));
                t.push((off_n + i * d + c, xt(j, i, c), 1.0));
            }
        }
    }
    for (i, j) in pairs(m) {
        let p = pair_index(m, i, j);
        for c in 0..d {
            t.push((off_q + p * d + c, xt(i, j, c), 1.0));
            t.push((off_q + p * d + c, xt(j, i, c), -1.0));
        }
    }
    let nd = off_q + np * d;
    let k = CsrMatrix::from_triplets(nd, m * m * d, t);
    let mut b = vec![0.0; nd];
    b[..m * d].copy_from_slice(&pos);
    b[off_n..off_n + m * d].copy_from_slice(&neg);
    let shapes: Vec<_> = (0..np).map(|p| table.shape_by_index(p).clone()).collect();
    let mut dual_runs = vec![Run {
        start: 0,
        block_len: off_q,
        count: 1,
        kind: DualKind::Free,
    }];
    for p in 0..np {
        dual_runs.push(Run {
            start: off_q + p * d,
            block_len: d,
            count: 1,
            kind: DualKind::Shape(p),
        });
    }
    let sp = SaddleProblem::new(
        k,
        vec![0.0; m * m * d],
        b,
        vec![Run {
            start: 0,
            block_len: m * m * d,
            count: 1,
            kind: PrimalKind::NonNegative,
        }],
        dual_runs,
        shapes,
    )
    .expect("local non-metric problem");
    let mon = TransitionMonitor { sp: &sp, m, d, table };
    let out = solver::solve(&sp, &local_solver_config(), None, &mon).expect("local non-metric solve");
    mon.monitor(&out.state).0
}

struct TransitionMonitor<'a> {
    sp: &'a SaddleProblem,
    m: usize,
    d: usize,
    table: &'a WulffTable,
}

impl Monitor for TransitionMonitor<'_> {
    fn monitor(&self, st: &SolverState) -> (f64, f64) {
        let (m, d) = (self.m, self.d);
        let mut e = 0.0;
        let mut diff = vec![0.0; d];
        for (i, j) in pairs(m) {
            for (c, dc) in diff.iter_mut().enumerate() {
                *dc = st.primal[(i * m + j) * d + c] - st.primal[(j * m + i) * d + c];
            }
            e += self.table.shape(i, j).support(&diff).unwrap_or(f64::INFINITY);
        }
        (e, self.sp.equality_residual(&st.primal))
    }
}

/// Optimal transition masses for fixed vertex indicators on every simplex
/// via the minimal decomposition `X^{ij} = [D^{ij}]_+` of a given
/// antisymmetric flow `D`, completing the diagonal from the balance equations.
/// Returns `false` if some diagonal entry would become negative.
pub fn complete_diagonal(problem: &Problem, state: &mut SolverState, s: usize) -> bool {
    let Layout { m, d, .. } = problem.layout;
    let x = &state.primal[..problem.layout.nv * m];
    let mut pos = vec![0.0; m * d];
    for (l, &v) in problem.mesh.simplex(s).iter().enumerate() {
        let j = problem.geo.grad(s, l);
        for i in 0..m {
            for c in 0..d {
                pos[i * d + c] += x[v * m + i] * j[c].max(0.0);
            }
        }
    }
    let mut ok = true;
    for i in 0..m {
        for c in 0..d {
            let mut off = 0.0;
            for j in 0..m {
                if j != i {
                    let a = state.primal[problem.xt_index(s, i, j, c)];
                    let b = state.primal[problem.xt_index(s, j, i, c)];
                    let net = (a - b).max(0.0);
                    off += net;
                }
            }
            for j in 0..m {
                if j > i {
                    let ia = problem.xt_index(s, i, j, c);
                    let ib = problem.xt_index(s, j, i, c);
                    let dnet = state.primal[ia] - state.primal[ib];
                    state.primal[ia] = dnet.max(0.0);
                    state.primal[ib] = (-dnet).max(0.0);
                }
            }
            let diag = pos[i * d + c] - off;
            if diag < -1e-12 {
                ok = false;
            }
            state.primal[problem.xt_index(s, i, i, c)] = diag.max(0.0);
        }
    }
    ok
}
