//! Data costs from depth and class observations, and their integration onto
//! mesh vertices (P1) or simplices (RT).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryCache;
use crate::mesh::SimplexMesh;

/// A planar point camera with a fan of equally spaced rays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub center: [f64; 2],
    /// Angle of ray 0.
    pub angle_start: f64,
    /// Angular spacing between consecutive rays.
    pub angle_step: f64,
    pub n_rays: usize,
}

impl Camera {
    pub fn ray_angle(&self, r: usize) -> f64 {
        self.angle_start + self.angle_step * r as f64
    }

    pub fn ray_dir(&self, r: usize) -> [f64; 2] {
        let a = self.ray_angle(r);
        [a.cos(), a.sin()]
    }

    /// Ray whose direction is angularly nearest to `x`, if `x` lies within
    /// half a ray spacing of the fan.
    pub fn nearest_ray(&self, x: &[f64]) -> Option<usize> {
        let a = (x[1] - self.center[1]).atan2(x[0] - self.center[0]);
        let mut t = (a - self.angle_start) / self.angle_step;
        let period = std::f64::consts::TAU / self.angle_step.abs();
        // bring the angle into the fan's turn
        while t < -0.5 {
            t += period;
        }
        while t > period - 0.5 {
            t -= period;
        }
        let r = t.round();
        if r < 0.0 || r >= self.n_rays as f64 || (t - r).abs() > 0.5 {
            return None;
        }
        Some(r as usize)
    }
}

/// One ray measurement: observed depth and per-label class costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayObservation {
    pub depth: f64,
    /// Negative log-likelihood per label (the free-space entry is unused).
    pub sigma: Vec<f64>,
    /// Where the ray hit the surface (kept for perturbation bookkeeping).
    pub hit: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub n_labels: usize,
    pub cameras: Vec<Camera>,
    /// `rays[c][r]` is the observation of ray `r` of camera `c`, if any.
    pub rays: Vec<Vec<Option<RayObservation>>>,
}

impl Observations {
    pub fn count(&self) -> usize {
        self.rays.iter().flatten().filter(|o| o.is_some()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &RayObservation)> {
        self.rays.iter().enumerate().flat_map(|(c, rs)| {
            rs.iter()
                .enumerate()
                .filter_map(move |(r, o)| o.as_ref().map(|o| (c, r, o)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataCostParams {
    /// Band half width in units of `eps`.
    pub k: f64,
    pub eps: f64,
    /// Occupancy weight.
    pub beta: f64,
    /// Label with identically zero cost.
    pub free_label: usize,
    /// Solid cost at points more than `k * eps` in front of an observed hit.
    pub carve: f64,
}

impl Default for DataCostParams {
    fn default() -> Self {
        DataCostParams {
            k: 3.0,
            eps: 0.01,
            beta: 0.5,
            free_label: 0,
            carve: 0.0,
        }
    }
}

impl DataCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.k > 1.0 && self.beta > 0.0 && self.carve >= 0.0) {
            return Err(Error::InvalidParams(
                "need eps > 0, k > 1, beta > 0 and carve >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-label cost at a point, summed over cameras. With signed depth
/// `d = |x - c| - depth` (positive behind the observed surface), a solid
/// label receives `sigma` in the band `(k-1) eps <= d <= k eps` and the
/// occupancy term `-beta sign(d)` for `|d| <= k eps`, so solids are cheap
/// just behind a surface and expensive just in front of it.
pub fn rho_point(obs: &Observations, p: &DataCostParams, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let band = p.k * p.eps;
    let inner = (p.k - 1.0) * p.eps;
    for (c, cam) in obs.cameras.iter().enumerate() {
        let Some(r) = cam.nearest_ray(x) else { continue };
        let Some(o) = &obs.rays[c][r] else { continue };
        let dist = ((x[0] - cam.center[0]).powi(2) + (x[1] - cam.center[1]).powi(2)).sqrt();
        let d = dist - o.depth;
        if d < -band && p.carve != 0.0 {
            for (i, v) in out.iter_mut().enumerate() {
                if i != p.free_label {
                    *v += p.carve;
                }
            }
            continue;
        }
        if d.abs() > band {
            continue;
        }
        let occ = if d > 0.0 {
            -p.beta
        } else if d < 0.0 {
            p.beta
        } else {
            0.0
        };
        let class_band = d >= inner && d <= band;
        for (i, v) in out.iter_mut().enumerate() {
            if i == p.free_label {
                continue;
            }
            *v += occ;
            if class_band {
                *v += o.sigma[i];
            }
        }
    }
}

/// Per-label costs on vertices or simplices, row-major with `n_labels` per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostField {
    pub n_labels: usize,
    pub values: Vec<f64>,
}

impl CostField {
    pub fn zeros(n: usize, n_labels: usize) -> Self {
        CostField {
            n_labels,
            values: vec![0.0; n * n_labels],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_labels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, e: usize) -> &[f64] {
        &self.values[e * self.n_labels..(e + 1) * self.n_labels]
    }

    pub fn get_mut(&mut self, e: usize) -> &mut [f64] {
        &mut self.values[e * self.n_labels..(e + 1) * self.n_labels]
    }
}

/// Regular grid of sample points at cell centres with spacing `spacing`,
/// anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub spacing: f64,
}

impl Sampler {
    /// Default spacing of a quarter band width.
    pub fn for_eps(eps: f64) -> Self {
        Sampler { spacing: eps / 4.0 }
    }

    /// Calls `f(point, barycentric)` for every sample inside simplex `s`.
    pub fn for_each_in_simplex(
        &self,
        mesh: &SimplexMesh,
        geo: &GeometryCache,
        s: usize,
        mut f: impl FnMut(&[f64], &[f64]),
    ) {
        let d = mesh.dim();
        let h = self.spacing;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &v in mesh.simplex(s) {
            let p = mesh.vertex(v);
            for c in 0..d {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let mut first = [0i64; 3];
        let mut last = [0i64; 3];
        for c in 0..d {
            first[c] = ((lo[c] / h) - 0.5).ceil() as i64;
            last[c] = ((hi[c] / h) - 0.5).floor() as i64;
            if last[c] < first[c] {
                return;
            }
        }
        let mut idx = first;
        let mut p = [0.0; 3];
        let mut bary = [0.0; 4];
        loop {
            for c in 0..d {
                p[c] = (idx[c] as f64 + 0.5) * h;
            }
            geo.barycentric_unchecked(mesh, s, &p[..d], &mut bary);
            if bary[..=d].iter().all(|&a| a >= -1e-12) {
                f(&p[..d], &bary[..=d]);
            }
            let mut c = 0;
            while c < d {
                if idx[c] < last[c] {
                    idx[c] += 1;
                    break;
                }
                idx[c] = first[c];
                c += 1;
            }
            if c == d {
                break;
            }
        }
    }
}

/// Integrates a pointwise cost onto the vertices: the hat-weighted mean of
/// the samples in the star of `v`, scaled by `sum_{s in N(v)} |s| / d`.
/// Vertices whose star holds no sample use the cost at the vertex itself.
pub fn integrate_vertex_costs<F>(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    sampler: &Sampler,
    n_labels: usize,
    rho: F,
) -> CostField
where
    F: Fn(&[f64], &mut [f64]),
{
    let all: Vec<usize> = (0..mesh.n_vertices()).collect();
    let mut field = CostField::zeros(mesh.n_vertices(), n_labels);
    update_vertex_costs(mesh, geo, sampler, &rho, &all, &mut field);
    field
}

/// Recomputes the costs of `vertices` in place (used after local refinement).
pub fn update_vertex_costs<F>(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    sampler: &Sampler,
    rho: &F,
    vertices: &[usize],
    field: &mut CostField,
) where
    F: Fn(&[f64], &mut [f64]),
{
    let m = field.n_labels;
    let nv = mesh.n_vertices();
    if field.len() < nv {
        field.values.resize(nv * m, 0.0);
    }
    let mut wanted = vec![false; nv];
    for &v in vertices {
        wanted[v] = true;
    }
    let mut simplices: Vec<usize> = vertices
        .iter()
        .flat_map(|&v| mesh.vertex_star(v).iter().copied())
        .collect();
    simplices.sort_unstable();
    simplices.dedup();
    let mut weight = vec![0.0; nv];
    let mut acc = vec![0.0; nv * m];
    let mut buf = vec![0.0; m];
    for &s in &simplices {
        let verts = mesh.simplex(s);
        sampler.for_each_in_simplex(mesh, geo, s, |p, a| {
            rho(p, &mut buf);
            for (l, &v) in verts.iter().enumerate() {
                if wanted[v] && a[l] > 0.0 {
                    weight[v] += a[l];
                    for i in 0..m {
                        acc[v * m + i] += a[l] * buf[i];
                    }
                }
            }
        });
    }
    for &v in vertices {
        let lumped = geo.lumped_volume(mesh, v);
        let out = field.get_mut(v);
        if weight[v] > 0.0 {
            for i in 0..m {
                out[i] = acc[v * m + i] / weight[v] * lumped;
            }
        } else {
            rho(mesh.vertex(v), &mut buf);
            for i in 0..m {
                out[i] = buf[i] * lumped;
            }
        }
    }
}

/// Mean of the samples inside each simplex times its volume; simplices
/// without samples use the cost at their centroid.
pub fn integrate_simplex_costs<F>(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    sampler: &Sampler,
    n_labels: usize,
    rho: F,
) -> CostField
where
    F: Fn(&[f64], &mut [f64]),
{
    let all: Vec<usize> = (0..mesh.n_simplices()).collect();
    let mut field = CostField::zeros(mesh.n_simplices(), n_labels);
    update_simplex_costs(mesh, geo, sampler, &rho, &all, &mut field);
    field
}

/// Recomputes the costs of `simplices` in place.
pub fn update_simplex_costs<F>(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    sampler: &Sampler,
    rho: &F,
    simplices: &[usize],
    field: &mut CostField,
) where
    F: Fn(&[f64], &mut [f64]),
{
    let m = field.n_labels;
    let d = mesh.dim();
    if field.len() < mesh.n_simplices() {
        field.values.resize(mesh.n_simplices() * m, 0.0);
    }
    let mut buf = vec![0.0; m];
    let mut acc = vec![0.0; m];
    for &s in simplices {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut count = 0usize;
        sampler.for_each_in_simplex(mesh, geo, s, |p, _| {
            rho(p, &mut buf);
            count += 1;
            for i in 0..m {
                acc[i] += buf[i];
            }
        });
        let vol = geo.volume(s);
        if count == 0 {
            let mut cen = vec![0.0; d];
            for &v in mesh.simplex(s) {
                for c in 0..d {
                    cen[c] += mesh.vertex(v)[c] / (d + 1) as f64;
                }
            }
            rho(&cen, &mut acc);
            count = 1;
        }
        let out = field.get_mut(s);
        for i in 0..m {
            out[i] = acc[i] / count as f64 * vol;
        }
    }
}

/// Quadrature rule exact for quadratics on the reference simplex:
/// barycentric points with equal weights.
fn quadratic_rule(d: usize) -> Vec<[f64; 4]> {
    if d == 2 {
        vec![[0.5, 0.5, 0.0, 0.0], [0.0, 0.5, 0.5, 0.0], [0.5, 0.0, 0.5, 0.0]]
    } else {
        let a = 0.585_410_196_624_968_5;
        let b = 0.138_196_601_125_010_5;
        vec![[a, b, b, b], [b, a, b, b], [b, b, a, b], [b, b, b, a]]
    }
}

/// Vertex costs `((d+1)/d) * integral(hat_v * rho)` by quadrature, exact when
/// `rho` is affine. Agrees with the sampled estimator in the limit of dense
/// sampling.
pub fn quadrature_vertex_costs<F>(mesh: &SimplexMesh, geo: &GeometryCache, n_labels: usize, rho: F) -> CostField
where
    F: Fn(&[f64], &mut [f64]),
{
    let all: Vec<usize> = (0..mesh.n_vertices()).collect();
    let mut field = CostField::zeros(mesh.n_vertices(), n_labels);
    update_quadrature_vertex_costs(mesh, geo, &rho, &all, &mut field);
    field
}

pub fn update_quadrature_vertex_costs<F>(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    rho: &F,
    vertices: &[usize],
    field: &mut CostField,
) where
    F: Fn(&[f64], &mut [f64]),
{
    let d = mesh.dim();
    let m = field.n_labels;
    let nv = mesh.n_vertices();
    if field.len() < nv {
        field.values.resize(nv * m, 0.0);
    }
    let rule = quadratic_rule(d);
    let w = 1.0 / rule.len() as f64;
    let scale = (d + 1) as f64 / d as f64;
    let mut buf = vec![0.0; m];
    let mut p = vec![0.0; d];
    for &v in vertices {
        let mut acc = vec![0.0; m];
        for &s in mesh.vertex_star(v) {
            let l = mesh.local_index(s, v).unwrap();
            for q in &rule {
                p.iter_mut().for_each(|c| *c = 0.0);
                for (k, &u) in mesh.simplex(s).iter().enumerate() {
                    for c in 0..d {
                        p[c] += q[k] * mesh.vertex(u)[c];
                    }
                }
                rho(&p, &mut buf);
                for i in 0..m {
                    acc[i] += geo.volume(s) * w * q[l] * buf[i];
                }
            }
        }
        let out = field.get_mut(v);
        for i in 0..m {
            out[i] = scale * acc[i];
        }
    }
}

/// Simplex costs `integral_s rho` by quadrature (exact for quadratics).
pub fn quadrature_simplex_costs<F>(mesh: &SimplexMesh, geo: &GeometryCache, n_labels: usize, rho: F) -> CostField
where
    F: Fn(&[f64], &mut [f64]),
{
    let all: Vec<usize> = (0..mesh.n_simplices()).collect();
    let mut field = CostField::zeros(mesh.n_simplices(), n_labels);
    update_quadrature_simplex_costs(mesh, geo, &rho, &all, &mut field);
    field
}

pub fn update_quadrature_simplex_costs<F>(
    mesh: &SimplexMesh,
    geo: &GeometryCache,
    rho: &F,
    simplices: &[usize],
    field: &mut CostField,
) where
    F: Fn(&[f64], &mut [f64]),
{
    let d = mesh.dim();
    let m = field.n_labels;
    if field.len() < mesh.n_simplices() {
        field.values.resize(mesh.n_simplices() * m, 0.0);
    }
    let rule = quadratic_rule(d);
    let w = 1.0 / rule.len() as f64;
    let mut buf = vec![0.0; m];
    let mut p = vec![0.0; d];
    for &s in simplices {
        let mut acc = vec![0.0; m];
        for q in &rule {
            p.iter_mut().for_each(|c| *c = 0.0);
            for (k, &u) in mesh.simplex(s).iter().enumerate() {
                for c in 0..d {
                    p[c] += q[k] * mesh.vertex(u)[c];
                }
            }
            rho(&p, &mut buf);
            for i in 0..m {
                acc[i] += geo.volume(s) * w * buf[i];
            }
        }
        field.get_mut(s).copy_from_slice(&acc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_ray(depth: f64) -> Observations {
        Observations {
            n_labels: 3,
            cameras: vec![Camera {
                center: [0.0, 0.0],
                angle_start: 0.0,
                angle_step: 0.01,
                n_rays: 10,
            }],
            rays: vec![vec![
                Some(RayObservation {
                    depth,
                    sigma: vec![0.0, 2.0, 0.1],
                    hit: [depth, 0.0]
                });
                10
            ]],
        }
    }

    #[test]
    fn nearest_ray_handles_wraparound() {
        let cam = Camera {
            center: [0.0, 0.0],
            angle_start: 3.0,
            angle_step: 0.1,
            n_rays: 5,
        };
        // angle 3.35 ~ ray 3.5 -> rounds to 4 (or 3 within half spacing)
        assert_eq!(cam.nearest_ray(&[3.32f64.cos(), 3.32f64.sin()]), Some(3));
        assert_eq!(cam.nearest_ray(&[1.0, 0.0]), None);
        // angle just past pi expressed as a negative atan2 result
        assert_eq!(cam.nearest_ray(&[(-2.9f64).cos(), (-2.9f64).sin()]), Some(4));
    }

    #[test]
    fn free_label_is_zero_and_sign_zero_at_surface() {
        let obs = single_ray(1.0);
        let p = DataCostParams {
            k: 3.0,
            eps: 0.1,
            beta: 0.5,
            free_label: 0,
            carve: 0.0,
        };
        let mut out = [9.0; 3];
        rho_point(&obs, &p, &[1.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0]);
    }
}
