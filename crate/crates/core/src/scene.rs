//! Synthetic layered 2D scene with virtual cameras, ray observations,
//! perturbations and control-mesh construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datacost::{Camera, Observations, RayObservation};
use crate::delaunay::build_delaunay_2d;
use crate::error::{Error, Result};
use crate::extract::LabelMap;
use crate::mesh::SimplexMesh;
use crate::shapes::Class;

pub const FREE: usize = 0;
pub const BUILDING: usize = 1;
pub const GROUND: usize = 2;
pub const ROOF: usize = 3;
pub const N_LABELS: usize = 4;

/// Classes in label order.
pub const CLASSES: [Class; N_LABELS] = [Class::FreeSpace, Class::Building, Class::Ground, Class::Roof];

/// A rectangular building standing on the ground with a gable roof.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub x0: f64,
    pub x1: f64,
    /// Height of the walls above the ground line.
    pub wall: f64,
    /// Height of the roof apex above the wall top; zero for a flat roof.
    pub roof: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub ground: f64,
    pub buildings: Vec<Building>,
    pub n_cameras: usize,
    pub rays_per_camera: usize,
    pub sigma_hit: f64,
    pub sigma_miss: f64,
    /// Ground-truth raster resolution (pixels per side).
    pub resolution: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
            ground: 0.25,
            buildings: vec![Building {
                x0: 0.3125,
                x1: 0.6875,
                wall: 0.25,
                roof: 0.25,
            }],
            n_cameras: 17,
            rays_per_camera: 256,
            sigma_hit: 0.1,
            sigma_miss: 2.0,
            resolution: 256,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScene(m.into()));
        if !(self.hi[0] > self.lo[0] && self.hi[1] > self.lo[1]) {
            return bad("empty domain");
        }
        if !(self.ground > self.lo[1] && self.ground < self.hi[1]) {
            return bad("ground line outside the domain");
        }
        for b in &self.buildings {
            if !(b.x0 > self.lo[0] && b.x1 < self.hi[0] && b.x0 < b.x1) {
                return bad("building outside the domain");
            }
            if !(b.wall > 0.0 && b.roof >= 0.0 && self.ground + b.wall + b.roof < self.hi[1]) {
                return bad("building height out of range");
            }
        }
        for (k, a) in self.buildings.iter().enumerate() {
            for b in &self.buildings[k + 1..] {
                if a.x0 < b.x1 && b.x0 < a.x1 {
                    return bad("buildings overlap");
                }
            }
        }
        if self.n_cameras == 0 || self.rays_per_camera == 0 || self.resolution == 0 {
            return bad("camera, ray and raster counts must be positive");
        }
        if !(self.sigma_hit >= 0.0 && self.sigma_miss >= 0.0) {
            return bad("class costs must be non-negative");
        }
        Ok(())
    }

    /// Ground-truth label at `p`.
    pub fn label_at(&self, p: [f64; 2]) -> usize {
        if p[1] < self.ground {
            return GROUND;
        }
        for b in &self.buildings {
            if p[0] < b.x0 || p[0] > b.x1 {
                continue;
            }
            let top = self.ground + b.wall;
            if p[1] <= top {
                return BUILDING;
            }
            let half = (b.x1 - b.x0) / 2.0;
            let t = 1.0 - ((p[0] - (b.x0 + half)) / half).abs();
            if b.roof > 0.0 && p[1] <= top + b.roof * t {
                return ROOF;
            }
        }
        FREE
    }

    /// Surface segments with the solid label behind them.
    pub fn segments(&self) -> Vec<([f64; 2], [f64; 2], usize)> {
        let g = self.ground;
        let mut out = vec![([self.lo[0], g], [self.hi[0], g], GROUND)];
        for b in &self.buildings {
            let top = g + b.wall;
            out.push(([b.x0, g], [b.x0, top], BUILDING));
            out.push(([b.x1, g], [b.x1, top], BUILDING));
            if b.roof > 0.0 {
                let apex = [(b.x0 + b.x1) / 2.0, top + b.roof];
                out.push(([b.x0, top], apex, ROOF));
                out.push((apex, [b.x1, top], ROOF));
            } else {
                out.push(([b.x0, top], [b.x1, top], BUILDING));
            }
        }
        out
    }

    /// Analytic area of every label inside the domain.
    pub fn label_areas(&self) -> [f64; N_LABELS] {
        let w = self.hi[0] - self.lo[0];
        let mut a = [0.0; N_LABELS];
        a[GROUND] = w * (self.ground - self.lo[1]);
        for b in &self.buildings {
            a[BUILDING] += (b.x1 - b.x0) * b.wall;
            a[ROOF] += (b.x1 - b.x0) * b.roof / 2.0;
        }
        a[FREE] = w * (self.hi[1] - self.lo[1]) - a[GROUND] - a[BUILDING] - a[ROOF];
        a
    }
}

/// A generated scene: spec, cameras and ground-truth raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub cameras: Vec<Camera>,
    pub gt: LabelMap,
}

/// Cameras equally spaced on the upper half circle of radius 1.5 times the
/// half diagonal around the domain centre; each fan spans the domain.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mid = [(spec.lo[0] + spec.hi[0]) / 2.0, (spec.lo[1] + spec.hi[1]) / 2.0];
    let half_diag = ((spec.hi[0] - spec.lo[0]).powi(2) + (spec.hi[1] - spec.lo[1]).powi(2)).sqrt() / 2.0;
    let radius = 1.5 * half_diag;
    let n = spec.n_cameras;
    let corners = [spec.lo, [spec.hi[0], spec.lo[1]], spec.hi, [spec.lo[0], spec.hi[1]]];
    let cameras = (0..n)
        .map(|c| {
            let phi = if n == 1 {
                std::f64::consts::FRAC_PI_2
            } else {
                std::f64::consts::PI * c as f64 / (n - 1) as f64
            };
            let center = [mid[0] + radius * phi.cos(), mid[1] + radius * phi.sin()];
            // view direction towards the centre; corner angles relative to it
            let view = (mid[1] - center[1]).atan2(mid[0] - center[0]);
            let rel: Vec<f64> = corners
                .iter()
                .map(|q| {
                    let a = (q[1] - center[1]).atan2(q[0] - center[0]) - view;
                    (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
                })
                .collect();
            let amin = rel.iter().copied().fold(f64::INFINITY, f64::min);
            let amax = rel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let step = (amax - amin) / spec.rays_per_camera as f64;
            Camera {
                center,
                angle_start: view + amin + step / 2.0,
                angle_step: step,
                n_rays: spec.rays_per_camera,
            }
        })
        .collect();
    let r = spec.resolution;
    let gt = LabelMap::from_fn(r, r, spec.lo, spec.hi, |p| spec.label_at(p) as u8 + 1);
    Ok(Scene {
        spec: spec.clone(),
        seed,
        cameras,
        gt,
    })
}

/// First surface hit along a ray approaching from free space.
fn cast(spec: &SceneSpec, segs: &[([f64; 2], [f64; 2], usize)], o: [f64; 2], dir: [f64; 2]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for &(a, b, label) in segs {
        let e = [b[0] - a[0], b[1] - a[1]];
        let den = dir[0] * e[1] - dir[1] * e[0];
        if den.abs() < 1e-15 {
            continue;
        }
        let w = [a[0] - o[0], a[1] - o[1]];
        let t = (w[0] * e[1] - w[1] * e[0]) / den;
        let u = (w[0] * dir[1] - w[1] * dir[0]) / den;
        if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, label));
        }
    }
    let (t, label) = best?;
    let before = [o[0] + (t - 1e-9) * dir[0], o[1] + (t - 1e-9) * dir[1]];
    (spec.label_at(before) == FREE).then_some((t, label))
}

/// Ray casting from every camera: depth of the first surface hit and class
/// costs `sigma_hit` for the label behind it, `sigma_miss` for other solids.
pub fn observe(scene: &Scene) -> Observations {
    let spec = &scene.spec;
    let segs = spec.segments();
    let rays = scene
        .cameras
        .iter()
        .map(|cam| {
            (0..cam.n_rays)
                .map(|r| {
                    let dir = cam.ray_dir(r);
                    cast(spec, &segs, cam.center, dir).map(|(t, label)| {
                        let mut sigma = vec![spec.sigma_miss; N_LABELS];
                        sigma[FREE] = 0.0;
                        sigma[label] = spec.sigma_hit;
                        RayObservation {
                            depth: t,
                            sigma,
                            hit: [cam.center[0] + t * dir[0], cam.center[1] + t * dir[1]],
                        }
                    })
                })
                .collect()
        })
        .collect();
    Observations {
        n_labels: N_LABELS,
        cameras: scene.cameras.clone(),
        rays,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "amount", rename_all = "snake_case")]
pub enum Perturbation {
    /// Gaussian depth noise with this standard deviation.
    DepthNoise(f64),
    /// Fraction of observations whose cheapest class is a wrong one.
    WrongClass(f64),
    /// Fraction of observations with uniform class costs.
    AmbiguousClass(f64),
    /// Fraction of observations removed as one contiguous stretch of surface.
    MissingData(f64),
    /// Probability of keeping each observation.
    Sparsify(f64),
}

impl Perturbation {
    pub fn magnitude(&self) -> f64 {
        match *self {
            Perturbation::DepthNoise(a)
            | Perturbation::WrongClass(a)
            | Perturbation::AmbiguousClass(a)
            | Perturbation::MissingData(a)
            | Perturbation::Sparsify(a) => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.magnitude();
        let ok = match self {
            Perturbation::DepthNoise(_) => a >= 0.0,
            _ => (0.0..=1.0).contains(&a),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("perturbation magnitude {a} out of range")))
        }
    }
}

fn ray_rng(seed: u64, salt: u64, cam: usize, ray: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(((cam as u64) << 32) | ray as u64);
    rng
}

/// Applies `pert` with per-ray random streams derived from `seed`.
pub fn perturb(obs: &Observations, pert: &Perturbation, seed: u64) -> Result<Observations> {
    pert.validate()?;
    let mut out = obs.clone();
    let free = FREE;
    match *pert {
        Perturbation::DepthNoise(sd) => {
            if sd > 0.0 {
                let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidParams(e.to_string()))?;
                for_each_obs(&mut out, |c, r, o| {
                    o.depth += normal.sample(&mut ray_rng(seed, 1, c, r))
                });
            }
        }
        Perturbation::WrongClass(f) => for_each_obs(&mut out, |c, r, o| {
            let mut rng = ray_rng(seed, 2, c, r);
            if rng.random::<f64>() < f {
                let truth = cheapest_solid(&o.sigma, free);
                let (lo, hi) = (
                    o.sigma[truth],
                    o.sigma
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != free)
                        .map(|(_, &s)| s)
                        .fold(f64::MIN, f64::max),
                );
                let wrong: Vec<usize> = (0..o.sigma.len()).filter(|&i| i != free && i != truth).collect();
                let pick = wrong[rng.random_range(0..wrong.len())];
                for (i, s) in o.sigma.iter_mut().enumerate() {
                    if i != free {
                        *s = if i == pick { lo } else { hi };
                    }
                }
            }
        }),
        Perturbation::AmbiguousClass(f) => for_each_obs(&mut out, |c, r, o| {
            if ray_rng(seed, 3, c, r).random::<f64>() < f {
                let solids: Vec<usize> = (0..o.sigma.len()).filter(|&i| i != free).collect();
                let mean = solids.iter().map(|&i| o.sigma[i]).sum::<f64>() / solids.len() as f64;
                for i in solids {
                    o.sigma[i] = mean;
                }
            }
        }),
        Perturbation::MissingData(f) => {
            let mut xs: Vec<f64> = obs.iter().map(|(_, _, o)| o.hit[0]).collect();
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let k = (f * n as f64).round() as usize;
            if k > 0 && n > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
                let start = rng.random_range(0..=n - k);
                let (a, b) = (xs[start], xs[start + k - 1]);
                let mut budget = k;
                for rs in out.rays.iter_mut() {
                    for slot in rs.iter_mut() {
                        if budget > 0 && slot.as_ref().is_some_and(|o| o.hit[0] >= a && o.hit[0] <= b) {
                            *slot = None;
                            budget -= 1;
                        }
                    }
                }
            }
        }
        Perturbation::Sparsify(keep) => {
            for (c, rs) in out.rays.iter_mut().enumerate() {
                for (r, slot) in rs.iter_mut().enumerate() {
                    if slot.is_some() && ray_rng(seed, 5, c, r).random::<f64>() >= keep {
                        *slot = None;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn for_each_obs(obs: &mut Observations, mut f: impl FnMut(usize, usize, &mut RayObservation)) {
    for (c, rs) in obs.rays.iter_mut().enumerate() {
        for (r, slot) in rs.iter_mut().enumerate() {
            if let Some(o) = slot {
                f(c, r, o);
            }
        }
    }
}

/// Solid label with the smallest class cost (lowest index on ties).
pub fn cheapest_solid(sigma: &[f64], free: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &s) in sigma.iter().enumerate() {
        if i != free && (best == usize::MAX || s < sigma[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlMeshParams {
    /// Control points per ray.
    pub n_c: usize,
    /// Spacing of control points along a ray.
    pub eps_c: f64,
    /// Cells per side of the background grid.
    pub background: usize,
    /// Points closer than this are merged.
    pub min_spacing: f64,
}

impl Default for ControlMeshParams {
    fn default() -> Self {
        ControlMeshParams {
            n_c: 8,
            eps_c: 0.01,
            background: 16,
            min_spacing: 0.004,
        }
    }
}

/// Offsets of the control points along a ray in units of `eps_c`: `j + 1/2`
/// for `j` in `-floor(n/2) .. ceil(n/2) - 1`, symmetric about the surface
/// for even `n`.
pub fn control_offsets(n_c: usize) -> impl Iterator<Item = f64> {
    let n = n_c as i64;
    (-(n / 2)..(n + 1) / 2).map(|j| j as f64 + 0.5)
}

/// Control points along every observed ray around its depth, clipped to the
/// domain, on top of a regular background grid.
pub fn control_points(obs: &Observations, lo: [f64; 2], hi: [f64; 2], p: &ControlMeshParams) -> Vec<[f64; 2]> {
    let g = p.background.max(1);
    let mut pts = Vec::new();
    for iy in 0..=g {
        for ix in 0..=g {
            let t = [ix as f64 / g as f64, iy as f64 / g as f64];
            pts.push([lo[0] + t[0] * (hi[0] - lo[0]), lo[1] + t[1] * (hi[1] - lo[1])]);
        }
    }
    for (c, r, o) in obs.iter() {
        let cam = &obs.cameras[c];
        let dir = cam.ray_dir(r);
        for j in control_offsets(p.n_c) {
            let t = o.depth + j * p.eps_c;
            let q = [cam.center[0] + t * dir[0], cam.center[1] + t * dir[1]];
            if q[0] > lo[0] && q[0] < hi[0] && q[1] > lo[1] && q[1] < hi[1] {
                pts.push(q);
            }
        }
    }
    pts
}

pub fn build_control_mesh(
    obs: &Observations,
    lo: [f64; 2],
    hi: [f64; 2],
    p: &ControlMeshParams,
) -> Result<SimplexMesh> {
    if obs.count() == 0 {
        return Err(Error::InvalidScene("no observations".into()));
    }
    build_delaunay_2d(&control_points(obs, lo, hi, p), p.min_spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_has_four_labels() {
        let s = generate(&SceneSpec::default(), 0).unwrap();
        for l in 1..=4u8 {
            assert!(s.gt.labels.contains(&l));
        }
    }

    #[test]
    fn offsets_split_evenly() {
        assert_eq!(control_offsets(2).collect::<Vec<_>>(), vec![-0.5, 0.5]);
        assert_eq!(control_offsets(8).count(), 8);
    }
}
