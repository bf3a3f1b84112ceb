//! Convex Wulff shapes, their support functions and Euclidean projections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WulffShape {
    /// `{y : |y| <= radius}`
    Ball {
        radius: f64,
    },
    /// `{y : lo <= y <= hi}`
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// `{t u : |t| <= half_length}` for a unit direction `u`.
    Segment {
        dir: Vec<f64>,
        half_length: f64,
    },
    /// `{y : <normal, y> <= offset}`
    HalfSpaceCut {
        normal: Vec<f64>,
        offset: f64,
    },
    Sum {
        parts: Vec<WulffShape>,
    },
    Intersection {
        parts: Vec<WulffShape>,
    },
}

/// Runs `f` on a zeroed scratch buffer of length `n`, on the stack when small.
pub(crate) fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if n <= 32 {
        let mut a = [0.0; 32];
        f(&mut a[..n])
    } else {
        f(&mut vec![0.0; n])
    }
}

/// Anything with a Euclidean projection.
pub trait ConvexSet: Sync {
    fn project_into(&self, y: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct DykstraOptions {
    pub max_cycles: usize,
    pub tol: f64,
}

impl Default for DykstraOptions {
    fn default() -> Self {
        DykstraOptions {
            max_cycles: 200,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DykstraResult {
    pub point: Vec<f64>,
    pub cycles: usize,
    pub converged: bool,
}

/// Dykstra's alternating projection onto the intersection of `sets`.
pub fn dykstra_project(sets: &[&dyn ConvexSet], y: &[f64], opts: DykstraOptions) -> Result<DykstraResult> {
    if sets.is_empty() {
        return Ok(DykstraResult {
            point: y.to_vec(),
            cycles: 0,
            converged: true,
        });
    }
    let n = y.len();
    let mut x = y.to_vec();
    let mut incr = vec![vec![0.0; n]; sets.len()];
    let mut buf = vec![0.0; n];
    let mut proj = vec![0.0; n];
    for cycle in 1..=opts.max_cycles {
        let mut change = 0.0f64;
        for (k, set) in sets.iter().enumerate() {
            for i in 0..n {
                buf[i] = x[i] + incr[k][i];
            }
            set.project_into(&buf, &mut proj);
            for i in 0..n {
                incr[k][i] = buf[i] - proj[i];
                change = change.max((proj[i] - x[i]).abs());
                x[i] = proj[i];
            }
        }
        if change < opts.tol {
            return Ok(DykstraResult {
                point: x,
                cycles: cycle,
                converged: true,
            });
        }
    }
    Ok(DykstraResult {
        point: x,
        cycles: opts.max_cycles,
        converged: false,
    })
}

/// Dykstra iteration on `x` with increments `incr` (one block of `x.len()`
/// per set) kept by the caller, so repeated calls warm start.
pub(crate) fn dykstra_inplace(sets: &[&dyn ConvexSet], x: &mut [f64], incr: &mut [f64], opts: DykstraOptions) {
    let n = x.len();
    with_scratch(2 * n, |tmp| {
        let (buf, proj) = tmp.split_at_mut(n);
        for _ in 0..opts.max_cycles {
            let mut change = 0.0f64;
            for (k, set) in sets.iter().enumerate() {
                let inc = &mut incr[k * n..(k + 1) * n];
                for i in 0..n {
                    buf[i] = x[i] + inc[i];
                }
                set.project_into(buf, proj);
                for i in 0..n {
                    inc[i] = buf[i] - proj[i];
                    change = change.max((proj[i] - x[i]).abs());
                    x[i] = proj[i];
                }
            }
            if change < opts.tol {
                break;
            }
        }
    });
}

impl ConvexSet for WulffShape {
    fn project_into(&self, y: &[f64], out: &mut [f64]) {
        self.project_inplace(y, out);
    }
}

impl WulffShape {
    pub fn ball(radius: f64) -> Self {
        WulffShape::Ball { radius }
    }

    pub fn segment(dir: &[f64], half_length: f64) -> Self {
        let n = norm(dir);
        WulffShape::Segment {
            dir: dir.iter().map(|c| c / n).collect(),
            half_length,
        }
    }

    pub fn sum(parts: Vec<WulffShape>) -> Self {
        WulffShape::Sum { parts }
    }

    /// Checks parameters and the ambient dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        match self {
            WulffShape::Ball { radius } => {
                if !(radius.is_finite() && *radius >= 0.0) {
                    return bad("ball radius must be finite and non-negative");
                }
            }
            WulffShape::Box { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: lo.len().min(hi.len()),
                    });
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return bad("box bounds must satisfy lo <= hi");
                }
            }
            WulffShape::Segment { dir, half_length } => {
                if dir.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: dir.len(),
                    });
                }
                if !(half_length.is_finite() && *half_length >= 0.0) || !((norm(dir) - 1.0).abs() < 1e-9) {
                    return bad("segment needs a unit direction and non-negative half length");
                }
            }
            WulffShape::HalfSpaceCut { normal, offset } => {
                if normal.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: normal.len(),
                    });
                }
                if norm(normal) == 0.0 || !offset.is_finite() {
                    return bad("half space needs a nonzero normal");
                }
            }
            WulffShape::Sum { parts } | WulffShape::Intersection { parts } => {
                if parts.is_empty() {
                    return Err(Error::EmptySet("composite shape without parts".into()));
                }
                for p in parts {
                    p.validate(dim)?;
                }
            }
        }
        Ok(())
    }

    /// Support function `sup_{w in W} <w, y>`. Intersections and half spaces
    /// are rejected.
    pub fn support(&self, y: &[f64]) -> Result<f64> {
        Ok(match self {
            WulffShape::Ball { radius } => radius * norm(y),
            WulffShape::Box { lo, hi } => (0..y.len()).map(|i| (lo[i] * y[i]).max(hi[i] * y[i])).sum(),
            WulffShape::Segment { dir, half_length } => half_length * dot(dir, y).abs(),
            WulffShape::Sum { parts } => {
                let mut t = 0.0;
                for p in parts {
                    t += p.support(y)?;
                }
                t
            }
            WulffShape::HalfSpaceCut { .. } => return Err(Error::Unsupported("support of a half space".into())),
            WulffShape::Intersection { .. } => return Err(Error::Unsupported("support of an intersection".into())),
        })
    }

    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.project_inplace(y, &mut out);
        out
    }

    pub fn project_inplace(&self, y: &[f64], out: &mut [f64]) {
        match self {
            WulffShape::Ball { radius } => {
                let n = norm(y);
                let s = if n > *radius { radius / n } else { 1.0 };
                for i in 0..y.len() {
                    out[i] = y[i] * s;
                }
            }
            WulffShape::Box { lo, hi } => {
                for i in 0..y.len() {
                    out[i] = y[i].clamp(lo[i], hi[i]);
                }
            }
            WulffShape::Segment { dir, half_length } => {
                let t = dot(dir, y).clamp(-half_length, *half_length);
                for i in 0..y.len() {
                    out[i] = t * dir[i];
                }
            }
            WulffShape::HalfSpaceCut { normal, offset } => {
                let viol = (dot(normal, y) - offset).max(0.0) / dot(normal, normal);
                for i in 0..y.len() {
                    out[i] = y[i] - viol * normal[i];
                }
            }
            WulffShape::Sum { parts } => project_sum(parts, y, out),
            WulffShape::Intersection { parts } => {
                let sets: Vec<&dyn ConvexSet> = parts.iter().map(|p| p as &dyn ConvexSet).collect();
                let r = dykstra_project(&sets, y, DykstraOptions::default()).expect("non-empty parts");
                out.copy_from_slice(&r.point);
            }
        }
    }

    /// `prox_{sigma * support}(y) = y - sigma * P(y / sigma)` (Moreau identity).
    pub fn prox_support(&self, y: &[f64], sigma: f64, out: &mut [f64]) {
        out.copy_from_slice(y);
        self.prox_support_inplace(out, sigma);
    }

    pub fn prox_support_inplace(&self, y: &mut [f64], sigma: f64) {
        let n = y.len();
        with_scratch(2 * n, |tmp| {
            let (scaled, proj) = tmp.split_at_mut(n);
            for i in 0..n {
                scaled[i] = y[i] / sigma;
            }
            self.project_inplace(scaled, proj);
            for i in 0..n {
                y[i] -= sigma * proj[i];
            }
        });
    }

    /// Projects `y` onto the shape in place.
    pub fn project_self(&self, y: &mut [f64]) {
        let n = y.len();
        with_scratch(n, |tmp| {
            tmp.copy_from_slice(y);
            self.project_inplace(tmp, y);
        });
    }

    /// Euclidean distance from `y` to the shape.
    pub fn distance(&self, y: &[f64]) -> f64 {
        let p = self.project(y);
        y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Projection onto a Minkowski sum. Balls are peeled off in closed form; the
/// remaining parts are handled by block coordinate descent.
fn project_sum(parts: &[WulffShape], y: &[f64], out: &mut [f64]) {
    let n = y.len();
    let kappa: f64 = parts
        .iter()
        .filter_map(|p| match p {
            WulffShape::Ball { radius } => Some(*radius),
            _ => None,
        })
        .sum();
    let rest: Vec<&WulffShape> = parts.iter().filter(|p| !matches!(p, WulffShape::Ball { .. })).collect();
    with_scratch(n, |core| {
        match rest.len() {
            0 => {}
            1 => rest[0].project_inplace(y, core),
            _ => project_sum_bcd(&rest, y, core),
        }
        let rn = (0..n).map(|i| (y[i] - core[i]).powi(2)).sum::<f64>().sqrt();
        let s = if rn > kappa { kappa / rn } else { 1.0 };
        for i in 0..n {
            out[i] = core[i] + s * (y[i] - core[i]);
        }
    });
}

/// Block coordinate descent for sums of several non-ball parts.
fn project_sum_bcd(rest: &[&WulffShape], y: &[f64], core: &mut [f64]) {
    let n = y.len();
    let mut pieces = vec![vec![0.0; n]; rest.len()];
    let mut target = vec![0.0; n];
    let mut p = vec![0.0; n];
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for k in 0..rest.len() {
            for i in 0..n {
                target[i] = y[i] - (0..rest.len()).filter(|&j| j != k).map(|j| pieces[j][i]).sum::<f64>();
            }
            rest[k].project_inplace(&target, &mut p);
            for i in 0..n {
                change = change.max((p[i] - pieces[k][i]).abs());
            }
            pieces[k].copy_from_slice(&p);
        }
        if change < 1e-14 {
            break;
        }
    }
    for piece in &pieces {
        for i in 0..n {
            core[i] += piece[i];
        }
    }
}

/// Euclidean projection onto the probability simplex (sort based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    project_simplex_inplace(&mut out);
    out
}

pub fn project_simplex_inplace(v: &mut [f64]) {
    let n = v.len();
    let theta = with_scratch(n, |u| {
        u.copy_from_slice(v);
        u.sort_unstable_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (j, &uj) in u.iter().enumerate() {
            cum += uj;
            let t = (cum - 1.0) / (j + 1) as f64;
            if uj - t > 0.0 {
                theta = t;
            }
        }
        theta
    });
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// The set `{lambda in R^{m d} : lambda^i - lambda^j in W^{ij}}` for one pair.
pub struct PairDifference<'a> {
    pub i: usize,
    pub j: usize,
    pub dim: usize,
    pub shape: &'a WulffShape,
}

impl ConvexSet for PairDifference<'_> {
    fn project_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
        let d = self.dim;
        let mut delta = [0.0; 3];
        for c in 0..d {
            delta[c] = y[self.i * d + c] - y[self.j * d + c];
        }
        let mut p = [0.0; 3];
        self.shape.project_inplace(&delta[..d], &mut p[..d]);
        for c in 0..d {
            let corr = (p[c] - delta[c]) / 2.0;
            out[self.i * d + c] += corr;
            out[self.j * d + c] -= corr;
        }
    }
}

/// Semantic classes with preset transition shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    FreeSpace,
    Building,
    Ground,
    Roof,
    Vegetation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetParams {
    /// Half length of the anisotropic segment.
    pub anisotropy: f64,
    /// Radius of the isotropic ball.
    pub isotropy: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        PresetParams {
            anisotropy: 1.0,
            isotropy: 0.1,
        }
    }
}

/// Preset shape for a pair of classes. Pairs whose interfaces should prefer
/// horizontal orientation use a segment across the up axis, so that a normal
/// pointing along `up` is cheapest; pairs preferring vertical interfaces use
/// a segment along `up`. Other pairs are isotropic.
pub fn preset_shape(a: Class, b: Class, up: &[f64], p: PresetParams) -> WulffShape {
    use Class::*;
    let horizontal = matches!(
        (a, b),
        (Ground, FreeSpace)
            | (FreeSpace, Ground)
            | (Ground, Building)
            | (Building, Ground)
            | (Building, Roof)
            | (Roof, Building)
            | (Ground, Vegetation)
            | (Vegetation, Ground)
    );
    let vertical = matches!(
        (a, b),
        (Building, FreeSpace) | (FreeSpace, Building) | (Building, Vegetation) | (Vegetation, Building)
    );
    let ball = WulffShape::ball(p.isotropy);
    let d = up.len();
    if horizontal && p.anisotropy > 0.0 {
        if d == 2 {
            return WulffShape::sum(vec![WulffShape::segment(&[up[1], -up[0]], p.anisotropy), ball]);
        }
        // two orthogonal segments spanning the plane across `up`
        let k = (0..d).min_by(|&i, &j| up[i].abs().total_cmp(&up[j].abs())).unwrap();
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let t = dot(&e, up) / dot(up, up);
        let a: Vec<f64> = e.iter().zip(up).map(|(x, u)| x - t * u).collect();
        let b = vec![
            up[1] * a[2] - up[2] * a[1],
            up[2] * a[0] - up[0] * a[2],
            up[0] * a[1] - up[1] * a[0],
        ];
        WulffShape::sum(vec![
            WulffShape::segment(&a, p.anisotropy),
            WulffShape::segment(&b, p.anisotropy),
            ball,
        ])
    } else if vertical && p.anisotropy > 0.0 {
        WulffShape::sum(vec![WulffShape::segment(up, p.anisotropy), ball])
    } else {
        ball
    }
}

/// Transition shapes for all label pairs `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WulffTable {
    pub n_labels: usize,
    pub dim: usize,
    shapes: Vec<WulffShape>,
}

/// Index of pair `(i, j)` with `i < j` in lexicographic order.
pub fn pair_index(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < m);
    i * (2 * m - i - 1) / 2 + (j - i - 1)
}

pub fn pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j)))
}

impl WulffTable {
    pub fn new(n_labels: usize, dim: usize, shapes: Vec<WulffShape>) -> Result<Self> {
        let t = WulffTable { n_labels, dim, shapes };
        t.validate()?;
        Ok(t)
    }

    /// The same shape for every pair.
    pub fn uniform(n_labels: usize, dim: usize, shape: WulffShape) -> Result<Self> {
        Self::new(n_labels, dim, vec![shape; n_labels * n_labels.saturating_sub(1) / 2])
    }

    pub fn from_fn(n_labels: usize, dim: usize, f: impl Fn(usize, usize) -> WulffShape) -> Result<Self> {
        Self::new(n_labels, dim, pairs(n_labels).map(|(i, j)| f(i, j)).collect())
    }

    /// Preset table for labelled classes.
    pub fn preset(classes: &[Class], up: &[f64], p: PresetParams) -> Result<Self> {
        Self::from_fn(classes.len(), up.len(), |i, j| {
            preset_shape(classes[i], classes[j], up, p)
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.shapes.len()
    }

    pub fn shape(&self, i: usize, j: usize) -> &WulffShape {
        &self.shapes[pair_index(self.n_labels, i, j)]
    }

    pub fn shape_by_index(&self, p: usize) -> &WulffShape {
        &self.shapes[p]
    }

    /// Multiplies every shape by `w` (scales supports linearly).
    pub fn scaled(&self, w: f64) -> Self {
        fn scale(s: &WulffShape, w: f64) -> WulffShape {
            match s {
                WulffShape::Ball { radius } => WulffShape::Ball { radius: radius * w },
                WulffShape::Box { lo, hi } => WulffShape::Box {
                    lo: lo.iter().map(|c| c * w).collect(),
                    hi: hi.iter().map(|c| c * w).collect(),
                },
                WulffShape::Segment { dir, half_length } => WulffShape::Segment {
                    dir: dir.clone(),
                    half_length: half_length * w,
                },
                WulffShape::HalfSpaceCut { normal, offset } => WulffShape::HalfSpaceCut {
                    normal: normal.clone(),
                    offset: offset * w,
                },
                WulffShape::Sum { parts } => WulffShape::Sum {
                    parts: parts.iter().map(|p| scale(p, w)).collect(),
                },
                WulffShape::Intersection { parts } => WulffShape::Intersection {
                    parts: parts.iter().map(|p| scale(p, w)).collect(),
                },
            }
        }
        WulffTable {
            n_labels: self.n_labels,
            dim: self.dim,
            shapes: self.shapes.iter().map(|s| scale(s, w)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_labels;
        if self.shapes.len() != m * m.saturating_sub(1) / 2 {
            return Err(Error::InvalidTable(format!(
                "expected {} pair shapes, got {}",
                m * m.saturating_sub(1) / 2,
                self.shapes.len()
            )));
        }
        let zero = vec![0.0; self.dim];
        for (p, s) in self.shapes.iter().enumerate() {
            s.validate(self.dim)?;
            if s.distance(&zero) > 1e-9 {
                return Err(Error::InvalidTable(format!(
                    "shape of pair {p} does not contain the origin"
                )));
            }
        }
        Ok(())
    }

    /// JSON object keyed `"i,j"` with `i < j`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = BTreeMap::new();
        for (i, j) in pairs(self.n_labels) {
            map.insert(format!("{i},{j}"), serde_json::to_value(self.shape(i, j)).unwrap());
        }
        serde_json::json!({ "n_labels": self.n_labels, "dim": self.dim, "pairs": map })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let get = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_u64())
                .ok_or_else(|| Error::InvalidTable(format!("missing {k}")))
        };
        let m = get("n_labels")? as usize;
        let dim = get("dim")? as usize;
        let obj = v
            .get("pairs")
            .and_then(|p| p.as_object())
            .ok_or_else(|| Error::InvalidTable("missing pairs".into()))?;
        let mut shapes = Vec::new();
        for (i, j) in pairs(m) {
            let e = obj
                .get(&format!("{i},{j}"))
                .ok_or_else(|| Error::InvalidTable(format!("missing pair {i},{j}")))?;
            shapes.push(serde_json::from_value(e.clone())?);
        }
        if obj.len() != shapes.len() {
            return Err(Error::InvalidTable("unexpected pair keys".into()));
        }
        Self::new(m, dim, shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_projection_example() {
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn segment_plus_ball_projection() {
        let w = WulffShape::sum(vec![WulffShape::segment(&[1.0, 0.0], 1.0), WulffShape::ball(0.5)]);
        let p = w.project(&[3.0, 0.0]);
        assert!((p[0] - 1.5).abs() < 1e-15 && p[1].abs() < 1e-15);
        assert!((w.support(&[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pair_index_is_dense() {
        let m = 5;
        let idx: Vec<usize> = pairs(m).map(|(i, j)| pair_index(m, i, j)).collect();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn intersection_support_is_rejected() {
        let w = WulffShape::Intersection {
            parts: vec![WulffShape::ball(1.0)],
        };
        assert!(matches!(w.support(&[1.0, 0.0]), Err(Error::Unsupported(_))));
    }
}
