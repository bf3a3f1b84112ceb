//! Label decisions, iso-0.5 interfaces, rasterization and accuracy.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::energy::Problem;
use crate::error::{Error, Result};
use crate::geometry::GeometryCache;
use crate::mesh::SimplexMesh;
use crate::solver::SolverState;

/// Values exactly at the iso level are nudged up by this amount.
pub const ISO_NUDGE: f64 = 1e-12;

/// Raster of 1-based labels over an axis-aligned box; 0 marks pixels outside
/// the mesh. Row 0 is the top row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, lo: [f64; 2], hi: [f64; 2]) -> Self {
        LabelMap {
            width,
            height,
            lo,
            hi,
            labels: vec![0; width * height],
        }
    }

    /// Centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let x = self.lo[0] + (col as f64 + 0.5) / self.width as f64 * (self.hi[0] - self.lo[0]);
        let y = self.hi[1] - (row as f64 + 0.5) / self.height as f64 * (self.hi[1] - self.lo[1]);
        [x, y]
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Fills every pixel from a label function of the pixel centre.
    pub fn from_fn(width: usize, height: usize, lo: [f64; 2], hi: [f64; 2], f: impl Fn([f64; 2]) -> u8) -> Self {
        let mut map = LabelMap::new(width, height, lo, hi);
        for r in 0..height {
            for c in 0..width {
                map.labels[r * width + c] = f(map.pixel_center(r, c));
            }
        }
        map
    }

    /// ASCII greymap with gray level `label * (255 / max_label)`; `max_label`
    /// is the largest stored value, i.e. the label count.
    pub fn to_pgm(&self, max_label: u8) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        let scale = 255 / max_label.max(1) as u32;
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|&l| (l as u32 * scale).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Inverse of `to_pgm` for the same `max_label` and box.
    pub fn from_pgm(text: &str, max_label: u8, lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace())
            .map(str::to_owned);
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: msg.into(),
        };
        if tokens.next().as_deref() != Some("P2") {
            return Err(bad("expected P2 header"));
        }
        let mut num = || -> Result<u32> {
            tokens
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .parse()
                .map_err(|_| bad("bad number"))
        };
        let (w, h, _) = (num()? as usize, num()? as usize, num()?);
        let scale = 255 / max_label.max(1) as u32;
        let mut map = LabelMap::new(w, h, lo, hi);
        for px in map.labels.iter_mut() {
            *px = (num()? / scale) as u8;
        }
        Ok(map)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Rasterizes the labeling: barycentric interpolation of vertex indicators
/// (P1) or the simplex indicator (RT), then argmax. Pixels covered by several
/// simplices take the lowest simplex index.
pub fn rasterize_labels(problem: &Problem, state: &SolverState, grid: &LabelMap) -> Result<LabelMap> {
    if problem.dim() != 2 {
        return Err(Error::Unsupported("rasterization needs a 2D mesh".into()));
    }
    let m = problem.n_labels();
    let x = problem.indicators(state);
    let p1 = problem.flavor.is_p1();
    let mut out = grid.clone();
    out.labels.iter_mut().for_each(|l| *l = 0);
    let (mesh, geo) = (&problem.mesh, &problem.geo);
    let mut val = vec![0.0; m];
    let mut bary = [0.0; 3];
    for s in 0..mesh.n_simplices() {
        let Some((r0, r1, c0, c1)) = pixel_range(mesh, s, grid) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let idx = r * grid.width + c;
                if out.labels[idx] != 0 {
                    continue;
                }
                let p = grid.pixel_center(r, c);
                geo.barycentric_unchecked(mesh, s, &p, &mut bary);
                if bary.iter().any(|&a| a < -1e-12) {
                    continue;
                }
                let label = if p1 {
                    val.iter_mut().for_each(|v| *v = 0.0);
                    for (l, &v) in mesh.simplex(s).iter().enumerate() {
                        for i in 0..m {
                            val[i] += bary[l] * x[v * m + i];
                        }
                    }
                    argmax(&val)
                } else {
                    argmax(&x[s * m..(s + 1) * m])
                };
                out.labels[idx] = label as u8 + 1;
            }
        }
    }
    Ok(out)
}

fn pixel_range(mesh: &SimplexMesh, s: usize, grid: &LabelMap) -> Option<(usize, usize, usize, usize)> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &v in mesh.simplex(s) {
        let p = mesh.vertex(v);
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let sx = grid.width as f64 / (grid.hi[0] - grid.lo[0]);
    let sy = grid.height as f64 / (grid.hi[1] - grid.lo[1]);
    // column c has centre lo + (c + 0.5) / sx
    let c0 = ((lo[0] - grid.lo[0]) * sx - 0.5).ceil().max(0.0);
    let c1 = ((hi[0] - grid.lo[0]) * sx - 0.5).floor().min(grid.width as f64 - 1.0);
    let r0 = ((grid.hi[1] - hi[1]) * sy - 0.5).ceil().max(0.0);
    let r1 = ((grid.hi[1] - lo[1]) * sy - 0.5).floor().min(grid.height as f64 - 1.0);
    (c0 <= c1 && r0 <= r1).then_some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// Mean of per-class recall over classes present in the ground truth.
    pub average: f64,
    /// Recall per label (1-based label `i + 1`); `None` if absent from the truth.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]` pixel counts for 1-based labels shifted to 0.
    pub confusion: Vec<Vec<u64>>,
    pub pixels: u64,
}

/// Compares two maps over pixels that are labeled in both.
pub fn accuracy(pred: &LabelMap, gt: &LabelMap, n_labels: usize) -> Result<Accuracy> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::GridMismatch);
    }
    let mut confusion = vec![vec![0u64; n_labels]; n_labels];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p == 0 || g == 0 {
            continue;
        }
        let (p, g) = (p as usize - 1, g as usize - 1);
        if p >= n_labels || g >= n_labels {
            return Err(Error::InvalidParams(format!(
                "label {} exceeds {n_labels}",
                p.max(g) + 1
            )));
        }
        confusion[g][p] += 1;
    }
    let pixels: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..n_labels).map(|i| confusion[i][i]).sum();
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let average = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let overall = if pixels == 0 {
        0.0
    } else {
        correct as f64 / pixels as f64
    };
    Ok(Accuracy {
        overall,
        average,
        per_class,
        confusion,
        pixels,
    })
}

/// One piece of an iso-0.5 interface: a segment (2D) or triangle (3D)
/// referencing crossing points. Its orientation puts `label` on the left of
/// a segment, and makes triangle normals point away from `label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceElement {
    pub label: usize,
    /// Most likely label on the other side.
    pub other: usize,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Interfaces {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub elements: Vec<InterfaceElement>,
}

impl Interfaces {
    /// Points used by exactly one element of `label` (segment endpoints in
    /// 2D). Closed curves have none.
    pub fn open_ends(&self, label: usize) -> Vec<usize> {
        let mut count: HashMap<usize, usize> = HashMap::new();
        for e in self.elements.iter().filter(|e| e.label == label) {
            for &p in &e.points {
                *count.entry(p).or_default() += 1;
            }
        }
        let mut ends: Vec<usize> = count.into_iter().filter(|&(_, c)| c == 1).map(|(p, _)| p).collect();
        ends.sort_unstable();
        ends
    }
}

/// Per-label level sets `x^i = 0.5` of a vertex field with `m` values per
/// vertex, by marching triangles or tetrahedra with linear interpolation.
pub fn marching_interfaces(mesh: &SimplexMesh, x: &[f64], m: usize) -> Interfaces {
    let d = mesh.dim();
    let mut out = Interfaces {
        dim: d,
        ..Default::default()
    };
    let mut index: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let value = |v: usize, i: usize| {
        let a = x[v * m + i];
        if a == 0.5 {
            a + ISO_NUDGE
        } else {
            a
        }
    };
    for i in 0..m {
        for s in 0..mesh.n_simplices() {
            let verts = mesh.simplex(s);
            let inside: Vec<bool> = verts.iter().map(|&v| value(v, i) > 0.5).collect();
            let n_in = inside.iter().filter(|&&b| b).count();
            if n_in == 0 || n_in == d + 1 {
                continue;
            }
            let mut crossing = |a: usize, b: usize, out: &mut Interfaces| -> usize {
                let (a, b) = if a < b { (a, b) } else { (b, a) };
                *index.entry((i, a, b)).or_insert_with(|| {
                    let (fa, fb) = (value(a, i), value(b, i));
                    let t = (0.5 - fa) / (fb - fa);
                    let (pa, pb) = (mesh.vertex(a), mesh.vertex(b));
                    out.points.push((0..d).map(|c| pa[c] + t * (pb[c] - pa[c])).collect());
                    out.points.len() - 1
                })
            };
            let ins: Vec<usize> = (0..=d).filter(|&l| inside[l]).collect();
            let outs: Vec<usize> = (0..=d).filter(|&l| !inside[l]).collect();
            let other = other_label(x, m, i, outs.iter().map(|&l| verts[l]));
            let mut pts: Vec<Vec<usize>> = Vec::new();
            if d == 2 {
                let (a, b, c) = if n_in == 1 {
                    (ins[0], outs[0], outs[1])
                } else {
                    (outs[0], ins[0], ins[1])
                };
                pts.push(vec![
                    crossing(verts[a], verts[b], &mut out),
                    crossing(verts[a], verts[c], &mut out),
                ]);
            } else if n_in == 1 || n_in == 3 {
                let (a, rest) = if n_in == 1 {
                    (ins[0], outs.clone())
                } else {
                    (outs[0], ins.clone())
                };
                pts.push(rest.iter().map(|&r| crossing(verts[a], verts[r], &mut out)).collect());
            } else {
                let (a0, a1, b0, b1) = (verts[ins[0]], verts[ins[1]], verts[outs[0]], verts[outs[1]]);
                let q = [
                    crossing(a0, b0, &mut out),
                    crossing(a0, b1, &mut out),
                    crossing(a1, b1, &mut out),
                    crossing(a1, b0, &mut out),
                ];
                pts.push(vec![q[0], q[1], q[2]]);
                pts.push(vec![q[0], q[2], q[3]]);
            }
            let centroid_in = centroid(mesh, ins.iter().map(|&l| verts[l]));
            for mut p in pts {
                orient(&out.points, &mut p, &centroid_in, d);
                out.elements.push(InterfaceElement {
                    label: i,
                    other,
                    points: p,
                });
            }
        }
    }
    out
}

fn other_label(x: &[f64], m: usize, i: usize, verts: impl Iterator<Item = usize>) -> usize {
    let mut acc = vec![0.0; m];
    for v in verts {
        for j in 0..m {
            acc[j] += x[v * m + j];
        }
    }
    acc[i] = f64::NEG_INFINITY;
    argmax(&acc)
}

fn centroid(mesh: &SimplexMesh, verts: impl Iterator<Item = usize>) -> Vec<f64> {
    let d = mesh.dim();
    let mut c = vec![0.0; d];
    let mut n = 0.0;
    for v in verts {
        for k in 0..d {
            c[k] += mesh.vertex(v)[k];
        }
        n += 1.0;
    }
    c.iter().map(|x| x / n).collect()
}

/// Orders `p` so that the side containing `inner` is to the left (2D) or
/// behind the normal (3D).
fn orient(points: &[Vec<f64>], p: &mut [usize], inner: &[f64], d: usize) {
    let a = &points[p[0]];
    let b = &points[p[1]];
    let side = if d == 2 {
        (b[0] - a[0]) * (inner[1] - a[1]) - (b[1] - a[1]) * (inner[0] - a[0])
    } else {
        let c = &points[p[2]];
        let u: Vec<f64> = (0..3).map(|k| b[k] - a[k]).collect();
        let v: Vec<f64> = (0..3).map(|k| c[k] - a[k]).collect();
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        -(0..3).map(|k| n[k] * (inner[k] - a[k])).sum::<f64>()
    };
    if side < 0.0 {
        p.swap(0, 1);
    }
}

/// Interface polylines as SVG in a `size`-pixel square (y axis up).
pub fn interfaces_to_svg(ifs: &Interfaces, lo: [f64; 2], hi: [f64; 2], size: f64) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let sx = size / (hi[0] - lo[0]);
    let sy = size / (hi[1] - lo[1]);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    for e in &ifs.elements {
        let a = &ifs.points[e.points[0]];
        let b = &ifs.points[e.points[1]];
        let _ = writeln!(
            out,
            "<line x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"{}\" stroke-width=\"1\"/>",
            (a[0] - lo[0]) * sx,
            (hi[1] - a[1]) * sy,
            (b[0] - lo[0]) * sx,
            (hi[1] - b[1]) * sy,
            COLORS[e.label % COLORS.len()]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Interface triangles of a 3D extraction as an OFF surface.
pub fn interfaces_to_off(ifs: &Interfaces) -> Result<String> {
    if ifs.dim != 3 {
        return Err(Error::Unsupported("OFF export needs 3D interfaces".into()));
    }
    let mut out = format!("OFF\n{} {} 0\n", ifs.points.len(), ifs.elements.len());
    for p in &ifs.points {
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    for e in &ifs.elements {
        let _ = writeln!(out, "3 {} {} {}", e.points[0], e.points[1], e.points[2]);
    }
    Ok(out)
}

/// Simplices whose vertex argmax labels differ (P1), or whose label differs
/// from a face neighbour's (RT).
pub fn transition_simplices(problem: &Problem, state: &SolverState) -> Vec<usize> {
    let m = problem.n_labels();
    let x = problem.indicators(state);
    let mesh = &problem.mesh;
    let label = |e: usize| argmax(&x[e * m..(e + 1) * m]);
    (0..mesh.n_simplices())
        .filter(|&s| {
            if problem.flavor.is_p1() {
                let verts = mesh.simplex(s);
                verts.iter().any(|&v| label(v) != label(verts[0]))
            } else {
                (0..=mesh.dim()).any(|l| {
                    let f = mesh.simplex_face(s, l);
                    mesh.neighbor_across(s, f).is_some_and(|t| label(t) != label(s))
                })
            }
        })
        .collect()
}

/// Raster of a mesh field used only by tests and reports: `true` where the
/// pixel centre is covered by some simplex.
pub fn coverage(mesh: &SimplexMesh, geo: &GeometryCache, grid: &LabelMap) -> Vec<bool> {
    let mut cov = vec![false; grid.labels.len()];
    let mut bary = [0.0; 3];
    for s in 0..mesh.n_simplices() {
        let Some((r0, r1, c0, c1)) = pixel_range(mesh, s, grid) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                geo.barycentric_unchecked(mesh, s, &grid.pixel_center(r, c), &mut bary);
                if bary.iter().all(|&a| a >= -1e-12) {
                    cov[r * grid.width + c] = true;
                }
            }
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_mesh_2d;

    #[test]
    fn single_triangle_crossing_hits_edge_midpoints() {
        let mesh = SimplexMesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 1, 2]).unwrap();
        let x = [0.0, 1.0, 1.0];
        let ifs = marching_interfaces(&mesh, &x, 1);
        assert_eq!(ifs.elements.len(), 1);
        let mut pts: Vec<Vec<f64>> = ifs.elements[0].points.iter().map(|&p| ifs.points[p].clone()).collect();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(pts, vec![vec![0.0, 0.5], vec![0.5, 0.0]]);
    }

    #[test]
    fn accuracy_with_one_flipped_class() {
        let gt = LabelMap::from_fn(4, 4, [0.0, 0.0], [1.0, 1.0], |p| 1 + (p[0] * 4.0) as u8);
        let mut pred = gt.clone();
        pred.labels.iter_mut().filter(|l| **l == 2).for_each(|l| *l = 3);
        let a = accuracy(&pred, &gt, 4).unwrap();
        assert_eq!((a.overall, a.average), (0.75, 0.75));
    }

    #[test]
    fn pgm_round_trip() {
        let gt = LabelMap::from_fn(5, 3, [0.0, 0.0], [1.0, 1.0], |p| 1 + (p[0] * 4.0) as u8);
        let back = LabelMap::from_pgm(&gt.to_pgm(4), 4, [0.0, 0.0], [1.0, 1.0]).unwrap();
        assert_eq!(back, gt);
    }

    #[test]
    fn coverage_of_grid_mesh_is_total() {
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 3, 3).unwrap();
        let geo = GeometryCache::new(&mesh).unwrap();
        let grid = LabelMap::new(16, 16, [0.0, 0.0], [1.0, 1.0]);
        assert!(coverage(&mesh, &geo, &grid).iter().all(|&c| c));
    }
}
