//! Incremental Bowyer-Watson triangulation of planar point sets.

use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

use crate::error::{Error, Result};
use crate::mesh::SimplexMesh;

const NONE: usize = usize::MAX;

fn c(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Removes points closer than `min_spacing` to an already kept point.
/// Earlier points win.
pub fn dedup_points(points: &[[f64; 2]], min_spacing: f64) -> Vec<[f64; 2]> {
    if min_spacing <= 0.0 {
        let mut seen = std::collections::HashSet::new();
        return points
            .iter()
            .copied()
            .filter(|p| seen.insert((p[0].to_bits(), p[1].to_bits())))
            .collect();
    }
    let cell = |p: [f64; 2]| ((p[0] / min_spacing).floor() as i64, (p[1] / min_spacing).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<[f64; 2]> = Vec::new();
    let r2 = min_spacing * min_spacing;
    for &p in points {
        let (cx, cy) = cell(p);
        let close = (-1..=1).any(|dx| {
            (-1..=1).any(|dy| {
                grid.get(&(cx + dx, cy + dy)).is_some_and(|ids| {
                    ids.iter().any(|&i| {
                        let q = kept[i];
                        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) < r2
                    })
                })
            })
        });
        if !close {
            grid.entry((cx, cy)).or_default().push(kept.len());
            kept.push(p);
        }
    }
    kept
}

struct Triangulation {
    pts: Vec<[f64; 2]>,
    tri: Vec<[usize; 3]>,
    /// `nbr[t][k]` is the triangle across the edge opposite vertex `k`.
    nbr: Vec<[usize; 3]>,
    alive: Vec<bool>,
    mark: Vec<bool>,
    last: usize,
}

impl Triangulation {
    fn locate(&self, p: [f64; 2]) -> usize {
        let mut t = self.last;
        let mut steps = 0usize;
        'walk: loop {
            steps += 1;
            if steps > 4 * self.tri.len() + 16 {
                break;
            }
            let v = self.tri[t];
            // rotate the starting edge to avoid cycling on degenerate walks
            for r in 0..3 {
                let k = (r + steps) % 3;
                let a = self.pts[v[(k + 1) % 3]];
                let b = self.pts[v[(k + 2) % 3]];
                if orient2d(c(a), c(b), c(p)) < 0.0 {
                    let n = self.nbr[t][k];
                    if n != NONE {
                        t = n;
                        continue 'walk;
                    }
                }
            }
            return t;
        }
        // fallback: exhaustive search
        (0..self.tri.len())
            .find(|&t| {
                self.alive[t] && {
                    let v = self.tri[t];
                    (0..3).all(|k| orient2d(c(self.pts[v[(k + 1) % 3]]), c(self.pts[v[(k + 2) % 3]]), c(p)) >= 0.0)
                }
            })
            .unwrap_or(self.last)
    }

    fn in_circle(&self, t: usize, p: [f64; 2]) -> bool {
        let v = self.tri[t];
        incircle(c(self.pts[v[0]]), c(self.pts[v[1]]), c(self.pts[v[2]]), c(p)) > 0.0
    }

    fn insert(&mut self, pi: usize) {
        let p = self.pts[pi];
        let t0 = self.locate(p);
        let mut bad = vec![t0];
        self.mark[t0] = true;
        let mut stack = vec![t0];
        while let Some(t) = stack.pop() {
            for k in 0..3 {
                let n = self.nbr[t][k];
                if n != NONE && !self.mark[n] && self.in_circle(n, p) {
                    self.mark[n] = true;
                    bad.push(n);
                    stack.push(n);
                }
            }
        }
        let mut boundary = Vec::new();
        for &t in &bad {
            for k in 0..3 {
                let n = self.nbr[t][k];
                if n == NONE || !self.mark[n] {
                    boundary.push((self.tri[t][(k + 1) % 3], self.tri[t][(k + 2) % 3], n, t));
                }
            }
        }
        let mut by_start: HashMap<usize, usize> = HashMap::with_capacity(boundary.len());
        let mut by_end: HashMap<usize, usize> = HashMap::with_capacity(boundary.len());
        let first = self.tri.len();
        for (i, &(a, b, outer, old)) in boundary.iter().enumerate() {
            let id = first + i;
            self.tri.push([a, b, pi]);
            self.nbr.push([NONE, NONE, outer]);
            self.alive.push(true);
            self.mark.push(false);
            if outer != NONE {
                for k in 0..3 {
                    if self.nbr[outer][k] == old {
                        self.nbr[outer][k] = id;
                    }
                }
            }
            by_start.insert(a, id);
            by_end.insert(b, id);
        }
        for i in 0..boundary.len() {
            let id = first + i;
            let [a, b, _] = self.tri[id];
            self.nbr[id][0] = by_start[&b];
            self.nbr[id][1] = by_end[&a];
        }
        for &t in &bad {
            self.alive[t] = false;
            self.mark[t] = false;
        }
        self.last = first;
    }
}

/// Delaunay triangulation of `points` after removing near-duplicates closer
/// than `min_spacing`.
pub fn build_delaunay_2d(points: &[[f64; 2]], min_spacing: f64) -> Result<SimplexMesh> {
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidParams("non-finite point".into()));
    }
    let pts = dedup_points(points, min_spacing);
    if pts.len() < 3 {
        return Err(Error::InvalidMesh("fewer than three distinct points".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let ext = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let r = 1e5 * ext;
    let n = pts.len();

    // coherent insertion order: snake through a coarse grid of cells
    let g = ((n as f64).sqrt() / 2.0).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let key = |p: [f64; 2]| {
        let ix = (((p[0] - lo[0]) / ext * g as f64) as usize).min(g - 1);
        let iy = (((p[1] - lo[1]) / ext * g as f64) as usize).min(g - 1);
        let ix = if iy.is_multiple_of(2) { ix } else { g - 1 - ix };
        iy * g + ix
    };
    order.sort_by_key(|&i| key(pts[i]));

    let mut all = pts.clone();
    all.push([mid[0] - r, mid[1] - r]);
    all.push([mid[0] + r, mid[1] - r]);
    all.push([mid[0], mid[1] + r]);
    let mut tr = Triangulation {
        pts: all,
        tri: vec![[n, n + 1, n + 2]],
        nbr: vec![[NONE; 3]],
        alive: vec![true],
        mark: vec![false],
        last: 0,
    };
    for &i in &order {
        tr.insert(i);
    }
    let mut simplices = Vec::new();
    for (t, v) in tr.tri.iter().enumerate() {
        if tr.alive[t] && v.iter().all(|&i| i < n) {
            simplices.extend_from_slice(v);
        }
    }
    let coords = pts.iter().flat_map(|p| [p[0], p[1]]).collect();
    SimplexMesh::new(2, coords, simplices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryCache;

    #[test]
    fn grid_points_cover_square() {
        let mut pts = Vec::new();
        for i in 0..=10 {
            for j in 0..=10 {
                pts.push([i as f64 / 10.0, j as f64 / 10.0]);
            }
        }
        let m = build_delaunay_2d(&pts, 0.0).unwrap();
        let g = GeometryCache::new(&m).unwrap();
        let area: f64 = g.volumes().iter().sum();
        assert!((area - 1.0).abs() < 1e-12, "area {area}");
        assert_eq!(m.n_simplices(), 200);
    }

    #[test]
    fn dedup_respects_spacing() {
        let pts = [[0.0, 0.0], [0.001, 0.0], [0.5, 0.5], [0.5004, 0.5]];
        assert_eq!(dedup_points(&pts, 0.01).len(), 2);
    }
}
