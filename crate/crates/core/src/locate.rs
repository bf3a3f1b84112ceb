//! Point location through a uniform bucket grid over simplex bounding boxes.

use crate::geometry::{GeometryCache, BARY_TOL};
use crate::mesh::SimplexMesh;

pub struct PointLocator {
    dim: usize,
    lo: Vec<f64>,
    cell: Vec<f64>,
    n: Vec<usize>,
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl PointLocator {
    pub fn new(mesh: &SimplexMesh) -> Self {
        let d = mesh.dim();
        let (lo, hi) = mesh.bounding_box();
        let ns = mesh.n_simplices().max(1);
        let per_axis = ((ns as f64).powf(1.0 / d as f64)).ceil().max(1.0) as usize;
        let n = vec![per_axis; d];
        let cell: Vec<f64> = (0..d).map(|i| ((hi[i] - lo[i]) / per_axis as f64).max(1e-12)).collect();
        let idx = |p: f64, i: usize| (((p - lo[i]) / cell[i]).floor().max(0.0) as usize).min(per_axis - 1);
        let total: usize = n.iter().product();
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); total];
        for s in 0..mesh.n_simplices() {
            let mut blo = vec![usize::MAX; d];
            let mut bhi = vec![0; d];
            for &v in mesh.simplex(s) {
                let p = mesh.vertex(v);
                for i in 0..d {
                    let k = idx(p[i], i);
                    blo[i] = blo[i].min(k);
                    bhi[i] = bhi[i].max(k);
                }
            }
            let mut c = blo.clone();
            loop {
                let flat = c.iter().rev().fold(0, |acc, &k| acc * per_axis + k);
                buckets[flat].push(s);
                let mut i = 0;
                loop {
                    if i == d {
                        break;
                    }
                    if c[i] < bhi[i] {
                        c[i] += 1;
                        break;
                    }
                    c[i] = blo[i];
                    i += 1;
                }
                if i == d {
                    break;
                }
            }
        }
        let mut offsets = Vec::with_capacity(total + 1);
        let mut items = Vec::new();
        offsets.push(0);
        for b in buckets {
            items.extend(b);
            offsets.push(items.len());
        }
        PointLocator {
            dim: d,
            lo,
            cell,
            n,
            offsets,
            items,
        }
    }

    fn bucket(&self, p: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for i in (0..self.dim).rev() {
            let t = (p[i] - self.lo[i]) / self.cell[i];
            let nmax = self.n[i] as f64;
            if t < -1e-9 || t > nmax + 1e-9 {
                return None;
            }
            let k = (t.floor().max(0.0) as usize).min(self.n[i] - 1);
            flat = flat * self.n[i] + k;
        }
        Some(flat)
    }

    /// Finds a simplex containing `p` and writes its barycentric coordinates
    /// into `bary`. Points on shared faces resolve to the first candidate.
    pub fn locate(&self, mesh: &SimplexMesh, geo: &GeometryCache, p: &[f64], bary: &mut [f64]) -> Option<usize> {
        let b = self.bucket(p)?;
        let mut best = None;
        let mut best_min = f64::NEG_INFINITY;
        for &s in &self.items[self.offsets[b]..self.offsets[b + 1]] {
            geo.barycentric_unchecked(mesh, s, p, bary);
            let m = bary[..=self.dim].iter().copied().fold(f64::INFINITY, f64::min);
            if m >= 0.0 {
                return Some(s);
            }
            if m > best_min {
                best_min = m;
                best = Some(s);
            }
        }
        let s = best?;
        if best_min >= -BARY_TOL {
            geo.barycentric_unchecked(mesh, s, p, bary);
            Some(s)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_mesh_2d;

    #[test]
    fn locates_interior_and_rejects_outside() {
        let m = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 4, 4).unwrap();
        let g = GeometryCache::new(&m).unwrap();
        let loc = PointLocator::new(&m);
        let mut b = [0.0; 4];
        let s = loc.locate(&m, &g, &[0.3, 0.71], &mut b).unwrap();
        assert!(b[..3].iter().all(|&x| x >= 0.0));
        let recon: Vec<f64> = (0..2)
            .map(|c| (0..3).map(|l| b[l] * m.vertex(m.simplex(s)[l])[c]).sum())
            .collect();
        assert!((recon[0] - 0.3).abs() < 1e-14 && (recon[1] - 0.71).abs() < 1e-14);
        assert!(loc.locate(&m, &g, &[1.2, 0.5], &mut b).is_none());
    }
}
