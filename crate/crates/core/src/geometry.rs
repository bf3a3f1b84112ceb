//! Per-simplex geometric quantities derived once from a mesh.

use crate::error::{Error, Result};
use crate::linalg;
use crate::mesh::{SimplexMesh, VOLUME_FLOOR};

/// Slack allowed on barycentric coordinates when testing containment.
pub const BARY_TOL: f64 = 1e-9;

/// Tolerance under which a normal is considered orthogonal to the all-ones vector.
const SIGN_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GeometryCache {
    dim: usize,
    volumes: Vec<f64>,
    /// Gradients of the barycentric coordinates, `(dim + 1) * dim` per simplex.
    grads: Vec<f64>,
    face_areas: Vec<f64>,
    face_normals: Vec<f64>,
    face_midpoints: Vec<f64>,
    signs: Vec<f64>,
}

/// Orients a unit normal so that it has a positive component along the
/// all-ones vector; ties go to the first nonzero component.
fn canonical_orientation(n: &mut [f64]) {
    let s: f64 = n.iter().sum();
    let flip = if s.abs() > SIGN_TIE_TOL {
        s < 0.0
    } else {
        n.iter().find(|c| c.abs() > SIGN_TIE_TOL).is_some_and(|&c| c < 0.0)
    };
    if flip {
        n.iter_mut().for_each(|c| *c = -*c);
    }
}

/// Barycentric-coordinate gradients `J_l` of a simplex given its vertices.
/// Returns the gradients (row `l` is `J_l`) and the signed volume.
pub fn simplex_gradients(dim: usize, pts: &[&[f64]]) -> Option<(Vec<f64>, f64)> {
    let mut e = vec![0.0; dim * dim];
    for c in 0..dim {
        for r in 0..dim {
            // column c holds v_{c+1} - v_0
            e[r * dim + c] = pts[c + 1][r] - pts[0][r];
        }
    }
    let vol = linalg::det(&e, dim) / linalg::factorial(dim);
    let inv = linalg::inverse(&e, dim)?;
    let mut g = vec![0.0; (dim + 1) * dim];
    for l in 1..=dim {
        for c in 0..dim {
            g[l * dim + c] = inv[(l - 1) * dim + c];
            g[c] -= inv[(l - 1) * dim + c];
        }
    }
    Some((g, vol))
}

impl GeometryCache {
    pub fn new(mesh: &SimplexMesh) -> Result<Self> {
        let d = mesh.dim();
        let k = d + 1;
        let ns = mesh.n_simplices();
        let mut volumes = Vec::with_capacity(ns);
        let mut grads = Vec::with_capacity(ns * k * d);
        for s in 0..ns {
            let pts: Vec<&[f64]> = mesh.simplex(s).iter().map(|&v| mesh.vertex(v)).collect();
            let (g, vol) = simplex_gradients(d, &pts).ok_or(Error::DegenerateSimplex(s))?;
            if vol <= VOLUME_FLOOR {
                return Err(Error::DegenerateSimplex(s));
            }
            volumes.push(vol);
            grads.extend_from_slice(&g);
        }
        let nf = mesh.n_faces();
        let mut face_areas = vec![0.0; nf];
        let mut face_normals = vec![0.0; nf * d];
        let mut face_midpoints = vec![0.0; nf * d];
        for f in 0..nf {
            let (s, _) = mesh.face_simplices(f);
            let l = (0..k)
                .find(|&l| mesh.simplex_face(s, l) == f)
                .expect("face belongs to simplex");
            let j = &grads[(s * k + l) * d..(s * k + l + 1) * d];
            let jn = linalg::norm(j);
            face_areas[f] = jn * volumes[s] * d as f64;
            let n = &mut face_normals[f * d..(f + 1) * d];
            for c in 0..d {
                n[c] = -j[c] / jn;
            }
            canonical_orientation(n);
            let mid = &mut face_midpoints[f * d..(f + 1) * d];
            for &v in mesh.face(f) {
                for c in 0..d {
                    mid[c] += mesh.vertex(v)[c] / d as f64;
                }
            }
        }
        let mut signs = vec![0.0; ns * k];
        for s in 0..ns {
            for l in 0..k {
                let f = mesh.simplex_face(s, l);
                let j = &grads[(s * k + l) * d..(s * k + l + 1) * d];
                // outward normal is -J_l
                let dp = -linalg::dot(j, &face_normals[f * d..(f + 1) * d]);
                signs[s * k + l] = if dp > 0.0 { 1.0 } else { -1.0 };
            }
        }
        Ok(GeometryCache {
            dim: d,
            volumes,
            grads,
            face_areas,
            face_normals,
            face_midpoints,
            signs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn volume(&self, s: usize) -> f64 {
        self.volumes[s]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// `J_l` for local vertex `l` of simplex `s`: inward normal of the
    /// opposite face scaled by `|f_l| / (|s| d)`.
    pub fn grad(&self, s: usize, l: usize) -> &[f64] {
        let d = self.dim;
        let o = (s * (d + 1) + l) * d;
        &self.grads[o..o + d]
    }

    pub fn grads(&self, s: usize) -> &[f64] {
        let n = (self.dim + 1) * self.dim;
        &self.grads[s * n..(s + 1) * n]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        self.face_areas[f]
    }

    /// Unit face normal with the global orientation used for sign conventions.
    pub fn face_normal(&self, f: usize) -> &[f64] {
        &self.face_normals[f * self.dim..(f + 1) * self.dim]
    }

    pub fn face_midpoint(&self, f: usize) -> &[f64] {
        &self.face_midpoints[f * self.dim..(f + 1) * self.dim]
    }

    /// Orientation sign `si(f_l, s)`: the sign of the outward normal of `s`
    /// on its face opposite `l` along the all-ones vector.
    pub fn sign(&self, s: usize, l: usize) -> f64 {
        self.signs[s * (self.dim + 1) + l]
    }

    /// Outward unit normal of `s` on the face opposite local vertex `l`.
    pub fn outward_normal(&self, s: usize, l: usize) -> Vec<f64> {
        let j = self.grad(s, l);
        let n = linalg::norm(j);
        j.iter().map(|c| -c / n).collect()
    }

    /// Lumped vertex volume `sum_{s in N(v)} |s| / d`.
    pub fn lumped_volume(&self, mesh: &SimplexMesh, v: usize) -> f64 {
        mesh.vertex_star(v).iter().map(|&s| self.volumes[s]).sum::<f64>() / self.dim as f64
    }

    /// Barycentric coordinates of `p` in `s` without a containment check.
    pub fn barycentric_unchecked(&self, mesh: &SimplexMesh, s: usize, p: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let v0 = mesh.vertex(mesh.simplex(s)[0]);
        let mut rest = 1.0;
        for l in 1..=d {
            let j = self.grad(s, l);
            let a: f64 = (0..d).map(|c| j[c] * (p[c] - v0[c])).sum();
            out[l] = a;
            rest -= a;
        }
        out[0] = rest;
    }

    /// Barycentric coordinates of `p` in `s`; fails when `p` is outside by
    /// more than `BARY_TOL`.
    pub fn barycentric_coords(&self, mesh: &SimplexMesh, s: usize, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: p.len(),
            });
        }
        let mut a = vec![0.0; self.dim + 1];
        self.barycentric_unchecked(mesh, s, p, &mut a);
        if a.iter().any(|&x| x < -BARY_TOL) {
            return Err(Error::OutsideSimplex(s));
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_triangle_gradients() {
        let m = SimplexMesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 1, 2]).unwrap();
        let g = GeometryCache::new(&m).unwrap();
        assert_eq!(g.volume(0), 0.5);
        assert_eq!(g.grad(0, 0), &[-1.0, -1.0]);
        assert_eq!(g.grad(0, 1), &[1.0, 0.0]);
        assert_eq!(g.grad(0, 2), &[0.0, 1.0]);
    }

    #[test]
    fn face_area_matches_edge_length() {
        let m = SimplexMesh::new(2, vec![0.0, 0.0, 2.0, 0.0, 0.5, 1.5], vec![0, 1, 2]).unwrap();
        let g = GeometryCache::new(&m).unwrap();
        for l in 0..3 {
            let f = m.simplex_face(0, l);
            let fv = m.face(f);
            let (a, b) = (m.vertex(fv[0]), m.vertex(fv[1]));
            let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((g.face_area(f) - len).abs() < 1e-14);
        }
    }

    #[test]
    fn shared_face_normals_agree_after_sign() {
        let m = crate::mesh::grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        let g = GeometryCache::new(&m).unwrap();
        for f in 0..m.n_faces() {
            if let (a, Some(b)) = m.face_simplices(f) {
                let la = (0..3).find(|&l| m.simplex_face(a, l) == f).unwrap();
                let lb = (0..3).find(|&l| m.simplex_face(b, l) == f).unwrap();
                let na = g.outward_normal(a, la);
                let nb = g.outward_normal(b, lb);
                for c in 0..2 {
                    let x = g.sign(a, la) * na[c];
                    let y = g.sign(b, lb) * nb[c];
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }
}
