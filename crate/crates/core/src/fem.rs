//! Lagrange P1 and lowest-order Raviart-Thomas elements.

use crate::error::{Error, Result};
use crate::geometry::GeometryCache;
use crate::mesh::SimplexMesh;

/// Gradient of the P1 interpolant of vertex values `phi` on simplex `s`.
pub fn p1_gradient(mesh: &SimplexMesh, geo: &GeometryCache, s: usize, phi: &[f64]) -> Vec<f64> {
    let d = mesh.dim();
    let mut g = vec![0.0; d];
    for (l, &v) in mesh.simplex(s).iter().enumerate() {
        let j = geo.grad(s, l);
        for c in 0..d {
            g[c] += phi[v] * j[c];
        }
    }
    g
}

/// Value of the P1 interpolant at `p`, which must lie in simplex `s`.
pub fn p1_evaluate(mesh: &SimplexMesh, geo: &GeometryCache, s: usize, phi: &[f64], p: &[f64]) -> Result<f64> {
    let a = geo.barycentric_coords(mesh, s, p)?;
    Ok(mesh.simplex(s).iter().zip(&a).map(|(&v, w)| w * phi[v]).sum())
}

/// Componentwise split `J = J+ - J-` of the barycentric gradients of a simplex.
/// Returns `([J_l]_+, [-J_l]_+)` laid out like `GeometryCache::grads`.
pub fn gradient_split(grads: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pos = grads.iter().map(|&g| g.max(0.0)).collect();
    let neg = grads.iter().map(|&g| (-g).max(0.0)).collect();
    (pos, neg)
}

/// Regular lattice with unit spacing and row-major storage (first axis fastest).
#[derive(Debug, Clone)]
pub struct Lattice {
    pub dims: Vec<usize>,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: &[usize]) -> usize {
        x.iter().zip(&self.dims).rev().fold(0, |acc, (&xi, &n)| acc * n + xi)
    }
}

/// Forward differences `f(x + e_i) - f(x)` at lattice point `x`.
pub fn forward_difference_gradient(lat: &Lattice, f: &[f64], x: &[usize]) -> Result<Vec<f64>> {
    if x.len() != lat.dims.len() {
        return Err(Error::DimensionMismatch {
            expected: lat.dims.len(),
            got: x.len(),
        });
    }
    let base = lat.index(x);
    (0..x.len())
        .map(|i| {
            if x[i] + 1 >= lat.dims[i] {
                return Err(Error::InvalidParams(format!("point at upper boundary of axis {i}")));
            }
            let mut y = x.to_vec();
            y[i] += 1;
            Ok(f[lat.index(&y)] - f[base])
        })
        .collect()
}

/// Lowest-order Raviart-Thomas basis function of face `f_l` in simplex `s`,
/// evaluated at `p`: `si(f_l, s) (p - v_l) |f_l| / (|s| d)`.
pub fn rt_basis_eval(mesh: &SimplexMesh, geo: &GeometryCache, s: usize, l: usize, p: &[f64]) -> Vec<f64> {
    let d = mesh.dim();
    let v = mesh.vertex(mesh.simplex(s)[l]);
    let f = mesh.simplex_face(s, l);
    let scale = geo.sign(s, l) * geo.face_area(f) / (geo.volume(s) * d as f64);
    (0..d).map(|c| scale * (p[c] - v[c])).collect()
}

/// Field with face coefficients `coeff` (one per mesh face) evaluated at `p`
/// in simplex `s`. Boundary coefficients are taken as zero.
pub fn rt_field_eval(mesh: &SimplexMesh, geo: &GeometryCache, s: usize, coeff: &[f64], p: &[f64]) -> Vec<f64> {
    let d = mesh.dim();
    let mut out = vec![0.0; d];
    for l in 0..=d {
        let f = mesh.simplex_face(s, l);
        if mesh.is_boundary_face(f) || coeff[f] == 0.0 {
            continue;
        }
        let b = rt_basis_eval(mesh, geo, s, l, p);
        for c in 0..d {
            out[c] += coeff[f] * b[c];
        }
    }
    out
}

/// Field values at the `d + 1` face midpoints of `s`, ordered by local vertex.
pub fn rt_midpoint_values(mesh: &SimplexMesh, geo: &GeometryCache, s: usize, coeff: &[f64]) -> Vec<Vec<f64>> {
    (0..=mesh.dim())
        .map(|l| {
            let z = geo.face_midpoint(mesh.simplex_face(s, l));
            rt_field_eval(mesh, geo, s, coeff, z)
        })
        .collect()
}

/// `sum_s sum_l x_s coeff_{f_l} |f_l| si(f_l, s)` with boundary coefficients
/// pinned to zero; equals `sum_s x_s * integral_s div(field)`.
pub fn rt_divergence_pairing(mesh: &SimplexMesh, geo: &GeometryCache, x: &[f64], coeff: &[f64]) -> f64 {
    let mut total = 0.0;
    for s in 0..mesh.n_simplices() {
        for l in 0..=mesh.dim() {
            let f = mesh.simplex_face(s, l);
            if !mesh.is_boundary_face(f) {
                total += x[s] * coeff[f] * geo.face_area(f) * geo.sign(s, l);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_mesh_2d;

    #[test]
    fn rt_normal_component_is_coefficient() {
        let m = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        let g = GeometryCache::new(&m).unwrap();
        let coeff: Vec<f64> = (0..m.n_faces()).map(|f| 0.3 + f as f64 * 0.1).collect();
        for f in 0..m.n_faces() {
            let (a, b) = m.face_simplices(f);
            let n = g.face_normal(f);
            let z = g.face_midpoint(f);
            let va = rt_field_eval(&m, &g, a, &coeff, z);
            let na: f64 = va.iter().zip(n).map(|(x, y)| x * y).sum();
            if let Some(b) = b {
                let vb = rt_field_eval(&m, &g, b, &coeff, z);
                let nb: f64 = vb.iter().zip(n).map(|(x, y)| x * y).sum();
                assert!((na - coeff[f]).abs() < 1e-13);
                assert!((nb - coeff[f]).abs() < 1e-13);
            } else {
                assert!(na.abs() < 1e-13);
            }
        }
    }
}
