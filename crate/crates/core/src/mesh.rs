//! Simplicial meshes in two and three dimensions.
//!
//! Simplices are stored positively oriented. Faces are shared between at most
//! two simplices; the face opposite local vertex `l` of simplex `s` is
//! `simplex_face(s, l)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Volumes at or below this value are treated as degenerate.
pub const VOLUME_FLOOR: f64 = 1e-12;

pub const NO_SIMPLEX: usize = usize::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexMesh {
    dim: usize,
    coords: Vec<f64>,
    simplices: Vec<usize>,
    #[serde(skip)]
    topo: Topology,
}

#[derive(Debug, Clone, Default)]
struct Topology {
    /// Sorted vertex ids, `dim` per face.
    faces: Vec<usize>,
    /// Adjacent simplices per face; the second entry is `NO_SIMPLEX` on the boundary.
    face_simplices: Vec<[usize; 2]>,
    /// Face opposite each local vertex, `dim + 1` per simplex.
    simplex_faces: Vec<usize>,
    vertex_offsets: Vec<usize>,
    vertex_simplices: Vec<usize>,
}

fn face_key(verts: &[usize]) -> [usize; 3] {
    let mut k = [usize::MAX; 3];
    k[..verts.len()].copy_from_slice(verts);
    k[..verts.len()].sort_unstable();
    k
}

pub(crate) fn signed_volume(dim: usize, pts: &[&[f64]]) -> f64 {
    let mut e = [0.0; 9];
    for r in 0..dim {
        for c in 0..dim {
            e[r * dim + c] = pts[r + 1][c] - pts[0][c];
        }
    }
    linalg::det(&e[..dim * dim], dim) / linalg::factorial(dim)
}

impl SimplexMesh {
    /// Builds a mesh from flat coordinates (`dim` per vertex) and simplices
    /// (`dim + 1` vertex ids each). Negatively oriented simplices are flipped.
    pub fn new(dim: usize, coords: Vec<f64>, mut simplices: Vec<usize>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Unsupported(format!("mesh dimension {dim}")));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::InvalidMesh("coordinate count not a multiple of dim".into()));
        }
        let k = dim + 1;
        if !simplices.len().is_multiple_of(k) {
            return Err(Error::InvalidMesh("simplex index count not a multiple of dim+1".into()));
        }
        let nv = coords.len() / dim;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMesh("non-finite coordinate".into()));
        }
        for (s, sim) in simplices.chunks_mut(k).enumerate() {
            if sim.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh(format!("simplex {s} references a missing vertex")));
            }
            let pts: Vec<&[f64]> = sim.iter().map(|&v| &coords[v * dim..(v + 1) * dim]).collect();
            let vol = signed_volume(dim, &pts);
            if vol.abs() <= VOLUME_FLOOR {
                return Err(Error::DegenerateSimplex(s));
            }
            if vol < 0.0 {
                sim.swap(0, 1);
            }
        }
        let mut mesh = SimplexMesh {
            dim,
            coords,
            simplices,
            topo: Topology::default(),
        };
        mesh.build_topology()?;
        Ok(mesh)
    }

    fn build_topology(&mut self) -> Result<()> {
        let dim = self.dim;
        let k = dim + 1;
        let ns = self.n_simplices();
        let nv = self.n_vertices();
        let mut index: HashMap<[usize; 3], usize> = HashMap::with_capacity(ns * k);
        let mut faces = Vec::new();
        let mut face_simplices: Vec<[usize; 2]> = Vec::new();
        let mut simplex_faces = vec![0; ns * k];
        let mut fv = Vec::with_capacity(dim);
        for s in 0..ns {
            for l in 0..k {
                fv.clear();
                fv.extend((0..k).filter(|&j| j != l).map(|j| self.simplices[s * k + j]));
                let key = face_key(&fv);
                let f = *index.entry(key).or_insert_with(|| {
                    faces.extend_from_slice(&key[..dim]);
                    face_simplices.push([NO_SIMPLEX, NO_SIMPLEX]);
                    face_simplices.len() - 1
                });
                let slot = &mut face_simplices[f];
                if slot[0] == NO_SIMPLEX {
                    slot[0] = s;
                } else if slot[1] == NO_SIMPLEX {
                    slot[1] = s;
                } else {
                    return Err(Error::InvalidMesh(format!(
                        "face {f} is shared by more than two simplices"
                    )));
                }
                simplex_faces[s * k + l] = f;
            }
        }
        let mut counts = vec![0usize; nv + 1];
        for &v in &self.simplices {
            counts[v + 1] += 1;
        }
        for i in 0..nv {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut vs = vec![0; self.simplices.len()];
        for s in 0..ns {
            for &v in &self.simplices[s * k..(s + 1) * k] {
                vs[fill[v]] = s;
                fill[v] += 1;
            }
        }
        self.topo = Topology {
            faces,
            face_simplices,
            simplex_faces,
            vertex_offsets: counts,
            vertex_simplices: vs,
        };
        Ok(())
    }

    /// Restores derived connectivity after deserialization.
    pub fn rebuild(self) -> Result<Self> {
        SimplexMesh::new(self.dim, self.coords, self.simplices)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_simplices(&self) -> usize {
        self.simplices.len() / (self.dim + 1)
    }

    pub fn n_faces(&self) -> usize {
        self.topo.face_simplices.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn simplex_indices(&self) -> &[usize] {
        &self.simplices
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.coords[v * self.dim..(v + 1) * self.dim]
    }

    pub fn simplex(&self, s: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.simplices[s * k..(s + 1) * k]
    }

    pub fn face(&self, f: usize) -> &[usize] {
        &self.topo.faces[f * self.dim..(f + 1) * self.dim]
    }

    /// The simplices adjacent to face `f`; the second is `None` on the boundary.
    pub fn face_simplices(&self, f: usize) -> (usize, Option<usize>) {
        let [a, b] = self.topo.face_simplices[f];
        (a, (b != NO_SIMPLEX).then_some(b))
    }

    pub fn is_boundary_face(&self, f: usize) -> bool {
        self.topo.face_simplices[f][1] == NO_SIMPLEX
    }

    /// Face of `s` opposite its local vertex `l`.
    pub fn simplex_face(&self, s: usize, l: usize) -> usize {
        self.topo.simplex_faces[s * (self.dim + 1) + l]
    }

    /// Simplices containing vertex `v`.
    pub fn vertex_star(&self, v: usize) -> &[usize] {
        let o = &self.topo.vertex_offsets;
        &self.topo.vertex_simplices[o[v]..o[v + 1]]
    }

    /// Simplex sharing face `f` with `s`, if any.
    pub fn neighbor_across(&self, s: usize, f: usize) -> Option<usize> {
        let [a, b] = self.topo.face_simplices[f];
        let other = if a == s { b } else { a };
        (other != NO_SIMPLEX).then_some(other)
    }

    /// Local index of vertex `v` in simplex `s`.
    pub fn local_index(&self, s: usize, v: usize) -> Option<usize> {
        self.simplex(s).iter().position(|&w| w == v)
    }

    /// Whether `v` lies on a boundary face.
    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.vertex_star(v).iter().any(|&s| {
            (0..=self.dim).any(|l| {
                let f = self.simplex_face(s, l);
                self.simplex(s)[l] != v && self.is_boundary_face(f)
            })
        })
    }

    pub fn signed_volume(&self, s: usize) -> f64 {
        let pts: Vec<&[f64]> = self.simplex(s).iter().map(|&v| self.vertex(v)).collect();
        signed_volume(self.dim, &pts)
    }

    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in self.coords.chunks(d) {
            for i in 0..d {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }

    /// Translates the bounding box to the origin and scales its largest
    /// extent to one.
    pub fn normalize(&mut self) {
        let (lo, hi) = self.bounding_box();
        let ext = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
        if ext <= 0.0 {
            return;
        }
        let d = self.dim;
        for p in self.coords.chunks_mut(d) {
            for i in 0..d {
                p[i] = (p[i] - lo[i]) / ext;
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ValidationReport {
    pub degenerate: Vec<usize>,
    pub negatively_oriented: Vec<usize>,
    pub overshared_faces: usize,
    pub unreferenced_vertices: Vec<usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.degenerate.is_empty()
            && self.negatively_oriented.is_empty()
            && self.overshared_faces == 0
            && self.unreferenced_vertices.is_empty()
    }
}

/// Checks a raw simplex list for degeneracy, orientation, face sharing and
/// unreferenced vertices without modifying it.
pub fn validate_raw(dim: usize, coords: &[f64], simplices: &[usize]) -> ValidationReport {
    let k = dim + 1;
    let nv = coords.len() / dim;
    let mut rep = ValidationReport::default();
    let mut used = vec![false; nv];
    let mut count: HashMap<[usize; 3], usize> = HashMap::new();
    for (s, sim) in simplices.chunks(k).enumerate() {
        if sim.iter().any(|&v| v >= nv) {
            rep.degenerate.push(s);
            continue;
        }
        for &v in sim {
            used[v] = true;
        }
        let pts: Vec<&[f64]> = sim.iter().map(|&v| &coords[v * dim..(v + 1) * dim]).collect();
        let vol = signed_volume(dim, &pts);
        if vol.abs() <= VOLUME_FLOOR {
            rep.degenerate.push(s);
        } else if vol < 0.0 {
            rep.negatively_oriented.push(s);
        }
        for l in 0..k {
            let fv: Vec<usize> = (0..k).filter(|&j| j != l).map(|j| sim[j]).collect();
            *count.entry(face_key(&fv)).or_default() += 1;
        }
    }
    rep.overshared_faces = count.values().filter(|&&c| c > 2).count();
    rep.unreferenced_vertices = (0..nv).filter(|&v| !used[v]).collect();
    rep
}

pub fn validate(mesh: &SimplexMesh) -> ValidationReport {
    validate_raw(mesh.dim, &mesh.coords, &mesh.simplices)
}

/// Parses an OFF mesh. Triangle rows give a planar mesh (z must vanish),
/// tetrahedron rows a volume mesh.
pub fn parse_off(text: &str) -> Result<SimplexMesh> {
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(|t| (ln + 1, t)));
    }
    let mut it = tokens.into_iter();
    let perr = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    match it.next() {
        Some((_, "OFF")) => {}
        Some((l, _)) => return Err(perr(l, "missing OFF header")),
        None => return Err(perr(0, "empty input")),
    }
    let mut next_num = |what: &str| -> Result<(usize, f64)> {
        let (l, t) = it
            .next()
            .ok_or_else(|| perr(0, &format!("unexpected end of input reading {what}")))?;
        t.parse::<f64>()
            .map(|v| (l, v))
            .map_err(|_| perr(l, &format!("bad {what} '{t}'")))
    };
    let (_, nv) = next_num("vertex count")?;
    let (_, ns) = next_num("simplex count")?;
    let (_, _ne) = next_num("edge count")?;
    let (nv, ns) = (nv as usize, ns as usize);
    let mut raw = Vec::with_capacity(nv * 3);
    for _ in 0..nv * 3 {
        raw.push(next_num("coordinate")?.1);
    }
    let mut simplices = Vec::new();
    let mut arity = None;
    for _ in 0..ns {
        let (l, k) = next_num("simplex arity")?;
        let k = k as usize;
        if k != 3 && k != 4 {
            return Err(perr(l, "only triangles and tetrahedra are supported"));
        }
        if *arity.get_or_insert(k) != k {
            return Err(perr(l, "mixed simplex arities"));
        }
        for _ in 0..k {
            let (l, v) = next_num("vertex index")?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(perr(l, "bad vertex index"));
            }
            simplices.push(v as usize);
        }
    }
    let dim = match arity {
        Some(4) => 3,
        _ => 2,
    };
    let coords = if dim == 3 {
        raw
    } else {
        if raw.chunks(3).any(|p| p[2] != 0.0) {
            return Err(Error::Unsupported("triangle mesh with non-planar vertices".into()));
        }
        raw.chunks(3).flat_map(|p| [p[0], p[1]]).collect()
    };
    SimplexMesh::new(dim, coords, simplices)
}

pub fn to_off(mesh: &SimplexMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "OFF");
    let _ = writeln!(out, "{} {} 0", mesh.n_vertices(), mesh.n_simplices());
    for v in 0..mesh.n_vertices() {
        let p = mesh.vertex(v);
        let z = if mesh.dim == 3 { p[2] } else { 0.0 };
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], z);
    }
    for s in 0..mesh.n_simplices() {
        let sim = mesh.simplex(s);
        let _ = write!(out, "{}", sim.len());
        for v in sim {
            let _ = write!(out, " {v}");
        }
        let _ = writeln!(out);
    }
    out
}

/// Reads an OFF file and rescales it to unit maximal extent.
pub fn load_off(path: impl AsRef<Path>) -> Result<SimplexMesh> {
    let text = std::fs::read_to_string(path)?;
    let mut mesh = parse_off(&text)?;
    mesh.normalize();
    Ok(mesh)
}

pub fn save_off(mesh: &SimplexMesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_off(mesh))?;
    Ok(())
}

/// Regular triangulation of `[lo, hi]` with `nx x ny` cells, each split along
/// the diagonal from its lower-left corner.
pub fn grid_mesh_2d(lo: [f64; 2], hi: [f64; 2], nx: usize, ny: usize) -> Result<SimplexMesh> {
    let mut coords = Vec::with_capacity((nx + 1) * (ny + 1) * 2);
    for j in 0..=ny {
        for i in 0..=nx {
            coords.push(lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64);
            coords.push(lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut simplices = Vec::with_capacity(nx * ny * 6);
    for j in 0..ny {
        for i in 0..nx {
            simplices.extend([id(i, j), id(i + 1, j), id(i, j + 1)]);
            simplices.extend([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    SimplexMesh::new(2, coords, simplices)
}

/// Kuhn triangulation of a regular 3D grid (six tetrahedra per cube).
pub fn grid_mesh_3d(n: [usize; 3]) -> Result<SimplexMesh> {
    let [nx, ny, nz] = n;
    let mut coords = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                coords.extend([i as f64 / nx as f64, j as f64 / ny as f64, k as f64 / nz as f64]);
            }
        }
    }
    let id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut simplices = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for p in &perms {
                    let mut c = [i, j, k];
                    simplices.push(id(c[0], c[1], c[2]));
                    for &axis in p {
                        c[axis] += 1;
                        simplices.push(id(c[0], c[1], c[2]));
                    }
                }
            }
        }
    }
    SimplexMesh::new(3, coords, simplices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_is_fixed_on_construction() {
        let m = SimplexMesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 2, 1]).unwrap();
        assert!(m.signed_volume(0) > 0.0);
    }

    #[test]
    fn degenerate_simplex_is_rejected() {
        let r = SimplexMesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], vec![0, 1, 2]);
        assert!(matches!(r, Err(Error::DegenerateSimplex(0))));
    }

    #[test]
    fn grid_faces_and_boundary() {
        let m = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 3, 2).unwrap();
        assert_eq!(m.n_simplices(), 12);
        // Euler: F = V + S - 1 for a disk triangulation (faces are edges here).
        assert_eq!(m.n_faces(), m.n_vertices() + m.n_simplices() - 1);
        let boundary = (0..m.n_faces()).filter(|&f| m.is_boundary_face(f)).count();
        assert_eq!(boundary, 2 * (3 + 2));
    }

    #[test]
    fn kuhn_grid_fills_cube() {
        let m = grid_mesh_3d([2, 2, 2]).unwrap();
        let vol: f64 = (0..m.n_simplices()).map(|s| m.signed_volume(s)).sum();
        assert!((vol - 1.0).abs() < 1e-12);
    }

    #[test]
    fn off_roundtrip_is_exact() {
        let mut m = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        m.coords[8] += 1.0 / 3.0 * 1e-3;
        let back = parse_off(&to_off(&m)).unwrap();
        assert_eq!(back.coords, m.coords);
        assert_eq!(back.simplices, m.simplices);
    }

    #[test]
    fn off_parse_errors_carry_line() {
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\nx 1 0\n3 0 1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }));
    }
}
