//! Versioned JSON container for problems and solver states. Bulk arrays are
//! stored as little-endian base64.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::datacost::CostField;
use crate::energy::{assemble, Flavor, Problem};
use crate::error::{Error, Result};
use crate::mesh::SimplexMesh;
use crate::shapes::WulffTable;
use crate::solver::SolverState;

pub const SNAPSHOT_VERSION: u32 = 1;

pub fn encode_f64(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::InvalidParams(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParams("f64 array length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_index(v: &[usize]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as u64).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_index(s: &str) -> Result<Vec<usize>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::InvalidParams(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParams("index array length is not a multiple of 8".into()));
    }
    bytes
        .chunks_exact(8)
        .map(|c| {
            usize::try_from(u64::from_le_bytes(c.try_into().unwrap()))
                .map_err(|_| Error::InvalidParams("index out of range".into()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub n_primal: usize,
    pub n_dual: usize,
    pub primal: String,
    pub dual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub flavor: Flavor,
    pub dim: usize,
    pub n_vertices: usize,
    pub n_simplices: usize,
    pub coords: String,
    pub simplices: String,
    pub n_labels: usize,
    pub costs: String,
    pub table: WulffTable,
    pub state: Option<StateSnapshot>,
}

impl Snapshot {
    pub fn new(problem: &Problem, state: Option<&SolverState>) -> Self {
        let mesh = &problem.mesh;
        Snapshot {
            version: SNAPSHOT_VERSION,
            flavor: problem.flavor,
            dim: mesh.dim(),
            n_vertices: mesh.n_vertices(),
            n_simplices: mesh.n_simplices(),
            coords: encode_f64(mesh.coords()),
            simplices: encode_index(mesh.simplex_indices()),
            n_labels: problem.n_labels(),
            costs: encode_f64(&problem.costs.values),
            table: problem.table.clone(),
            state: state.map(|s| StateSnapshot {
                n_primal: s.primal.len(),
                n_dual: s.dual.len(),
                primal: encode_f64(&s.primal),
                dual: encode_f64(&s.dual),
            }),
        }
    }

    /// Reassembles the problem and decodes the state, checking all sizes.
    pub fn restore(&self) -> Result<(Problem, Option<SolverState>)> {
        if self.version != SNAPSHOT_VERSION {
            return Err(Error::SnapshotVersion(self.version));
        }
        let coords = decode_f64(&self.coords)?;
        let simplices = decode_index(&self.simplices)?;
        if coords.len() != self.n_vertices * self.dim || simplices.len() != self.n_simplices * (self.dim + 1) {
            return Err(Error::InvalidMesh(
                "snapshot mesh arrays do not match their counts".into(),
            ));
        }
        let mesh = SimplexMesh::new(self.dim, coords, simplices)?;
        let costs = CostField {
            n_labels: self.n_labels,
            values: decode_f64(&self.costs)?,
        };
        let problem = assemble(self.flavor, mesh, costs, self.table.clone())?;
        let state = match &self.state {
            None => None,
            Some(s) => {
                let st = SolverState {
                    primal: decode_f64(&s.primal)?,
                    dual: decode_f64(&s.dual)?,
                };
                if st.primal.len() != problem.saddle.n_primal() || st.dual.len() != problem.saddle.n_dual() {
                    return Err(Error::InconsistentState(
                        "snapshot state does not match the problem".into(),
                    ));
                }
                Some(st)
            }
        };
        Ok((problem, state))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        if let Some(ver) = v.get("version").and_then(|x| x.as_u64()) {
            if ver != SNAPSHOT_VERSION as u64 {
                return Err(Error::SnapshotVersion(ver as u32));
            }
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_mesh_2d;
    use crate::shapes::WulffShape;

    #[test]
    fn round_trip_is_bit_exact() {
        let mesh = grid_mesh_2d([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        let costs = CostField {
            n_labels: 2,
            values: (0..18).map(|i| (i as f64 / 7.0).sin()).collect(),
        };
        let table = WulffTable::uniform(2, 2, WulffShape::ball(0.3)).unwrap();
        let p = assemble(Flavor::P1NonMetric, mesh, costs, table).unwrap();
        let mut st = p.initial_state();
        st.primal
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 1.0 / (i as f64 + 3.0));
        let snap = Snapshot::new(&p, Some(&st));
        let back = Snapshot::from_json(&snap.to_json().unwrap()).unwrap();
        let (q, qs) = back.restore().unwrap();
        assert_eq!(q.costs, p.costs);
        assert_eq!(q.mesh.coords(), p.mesh.coords());
        assert_eq!(qs.unwrap().primal, st.primal);
    }

    #[test]
    fn other_versions_are_rejected() {
        let text = r#"{"version": 7}"#;
        assert!(matches!(Snapshot::from_json(text), Err(Error::SnapshotVersion(7))));
    }
}
