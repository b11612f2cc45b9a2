//! Versioned, checksummed model persistence with bit-exact round trips.
//!
//! Numeric payloads are serialized as JSON with shortest-round-trip float
//! formatting, so parse(serialize(x)) reproduces every f64 bit pattern.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelState};
use crate::tensor::{EntityMap, TensorScheme};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct MatrixPayload {
    nrows: usize,
    ncols: usize,
    /// Row-major values.
    data: Vec<f64>,
}

impl MatrixPayload {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { nrows: m.nrows(), ncols: m.ncols(), data }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.nrows * self.ncols {
            return Err(Error::Checkpoint("matrix payload size mismatch".into()));
        }
        Ok(DMatrix::from_fn(self.nrows, self.ncols, |i, j| self.data[i * self.ncols + j]))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StatePayload {
    lambda: Vec<f64>,
    delta: Vec<f64>,
    tau: Vec<f64>,
    a_sched: Vec<f64>,
    factors: Vec<MatrixPayload>,
    factor_vars: Vec<MatrixPayload>,
    heads: BTreeMap<usize, Vec<Vec<f64>>>,
    head_vars: BTreeMap<usize, Vec<Vec<f64>>>,
    q: BTreeMap<usize, MatrixPayload>,
    t: u64,
}

impl StatePayload {
    fn from_state(s: &ModelState) -> Self {
        Self {
            lambda: s.lambda.iter().copied().collect(),
            delta: s.delta.iter().copied().collect(),
            tau: s.tau.iter().copied().collect(),
            a_sched: s.a_sched.iter().copied().collect(),
            factors: s.factors.iter().map(MatrixPayload::from_matrix).collect(),
            factor_vars: s.factor_vars.iter().map(MatrixPayload::from_matrix).collect(),
            heads: s
                .heads
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|b| b.iter().copied().collect()).collect()))
                .collect(),
            head_vars: s
                .head_vars
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|b| b.iter().copied().collect()).collect()))
                .collect(),
            q: s.q.iter().map(|(&k, m)| (k, MatrixPayload::from_matrix(m))).collect(),
            t: s.t,
        }
    }

    fn to_state(&self) -> Result<ModelState> {
        let factors = self.factors.iter().map(|m| m.to_matrix()).collect::<Result<Vec<_>>>()?;
        let factor_vars = self.factor_vars.iter().map(|m| m.to_matrix()).collect::<Result<Vec<_>>>()?;
        let q = self
            .q
            .iter()
            .map(|(&k, m)| Ok((k, m.to_matrix()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(ModelState {
            lambda: DVector::from_vec(self.lambda.clone()),
            delta: DVector::from_vec(self.delta.clone()),
            tau: DVector::from_vec(self.tau.clone()),
            a_sched: DVector::from_vec(self.a_sched.clone()),
            factors,
            factor_vars,
            heads: self
                .heads
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|b| DVector::from_vec(b.clone())).collect()))
                .collect(),
            head_vars: self
                .head_vars
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|b| DVector::from_vec(b.clone())).collect()))
                .collect(),
            q,
            t: self.t,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemePayload {
    mode_names: Vec<String>,
    cardinalities: Vec<usize>,
    raw_ids: Vec<Vec<String>>,
}

impl SchemePayload {
    fn from_scheme(s: &TensorScheme) -> Self {
        let raw_ids = s
            .entity_maps
            .iter()
            .map(|m| (0..m.len()).map(|i| m.raw_of(i).to_string()).collect())
            .collect();
        Self { mode_names: s.mode_names.clone(), cardinalities: s.cardinalities.clone(), raw_ids }
    }

    fn to_scheme(&self) -> TensorScheme {
        let entity_maps = self
            .raw_ids
            .iter()
            .map(|ids| {
                let mut m = EntityMap::default();
                for id in ids {
                    m.intern(id);
                }
                m
            })
            .collect();
        TensorScheme {
            mode_names: self.mode_names.clone(),
            cardinalities: self.cardinalities.clone(),
            entity_maps,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    hyper: Hyperparams,
    state: StatePayload,
    scheme: SchemePayload,
    /// Supervised mode index -> task names, aligned with the stored heads.
    task_names: BTreeMap<usize, Vec<String>>,
    iterations: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    version: u32,
    sha256: String,
    payload: Payload,
}

/// A loaded checkpoint: everything needed to score or resume.
#[derive(Debug)]
pub struct Checkpoint {
    pub hyper: Hyperparams,
    pub state: ModelState,
    pub scheme: TensorScheme,
    pub task_names: BTreeMap<usize, Vec<String>>,
    pub iterations: u64,
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a checkpoint to `path` with a version tag and a payload
/// checksum.
pub fn save_checkpoint(
    state: &ModelState,
    hyper: &Hyperparams,
    scheme: &TensorScheme,
    task_names: &BTreeMap<usize, Vec<String>>,
    iterations: u64,
    path: &Path,
) -> Result<()> {
    let payload = Payload {
        hyper: hyper.clone(),
        state: StatePayload::from_state(state),
        scheme: SchemePayload::from_scheme(scheme),
        task_names: task_names.clone(),
        iterations,
    };
    let payload_json = serde_json::to_string(&payload)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    let envelope = Envelope {
        version: CHECKPOINT_VERSION,
        sha256: hex_sha256(payload_json.as_bytes()),
        payload,
    };
    let body = serde_json::to_string(&envelope)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, body)?;
    Ok(())
}

/// Load and verify a checkpoint: version match, checksum match, shape
/// consistency.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let body = std::fs::read_to_string(path)?;
    let envelope: Envelope =
        serde_json::from_str(&body).map_err(|e| Error::Checkpoint(format!("parse: {e}")))?;
    if envelope.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {}, expected {}",
            envelope.version, CHECKPOINT_VERSION
        )));
    }
    // shortest-round-trip floats make re-serialization reproduce the
    // exact bytes the checksum was computed over
    let payload_json = serde_json::to_string(&envelope.payload)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    let digest = hex_sha256(payload_json.as_bytes());
    if digest != envelope.sha256 {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupted".into()));
    }
    let state = envelope.payload.state.to_state()?;
    Ok(Checkpoint {
        hyper: envelope.payload.hyper,
        state,
        scheme: envelope.payload.scheme.to_scheme(),
        task_names: envelope.payload.task_names,
        iterations: envelope.payload.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{seeded_stream, STREAM_INIT};
    use crate::model::{init_state, LabelSet};
    use crate::tensor::{ingest_tuples, ModeDecl};

    fn fixture() -> (ModelState, Hyperparams, TensorScheme, BTreeMap<usize, Vec<String>>) {
        let data = "a,b\nx,u\ny,v\nz,w\n";
        let decls = vec![ModeDecl::entity("a"), ModeDecl::entity("b")];
        let (t, _) = ingest_tuples(data.as_bytes(), &decls, 0).unwrap();
        let labels = vec![LabelSet::new(
            0,
            vec!["t0".into()],
            &[(0, 0, 1.0), (1, 0, -1.0)],
        )
        .unwrap()];
        let hyper = Hyperparams { rank: 3, ..Default::default() };
        let mut rng = seeded_stream(17, STREAM_INIT);
        let state = init_state(&t.scheme, &labels, &hyper, &mut rng, None).unwrap();
        let tasks: BTreeMap<usize, Vec<String>> = [(0, vec!["t0".to_string()])].into();
        (state, hyper, t.scheme, tasks)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (state, hyper, scheme, tasks) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1.json");
        let p2 = dir.path().join("c2.json");
        save_checkpoint(&state, &hyper, &scheme, &tasks, 42, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.state, state);
        assert_eq!(loaded.iterations, 42);
        assert_eq!(loaded.scheme.mode_names, scheme.mode_names);
        assert_eq!(loaded.scheme.entity_maps[0].raw_of(2), "z");
        assert_eq!(loaded.task_names[&0], vec!["t0"]);
        save_checkpoint(&loaded.state, &loaded.hyper, &loaded.scheme, &loaded.task_names, 42, &p2)
            .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_rejected() {
        let (state, hyper, scheme, tasks) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&state, &hyper, &scheme, &tasks, 1, &p).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &body[..body.len() - 20]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupted_value_fails_checksum() {
        let (state, hyper, scheme, tasks) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&state, &hyper, &scheme, &tasks, 1, &p).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        let tampered = body.replacen("\"iterations\":1", "\"iterations\":2", 1);
        assert_ne!(body, tampered);
        std::fs::write(&p, tampered).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let (state, hyper, scheme, tasks) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&state, &hyper, &scheme, &tasks, 1, &p).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, body.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn extreme_floats_survive() {
        let (mut state, hyper, scheme, tasks) = fixture();
        state.lambda[0] = 1.0 + f64::EPSILON;
        state.lambda[1] = 1e-308;
        state.lambda[2] = -0.1234567890123456789;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&state, &hyper, &scheme, &tasks, 1, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        for r in 0..3 {
            assert_eq!(loaded.state.lambda[r].to_bits(), state.lambda[r].to_bits());
        }
    }
}

