//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CVQK"
//! 4       4     version (u32)
//! 8       8     header length H in bytes (u64)
//! 16      H     JSON header: configuration, fingerprint, vocabulary,
//!               optimizer scalars, RNG positions, trace, tensor table
//! 16+H    ...   f64 payload, tensors in table order, each row-major
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{Adam, PlateauState};
use super::trainer::EpochRecord;
use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::linguistic::Vocabulary;
use crate::model::CausalVqaModel;
use crate::params::{Mat, ParamStore};

pub const MAGIC: &[u8; 4] = b"CVQK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub config: TrainConfig,
    pub shape: DataShape,
    pub vocab: Vocabulary,
    pub prior_weights: [f64; 4],
    pub epoch: usize,
    pub adam: Adam,
    pub plateau: PlateauState,
    pub rng: RngState,
    pub sampler: RngState,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<Vec<Mat>>,
    pub trace: Vec<EpochRecord>,
    pub params: Vec<(String, Mat)>,
}

impl Checkpoint {
    /// The model with the checkpoint's current (not best) parameters.
    pub fn to_model(&self) -> Result<CausalVqaModel> {
        let mut model = CausalVqaModel::new(&self.config, &self.shape, self.prior_weights)?;
        model.store.load_values(self.params.clone())?;
        Ok(model)
    }

    /// The model a finished run reports: best-on-validation parameters when
    /// selection is enabled and a best epoch exists, the current ones otherwise.
    pub fn selected_model(&self) -> Result<CausalVqaModel> {
        let mut model = self.to_model()?;
        if let (true, Some(best)) = (self.config.select_best, &self.best_params) {
            if best.len() != model.store.len() {
                return Err(Error::Corruption("best parameter table does not match the model".into()));
            }
            for (dst, src) in model.store.values_mut().iter_mut().zip(best) {
                if dst.dim() != src.dim() {
                    return Err(Error::Corruption("best parameter shapes do not match the model".into()));
                }
                *dst = src.clone();
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    config: TrainConfig,
    shape: DataShape,
    vocab: Vocabulary,
    prior_weights: [f64; 4],
    epoch: usize,
    adam_lr: f64,
    adam_step: u64,
    plateau: PlateauState,
    rng: RngState,
    sampler: RngState,
    best_metric: Option<f64>,
    best_epoch: Option<usize>,
    trace: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

fn push_tensor(entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, group: &str, name: &str, m: &Mat) {
    entries.push(TensorEntry {
        group: group.into(),
        name: name.into(),
        rows: m.nrows(),
        cols: m.ncols(),
    });
    for v in m.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, m) in &ck.params {
        push_tensor(&mut tensors, &mut payload, "param", name, m);
    }
    for (i, (name, _)) in ck.params.iter().enumerate() {
        push_tensor(&mut tensors, &mut payload, "adam_m", name, &ck.adam.m[i]);
        push_tensor(&mut tensors, &mut payload, "adam_v", name, &ck.adam.v[i]);
    }
    if let Some(best) = &ck.best_params {
        for ((name, _), m) in ck.params.iter().zip(best) {
            push_tensor(&mut tensors, &mut payload, "best", name, m);
        }
    }
    let header = Header {
        fingerprint: ck.fingerprint.clone(),
        config: ck.config.clone(),
        shape: ck.shape.clone(),
        vocab: ck.vocab.clone(),
        prior_weights: ck.prior_weights,
        epoch: ck.epoch,
        adam_lr: ck.adam.lr,
        adam_step: ck.adam.step,
        plateau: ck.plateau.clone(),
        rng: ck.rng.clone(),
        sampler: ck.sampler.clone(),
        best_metric: ck.best_metric,
        best_epoch: ck.best_epoch,
        trace: ck.trace.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREFIX_LEN..];
    if hlen > body.len() {
        return Err(Error::Corruption(format!(
            "header length {hlen} exceeds file body of {} bytes",
            body.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Corruption(format!("checkpoint header: {e}")))?;
    let payload = &body[hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, tensor table implies {expected}",
            payload.len()
        )));
    }

    let mut offset = 0;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut best = Vec::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let data: Vec<f64> = payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        let mat = Mat::from_shape_vec((t.rows, t.cols), data).expect("length checked");
        match t.group.as_str() {
            "param" => params.push((t.name.clone(), mat)),
            "adam_m" => m.push(mat),
            "adam_v" => v.push(mat),
            "best" => best.push(mat),
            other => return Err(Error::Corruption(format!("unknown tensor group {other}"))),
        }
    }
    if m.len() != params.len() || v.len() != params.len() || !(best.is_empty() || best.len() == params.len()) {
        return Err(Error::Corruption("optimizer state does not match parameter table".into()));
    }
    let adam = Adam {
        step: header.adam_step,
        m,
        v,
        ..Adam::new(&ParamStore::new(), header.adam_lr)
    };
    Ok(Checkpoint {
        fingerprint: header.fingerprint,
        config: header.config,
        shape: header.shape,
        vocab: header.vocab.reindex(),
        prior_weights: header.prior_weights,
        epoch: header.epoch,
        adam,
        plateau: header.plateau,
        rng: header.rng,
        sampler: header.sampler,
        best_metric: header.best_metric,
        best_epoch: header.best_epoch,
        best_params: (!best.is_empty()).then_some(best),
        trace: header.trace,
        params,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_roundtrip_continues_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..37 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(decode_checkpoint(b"NOPE0000000000000000"), Err(Error::Format(_))));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Corruption(_))));
    }
}
