//! Single-file training checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header, then every floating-point array as
//! little-endian `f64` in header order. Floats never pass through text, so a
//! reload is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchSampler, TrainConfig, TrainState};
use crate::encoder::{InputShape, ModelConfig, TwoStreamModel};
use crate::membank::{init_banks, BankInit, BankLayout};
use crate::pseudo::PseudoLabelRecord;
use crate::{Domain, Error, Modality, Result};

const MAGIC: &[u8; 8] = b"CVDACKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankEntry {
    domain: Domain,
    modality: Modality,
    ids: Vec<String>,
    raw_len: usize,
    projected_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    shape: InputShape,
    step: u64,
    data_rng: ChaCha8Rng,
    plan_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    source_sampler: BatchSampler,
    target_sampler: BatchSampler,
    pseudo_cache: Option<BTreeMap<String, PseudoLabelRecord>>,
    bank_momentum: f64,
    tensors: Vec<TensorEntry>,
    has_velocity: bool,
    banks: Vec<BankEntry>,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub state: TrainState,
}

fn push_all(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(state: &TrainState, model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Vec<u8>> {
    let tensors: Vec<TensorEntry> = state
        .model
        .tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry { name, len: t.len() })
        .collect();
    let mut banks = Vec::new();
    for d in Domain::ALL {
        for m in Modality::ALL {
            let (_, ids, raw, proj) = bank_parts(state, d, m);
            banks.push(BankEntry {
                domain: d,
                modality: m,
                ids,
                raw_len: raw.len(),
                projected_len: proj.len(),
            });
        }
    }
    let header = Header {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        shape: state.model.shape,
        step: state.step,
        data_rng: state.data_rng.clone(),
        plan_rng: state.plan_rng.clone(),
        noise_rng: state.noise_rng.clone(),
        source_sampler: state.source_sampler.clone(),
        target_sampler: state.target_sampler.clone(),
        pseudo_cache: state.pseudo_cache.clone(),
        bank_momentum: state.banks.momentum,
        tensors,
        has_velocity: state.velocity.is_some(),
        banks,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in state.model.tensors() {
        push_all(&mut out, t);
    }
    if let Some(v) = &state.velocity {
        for (_, t) in v.tensors() {
            push_all(&mut out, t);
        }
    }
    for d in Domain::ALL {
        for m in Modality::ALL {
            let (_, _, raw, proj) = bank_parts(state, d, m);
            push_all(&mut out, raw);
            push_all(&mut out, proj);
        }
    }
    Ok(out)
}

fn bank_parts(state: &TrainState, d: Domain, m: Modality) -> (String, Vec<String>, &Vec<f64>, &Vec<f64>) {
    let key = format!("{d}.{m}");
    state
        .banks
        .export()
        .into_iter()
        .find(|(k, ..)| *k == key)
        .expect("every bank is exported")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn fill_tensors(model: &mut TwoStreamModel, entries: &[TensorEntry], cur: &mut Cursor<'_>) -> Result<()> {
    let mut slots = model.tensors_mut();
    if slots.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            slots.len()
        )));
    }
    for ((name, slot), e) in slots.iter_mut().zip(entries) {
        if *name != e.name || slot.len() != e.len {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({} values) does not match model tensor {name} ({} values)",
                e.name,
                e.len,
                slot.len()
            )));
        }
        **slot = cur.f64s(e.len)?;
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;

    // Architecture comes from the configs; the values are overwritten below.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut model = TwoStreamModel::new(&header.model_config, header.shape, &mut scratch)?;
    fill_tensors(&mut model, &header.tensors, &mut cur)?;
    let velocity = if header.has_velocity {
        let mut v = model.zeros_like();
        fill_tensors(&mut v, &header.tensors, &mut cur)?;
        Some(v)
    } else {
        None
    };

    let ids_of = |d: Domain| {
        header
            .banks
            .iter()
            .find(|b| b.domain == d)
            .map(|b| b.ids.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing {d} bank")))
    };
    let source_ids = ids_of(Domain::Source)?;
    let target_ids = ids_of(Domain::Target)?;
    let layout = BankLayout {
        source_ids: &source_ids,
        target_ids: &target_ids,
        raw_dim: model.feature_dim(),
        proj_dim: model.projection_dim(),
    };
    let mut banks = init_banks(&layout, header.bank_momentum, BankInit::Zeros, &mut scratch)?;
    for b in &header.banks {
        let raw = cur.f64s(b.raw_len)?;
        let projected = cur.f64s(b.projected_len)?;
        if banks.bank(b.domain, b.modality).ids() != b.ids.as_slice() {
            return Err(Error::Checkpoint(format!("bank {}.{} ids disagree", b.domain, b.modality)));
        }
        banks.restore(b.domain, b.modality, raw, projected)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        state: TrainState {
            step: header.step,
            model,
            velocity,
            banks,
            data_rng: header.data_rng,
            plan_rng: header.plan_rng,
            noise_rng: header.noise_rng,
            source_sampler: header.source_sampler,
            target_sampler: header.target_sampler,
            pseudo_cache: header.pseudo_cache,
        },
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState, model_config: &ModelConfig, train_config: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(state, model_config, train_config)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
