//! Per-clip feature memory banks, one per (domain, modality), refreshed with
//! a momentum rule after every training step.
//!
//! Each bank keeps two stores: projected features (unit rows, consumed by
//! the cross-modal loss) and raw encoder features (consumed by the
//! cross-domain loss).

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sampling::{FeatureRef, Origin};
use crate::{l2_norm, Domain, Error, Modality, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Projected,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankInit {
    #[default]
    RandomUnit,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    raw_dim: usize,
    proj_dim: usize,
    raw: Vec<f64>,
    projected: Vec<f64>,
}

impl MemoryBank {
    fn new<R: Rng + ?Sized>(ids: &[String], raw_dim: usize, proj_dim: usize, init: BankInit, rng: &mut R) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut fill = |dim: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(ids.len() * dim);
            for _ in ids {
                match init {
                    BankInit::Zeros => out.extend(std::iter::repeat_n(0.0, dim)),
                    BankInit::RandomUnit => {
                        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
                        let n = l2_norm(&v);
                        out.extend(v.iter().map(|x| x / n));
                    }
                }
            }
            out
        };
        let raw = fill(raw_dim);
        let projected = fill(proj_dim);
        Self {
            ids: ids.to_vec(),
            index,
            raw_dim,
            proj_dim,
            raw,
            projected,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self, space: Space) -> usize {
        match space {
            Space::Raw => self.raw_dim,
            Space::Projected => self.proj_dim,
        }
    }

    fn store(&self, space: Space) -> &[f64] {
        match space {
            Space::Raw => &self.raw,
            Space::Projected => &self.projected,
        }
    }

    pub fn row(&self, space: Space, clip_id: &str) -> Option<&[f64]> {
        let i = *self.index.get(clip_id)?;
        let d = self.dim(space);
        Some(&self.store(space)[i * d..(i + 1) * d])
    }

    pub fn contains(&self, clip_id: &str) -> bool {
        self.index.contains_key(clip_id)
    }
}

fn slot(domain: Domain, modality: Modality) -> usize {
    (domain as usize) * 2 + modality as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBankSet {
    banks: [MemoryBank; 4],
    pub momentum: f64,
}

/// Clip ids per domain that the banks are built over.
pub struct BankLayout<'a> {
    pub source_ids: &'a [String],
    pub target_ids: &'a [String],
    pub raw_dim: usize,
    pub proj_dim: usize,
}

pub fn init_banks<R: Rng + ?Sized>(layout: &BankLayout<'_>, momentum: f64, init: BankInit, rng: &mut R) -> Result<MemoryBankSet> {
    check_momentum(momentum)?;
    let mut make = |domain: Domain| {
        let ids = match domain {
            Domain::Source => layout.source_ids,
            Domain::Target => layout.target_ids,
        };
        MemoryBank::new(ids, layout.raw_dim, layout.proj_dim, init, rng)
    };
    let banks = [
        make(Domain::Source),
        make(Domain::Source),
        make(Domain::Target),
        make(Domain::Target),
    ];
    Ok(MemoryBankSet { banks, momentum })
}

fn check_momentum(momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1], got {momentum}")));
    }
    Ok(())
}

impl MemoryBankSet {
    pub fn bank(&self, domain: Domain, modality: Modality) -> &MemoryBank {
        &self.banks[slot(domain, modality)]
    }

    /// Rows for `clip_ids`, in the requested order.
    pub fn lookup(&self, domain: Domain, modality: Modality, space: Space, clip_ids: &[String]) -> Result<Vec<Vec<f64>>> {
        let bank = self.bank(domain, modality);
        clip_ids
            .iter()
            .map(|id| {
                bank.row(space, id)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::UnknownClip(id.clone()))
            })
            .collect()
    }

    /// `M ← δ·M + (1−δ)·F` for each id, then projected rows are renormalized
    /// to unit length.
    pub fn momentum_update(
        &mut self,
        domain: Domain,
        modality: Modality,
        space: Space,
        clip_ids: &[String],
        fresh: &[Vec<f64>],
        momentum: f64,
    ) -> Result<()> {
        check_momentum(momentum)?;
        if clip_ids.len() != fresh.len() {
            return Err(Error::Shape(format!("{} ids but {} feature rows", clip_ids.len(), fresh.len())));
        }
        let bank = &mut self.banks[slot(domain, modality)];
        let dim = bank.dim(space);
        for (id, f) in clip_ids.iter().zip(fresh) {
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: f.len(),
                });
            }
            let i = *bank.index.get(id).ok_or_else(|| Error::UnknownClip(id.clone()))?;
            let store = match space {
                Space::Raw => &mut bank.raw,
                Space::Projected => &mut bank.projected,
            };
            let row = &mut store[i * dim..(i + 1) * dim];
            for (m, v) in row.iter_mut().zip(f) {
                *m = momentum * *m + (1.0 - momentum) * v;
            }
            if space == Space::Projected {
                let n = l2_norm(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        Ok(())
    }

    /// Bank row addressed by a plan reference.
    pub fn row_for(&self, r: &FeatureRef, space: Space) -> Option<&[f64]> {
        if r.origin != Origin::Bank {
            return None;
        }
        self.bank(r.domain, r.modality).row(space, &r.clip_id)
    }

    /// All stores flattened in a fixed order, keyed for serialization.
    pub fn export(&self) -> Vec<(String, Vec<String>, &Vec<f64>, &Vec<f64>)> {
        let mut out = Vec::new();
        for domain in Domain::ALL {
            for modality in Modality::ALL {
                let b = self.bank(domain, modality);
                out.push((format!("{domain}.{modality}"), b.ids.clone(), &b.raw, &b.projected));
            }
        }
        out
    }

    /// Overwrites stored rows, as when restoring a checkpoint.
    pub fn restore(&mut self, domain: Domain, modality: Modality, raw: Vec<f64>, projected: Vec<f64>) -> Result<()> {
        let b = &mut self.banks[slot(domain, modality)];
        if raw.len() != b.raw.len() || projected.len() != b.projected.len() {
            return Err(Error::Checkpoint(format!("bank {domain}.{modality} has the wrong size")));
        }
        b.raw = raw;
        b.projected = projected;
        Ok(())
    }
}
