//! Temperature-scaled similarities, InfoNCE, and the training objective.
//!
//! Similarities are exponentiated cosine scores `exp(<x̂, ŷ>/τ)`. The loss
//! path never materializes those exponentials: it works on the log-scores
//! `<x̂, ŷ>/τ` and max-shifted log-sum-exp, and propagates gradients through
//! the input normalization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::sampling::{FeatureRef, Origin, PairingPlan};
use crate::{dot, l2_norm, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub temperature: f64,
    pub normalize_inputs: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            normalize_inputs: true,
        }
    }
}

impl SimilarityConfig {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `exp(<x̂, ŷ>/τ)`.
pub fn similarity(x: &[f64], y: &[f64], cfg: &SimilarityConfig) -> Result<f64> {
    Ok(log_similarity(x, y, cfg)?.exp())
}

/// `<x̂, ŷ>/τ`, the logarithm of [`similarity`].
pub fn log_similarity(x: &[f64], y: &[f64], cfg: &SimilarityConfig) -> Result<f64> {
    cfg.check()?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let a = Prepared::new(x, cfg.normalize_inputs);
    let b = Prepared::new(y, cfg.normalize_inputs);
    Ok(dot(&a.unit, &b.unit) / cfg.temperature)
}

/// An input vector after optional L2 normalization.
struct Prepared {
    unit: Vec<f64>,
    /// `None` when the input was used as-is.
    norm: Option<f64>,
}

impl Prepared {
    fn new(v: &[f64], normalize: bool) -> Self {
        if !normalize {
            return Self {
                unit: v.to_vec(),
                norm: None,
            };
        }
        let n = l2_norm(v);
        if n < 1e-12 {
            // A zero vector scores 0 against everything and receives no gradient.
            return Self {
                unit: vec![0.0; v.len()],
                norm: Some(f64::INFINITY),
            };
        }
        Self {
            unit: v.iter().map(|x| x / n).collect(),
            norm: Some(n),
        }
    }

    /// Maps a gradient w.r.t. the prepared vector back to the raw input.
    fn backprop(&self, g: &[f64]) -> Vec<f64> {
        match self.norm {
            None => g.to_vec(),
            Some(n) if n.is_infinite() => vec![0.0; g.len()],
            Some(n) => {
                let proj = dot(&self.unit, g);
                g.iter().zip(&self.unit).map(|(gi, ui)| (gi - ui * proj) / n).collect()
            }
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-anchor InfoNCE: `-log(Σ_p φ(a,p) / (Σ_p φ(a,p) + Σ_n φ(a,n)))`.
pub fn info_nce(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], cfg: &SimilarityConfig) -> Result<f64> {
    Ok(info_nce_with_grad(anchor, positives, negatives, cfg)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn info_nce_with_grad(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    cfg: &SimilarityConfig,
) -> Result<InfoNceGrad> {
    cfg.check()?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "InfoNCE needs at least one positive and one negative".into(),
        ));
    }
    let term = NceTerm::prepare(anchor, positives, negatives, cfg)?;
    let (loss, d_scores) = term.loss_and_score_grads();
    let (anchor_grad, mut others) = term.backprop(&d_scores, cfg.temperature);
    let negatives_grad = others.split_off(positives.len());
    Ok(InfoNceGrad {
        loss,
        anchor: anchor_grad,
        positives: others,
        negatives: negatives_grad,
    })
}

/// One anchor with its positives and negatives, scored.
struct NceTerm {
    anchor: Prepared,
    others: Vec<Prepared>,
    /// Log-scores; the first `n_pos` are positives.
    scores: Vec<f64>,
    n_pos: usize,
}

impl NceTerm {
    fn prepare(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], cfg: &SimilarityConfig) -> Result<Self> {
        let dim = anchor.len();
        for v in positives.iter().chain(negatives) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        let a = Prepared::new(anchor, cfg.normalize_inputs);
        let others: Vec<Prepared> = positives
            .iter()
            .chain(negatives)
            .map(|v| Prepared::new(v, cfg.normalize_inputs))
            .collect();
        let scores = others.iter().map(|o| dot(&a.unit, &o.unit) / cfg.temperature).collect();
        Ok(Self {
            anchor: a,
            others,
            scores,
            n_pos: positives.len(),
        })
    }

    fn loss_and_score_grads(&self) -> (f64, Vec<f64>) {
        let lse_all = log_sum_exp(self.scores.iter().copied());
        let lse_pos = log_sum_exp(self.scores[..self.n_pos].iter().copied());
        let grads = self
            .scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let all = (s - lse_all).exp();
                if i < self.n_pos {
                    all - (s - lse_pos).exp()
                } else {
                    all
                }
            })
            .collect();
        (lse_all - lse_pos, grads)
    }

    /// Gradients w.r.t. the raw anchor and raw positives/negatives.
    fn backprop(&self, d_scores: &[f64], temperature: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let dim = self.anchor.unit.len();
        let mut d_anchor_unit = vec![0.0; dim];
        let mut others = Vec::with_capacity(self.others.len());
        for (o, &g) in self.others.iter().zip(d_scores) {
            let c = g / temperature;
            for k in 0..dim {
                d_anchor_unit[k] += c * o.unit[k];
            }
            let d_other_unit: Vec<f64> = self.anchor.unit.iter().map(|a| c * a).collect();
            others.push(o.backprop(&d_other_unit));
        }
        (self.anchor.backprop(&d_anchor_unit), others)
    }
}

/// How the terms of a plan are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceForm {
    /// Mean of per-anchor InfoNCE.
    #[default]
    PerAnchor,
    /// One log over sums across all anchors, as the summed form is printed.
    SummedInsideLog,
}

/// Source of feature vectors referenced by a plan.
pub trait FeatureLookup {
    fn lookup(&self, r: &FeatureRef) -> Option<&[f64]>;
}

/// A plain map from references to vectors.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable(pub HashMap<FeatureRef, Vec<f64>>);

impl FeatureTable {
    pub fn insert(&mut self, r: FeatureRef, v: Vec<f64>) {
        self.0.insert(r, v);
    }
}

impl FeatureLookup for FeatureTable {
    fn lookup(&self, r: &FeatureRef) -> Option<&[f64]> {
        self.0.get(r).map(Vec::as_slice)
    }
}

/// A loss value and its gradient w.r.t. every batch feature it touched.
/// Bank features are constants and get no entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: HashMap<FeatureRef, Vec<f64>>,
}

impl LossGrad {
    fn accumulate(&mut self, r: &FeatureRef, g: &[f64], scale: f64) {
        if r.origin != Origin::Batch {
            return;
        }
        let slot = self.grads.entry(r.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += scale * v;
        }
    }
}

fn plan_loss(features: &dyn FeatureLookup, plan: &PairingPlan, cfg: &SimilarityConfig, form: NceForm) -> Result<LossGrad> {
    cfg.check()?;
    if plan.entries.is_empty() {
        return Ok(LossGrad::default());
    }
    let fetch = |r: &FeatureRef| {
        features
            .lookup(r)
            .ok_or_else(|| Error::Plan(format!("plan references missing feature {r:?}")))
    };
    let mut terms = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        if e.positives.is_empty() || e.negatives.is_empty() {
            return Err(Error::Plan(format!("anchor {:?} lacks positives or negatives", e.anchor)));
        }
        let anchor = fetch(&e.anchor)?;
        let pos = e.positives.iter().map(fetch).collect::<Result<Vec<_>>>()?;
        let neg = e.negatives.iter().map(fetch).collect::<Result<Vec<_>>>()?;
        terms.push(NceTerm::prepare(anchor, &pos, &neg, cfg)?);
    }

    let mut out = LossGrad::default();
    match form {
        NceForm::PerAnchor => {
            let scale = 1.0 / terms.len() as f64;
            for (term, e) in terms.iter().zip(&plan.entries) {
                let (loss, d_scores) = term.loss_and_score_grads();
                out.value += scale * loss;
                let (da, dothers) = term.backprop(&d_scores, cfg.temperature);
                out.accumulate(&e.anchor, &da, scale);
                for (r, g) in e.positives.iter().chain(&e.negatives).zip(&dothers) {
                    out.accumulate(r, g, scale);
                }
            }
        }
        NceForm::SummedInsideLog => {
            let all = terms.iter().flat_map(|t| t.scores.iter().copied());
            let pos = terms.iter().flat_map(|t| t.scores[..t.n_pos].iter().copied());
            let lse_all = log_sum_exp(all);
            let lse_pos = log_sum_exp(pos);
            out.value = lse_all - lse_pos;
            for (term, e) in terms.iter().zip(&plan.entries) {
                let d_scores: Vec<f64> = term
                    .scores
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let g = (s - lse_all).exp();
                        if i < term.n_pos {
                            g - (s - lse_pos).exp()
                        } else {
                            g
                        }
                    })
                    .collect();
                let (da, dothers) = term.backprop(&d_scores, cfg.temperature);
                out.accumulate(&e.anchor, &da, 1.0);
                for (r, g) in e.positives.iter().chain(&e.negatives).zip(&dothers) {
                    out.accumulate(r, g, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Within-domain cross-modal loss over projected features. Zero for an
/// empty plan.
pub fn cross_modal_loss(
    projected: &dyn FeatureLookup,
    plan: &PairingPlan,
    cfg: &SimilarityConfig,
    form: NceForm,
) -> Result<LossGrad> {
    plan_loss(projected, plan, cfg, form)
}

/// Cross-domain loss for one modality over raw encoder features (no
/// projection head). Zero for an empty plan.
pub fn cross_domain_loss(raw: &dyn FeatureLookup, plan: &PairingPlan, cfg: &SimilarityConfig) -> Result<LossGrad> {
    plan_loss(raw, plan, cfg, NceForm::PerAnchor)
}

/// Softmax cross-entropy of one logit row; returns the loss and dL/dlogits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits.iter().copied());
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - lse).exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[label], grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits.iter().copied());
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Which regularizers contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub enable_mo: bool,
    pub enable_do: bool,
    pub enable_self_training_baseline: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            enable_mo: true,
            enable_do: true,
            enable_self_training_baseline: false,
        }
    }
}

/// Raw per-step loss values before flag masking and weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub l_src: f64,
    pub l_mo_s: f64,
    pub l_mo_t: f64,
    pub l_do_a: f64,
    pub l_do_m: f64,
    pub l_self_train: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_src: f64,
    pub l_mo_s: f64,
    pub l_mo_t: f64,
    pub l_do_a: f64,
    pub l_do_m: f64,
    /// Hard pseudo-label cross-entropy; nonzero only in baseline mode.
    pub l_self_train: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBundle {
    /// `l_src + λ·(l_mo_s + l_mo_t + l_do_a + l_do_m + l_self_train)`.
    pub fn recompute_total(&self) -> f64 {
        self.l_src + self.lambda * (self.l_mo_s + self.l_mo_t + self.l_do_a + self.l_do_m + self.l_self_train)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_src,
            self.l_mo_s,
            self.l_mo_t,
            self.l_do_a,
            self.l_do_m,
            self.l_self_train,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Masks disabled components to zero and weights the regularizers by λ.
pub fn total_loss(c: LossComponents, lambda: f64, flags: LossFlags) -> LossBundle {
    let mask = |on: bool, v: f64| if on { v } else { 0.0 };
    let mut b = LossBundle {
        l_src: c.l_src,
        l_mo_s: mask(flags.enable_mo, c.l_mo_s),
        l_mo_t: mask(flags.enable_mo, c.l_mo_t),
        l_do_a: mask(flags.enable_do, c.l_do_a),
        l_do_m: mask(flags.enable_do, c.l_do_m),
        l_self_train: mask(flags.enable_self_training_baseline, c.l_self_train),
        l_total: 0.0,
        lambda,
    };
    b.l_total = b.recompute_total();
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{PlanEntry, PlanKind};
    use crate::{Domain, Modality};

    const TAU: f64 = 0.1;

    fn e(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn similarity_reference_values() {
        let cfg = SimilarityConfig::new(TAU);
        let x = e(0, 3);
        assert!((similarity(&x, &x, &cfg).unwrap() - 22026.465794806718).abs() < 1e-8);
        assert!((similarity(&x, &e(1, 3), &cfg).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((similarity(&x, &neg, &cfg).unwrap() - 4.5399929762484854e-5).abs() < 1e-15);
    }

    #[test]
    fn similarity_errors() {
        assert!(similarity(&[1.0], &[1.0, 0.0], &SimilarityConfig::new(TAU)).is_err());
        assert!(similarity(&[1.0], &[1.0], &SimilarityConfig::new(0.0)).is_err());
        assert!(similarity(&[1.0], &[1.0], &SimilarityConfig::new(-1.0)).is_err());
    }

    #[test]
    fn info_nce_reference_values() {
        let cfg = SimilarityConfig::new(TAU);
        let a = e(0, 2);
        let expected = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        let l = info_nce(&a, &[&a], &[&e(1, 2)], &cfg).unwrap();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 4.5398899e-5).abs() < 1e-11);
        let orth = e(1, 3);
        let orth2 = e(2, 3);
        let l = info_nce(&e(0, 3), &[&orth], &[&orth2], &cfg).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn info_nce_requires_both_sets() {
        let cfg = SimilarityConfig::new(TAU);
        let a = e(0, 2);
        assert!(info_nce(&a, &[], &[&a], &cfg).is_err());
        assert!(info_nce(&a, &[&a], &[], &cfg).is_err());
    }

    #[test]
    fn temperature_limit_is_log_n_plus_one() {
        let cfg = SimilarityConfig::new(1e3);
        let a = e(0, 4);
        let others: Vec<Vec<f64>> = (1..4).map(|i| e(i, 4)).collect();
        let refs: Vec<&[f64]> = others.iter().map(Vec::as_slice).collect();
        let l = info_nce(&a, &refs[..1], &refs[1..], &cfg).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_matches_definition() {
        let logits = [1.0, 2.0, -0.5];
        let (l, g) = softmax_cross_entropy(&logits, 1);
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        assert!((l - -(2f64.exp() / z).ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
        let (l, _) = softmax_cross_entropy(&[50.0, -50.0], 0);
        assert!(l < 1e-20);
    }

    #[test]
    fn total_loss_arithmetic() {
        let c = LossComponents {
            l_src: 1.0,
            l_mo_s: 0.2,
            l_mo_t: 0.2,
            l_do_a: 0.2,
            l_do_m: 0.2,
            l_self_train: 0.0,
        };
        let b = total_loss(c, 1.25, LossFlags::default());
        assert!((b.l_total - 2.0).abs() < 1e-12);
        assert_eq!(total_loss(c, 0.0, LossFlags::default()).l_total, 1.0);
        let off = LossFlags {
            enable_mo: false,
            enable_do: false,
            enable_self_training_baseline: false,
        };
        let b = total_loss(c, 1.25, off);
        assert_eq!(b.l_total, 1.0);
        assert_eq!(b.l_mo_s, 0.0);
    }

    #[test]
    fn empty_plans_are_zero() {
        let t = FeatureTable::default();
        let cfg = SimilarityConfig::new(TAU);
        let p = PairingPlan::empty(PlanKind::CrossModal);
        assert_eq!(cross_modal_loss(&t, &p, &cfg, NceForm::PerAnchor).unwrap().value, 0.0);
        let p = PairingPlan::empty(PlanKind::CrossDomain);
        assert_eq!(cross_domain_loss(&t, &p, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn missing_feature_is_plan_error() {
        let t = FeatureTable::default();
        let plan = PairingPlan {
            kind: PlanKind::CrossDomain,
            entries: vec![PlanEntry {
                anchor: FeatureRef::batch("t", Modality::Motion, Domain::Target),
                positives: vec![FeatureRef::bank("s", Modality::Motion, Domain::Source)],
                negatives: vec![FeatureRef::bank("s2", Modality::Motion, Domain::Source)],
            }],
            skipped_anchors: 0,
        };
        assert!(matches!(
            cross_domain_loss(&t, &plan, &SimilarityConfig::new(TAU)),
            Err(Error::Plan(_))
        ));
    }
}
