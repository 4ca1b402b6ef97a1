//! End-to-end optimization of
//! `L_all = L_src + λ·(L_mo^s + L_mo^t + L_do^a + L_do^m)`.
//!
//! A step samples one batch per domain with independent window offsets per
//! modality, runs both streams, derives pseudo-labels for the target batch,
//! builds the pairing plans, evaluates every enabled loss, backpropagates by
//! hand, applies SGD and finally folds this step's features into the memory
//! banks. Loss terms therefore always see the banks as they were at the end
//! of the previous step.

pub mod checkpoint;
pub mod config;
pub mod experiments;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{source_class_index, validate_window_length, ClipSample};
use crate::encoder::{ClipWindow, EncoderTrace, InputShape, ModelConfig, ProjectionTrace, TwoStreamModel};
use crate::evalviz::EvalReport;
use crate::losses::{
    cross_domain_loss, cross_modal_loss, softmax_cross_entropy, total_loss, FeatureLookup, LossBundle, LossComponents,
    LossGrad,
};
use crate::membank::{init_banks, BankLayout, MemoryBankSet, Space};
use crate::pseudo::{inject_label_noise, predict_pseudo_labels, records_from_logits, self_training_loss_from_logits, PseudoLabelRecord};
use crate::sampling::{build_cross_domain_plan, build_cross_modal_plan, extract_window, sample_window_pair, FeatureRef, Origin, PairingPlan};
use crate::{Domain, Error, Modality, Result};

pub use config::{ExperimentConfig, ExperimentSettings, PseudoLabelRefresh, TrainConfig, SCHEMA_VERSION};

/// Clips the trainer may see. Held-out target labels are stripped on
/// construction, so nothing downstream can read them.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub source: Vec<ClipSample>,
    pub target: Vec<ClipSample>,
    pub source_index: BTreeMap<usize, Vec<String>>,
    pub shape: InputShape,
}

impl TrainingData {
    pub fn new(source: &[ClipSample], target: &[ClipSample], num_classes: usize, frame_size: usize, cfg: &TrainConfig) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Config("both domains need at least one clip".into()));
        }
        if source.iter().any(|c| c.domain != Domain::Source) || target.iter().any(|c| c.domain != Domain::Target) {
            return Err(Error::Config("clips passed under the wrong domain".into()));
        }
        validate_window_length(source, cfg.window_length)?;
        validate_window_length(target, cfg.window_length)?;
        if cfg.batch_size > source.len() || cfg.batch_size > target.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds a domain's clip count ({} source, {} target)",
                cfg.batch_size,
                source.len(),
                target.len()
            )));
        }
        for c in source {
            match c.label() {
                Some(l) if l < num_classes => {}
                _ => return Err(Error::Config(format!("source clip {} lacks a valid label", c.clip_id))),
            }
        }
        let target: Vec<ClipSample> = target.iter().map(ClipSample::without_held_out_label).collect();
        Ok(Self {
            source_index: source_class_index(source),
            source: source.to_vec(),
            target,
            shape: InputShape {
                window_length: cfg.window_length,
                frame_size,
                num_classes,
            },
        })
    }

    pub fn clips(&self, domain: Domain) -> &[ClipSample] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn ids(&self, domain: Domain) -> Vec<String> {
        self.clips(domain).iter().map(|c| c.clip_id.clone()).collect()
    }
}

/// Shuffled pass over a domain; a new permutation starts once fewer than a
/// batch of clips remain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    pub epoch: u64,
}

impl BatchSampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0, epoch: 0 }
    }

    /// Next batch of indices and whether a new epoch started.
    pub fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let mut wrapped = false;
        if self.cursor + k > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
            self.epoch += 1;
            wrapped = true;
        }
        let out = self.order[self.cursor..self.cursor + k].to_vec();
        self.cursor += k;
        (out, wrapped)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: TwoStreamModel,
    /// SGD momentum buffer, present when `optimizer_momentum > 0`.
    pub velocity: Option<TwoStreamModel>,
    pub banks: MemoryBankSet,
    pub data_rng: ChaCha8Rng,
    pub plan_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub source_sampler: BatchSampler,
    pub target_sampler: BatchSampler,
    /// Whole-target pseudo-labels in per-epoch refresh mode.
    pub pseudo_cache: Option<BTreeMap<String, PseudoLabelRecord>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &TrainingData) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream(cfg.seed, 0);
        let model = TwoStreamModel::new(model_cfg, data.shape, &mut init_rng)?;
        let source_ids = data.ids(Domain::Source);
        let target_ids = data.ids(Domain::Target);
        let layout = BankLayout {
            source_ids: &source_ids,
            target_ids: &target_ids,
            raw_dim: model.feature_dim(),
            proj_dim: model.projection_dim(),
        };
        let banks = init_banks(&layout, cfg.bank_momentum, cfg.bank_init, &mut init_rng)?;
        let mut data_rng = stream(cfg.seed, 1);
        let source_sampler = BatchSampler::new(data.source.len(), &mut data_rng);
        let target_sampler = BatchSampler::new(data.target.len(), &mut data_rng);
        let velocity = (cfg.optimizer_momentum > 0.0).then(|| model.zeros_like());
        Ok(Self {
            step: 0,
            model,
            velocity,
            banks,
            data_rng,
            plan_rng: stream(cfg.seed, 2),
            noise_rng: stream(cfg.seed, 3),
            source_sampler,
            target_sampler,
            pseudo_cache: None,
        })
    }
}

/// One clip of a step batch with its sampled windows.
#[derive(Debug, Clone)]
pub struct BatchClip {
    pub clip_id: String,
    pub label: Option<usize>,
    pub appearance: ClipWindow,
    pub motion: ClipWindow,
}

#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub source: Vec<BatchClip>,
    pub target: Vec<BatchClip>,
}

impl StepBatch {
    pub fn clips(&self, d: Domain) -> &[BatchClip] {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn ids(&self, d: Domain) -> Vec<String> {
        self.clips(d).iter().map(|c| c.clip_id.clone()).collect()
    }
}

fn sample_batch(clips: &[&ClipSample], window_length: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BatchClip>> {
    clips
        .iter()
        .map(|c| {
            let pair = sample_window_pair(c, window_length, rng)?;
            Ok(BatchClip {
                clip_id: c.clip_id.clone(),
                label: c.label(),
                appearance: extract_window(c, &pair, Modality::Appearance),
                motion: extract_window(c, &pair, Modality::Motion),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
struct ClipForward {
    raw: [Vec<f64>; 2],
    traces: [EncoderTrace; 2],
    proj: [ProjectionTrace; 2],
    logits: [Vec<f64>; 2],
}

impl ClipForward {
    fn fused(&self) -> Vec<f64> {
        self.logits[0].iter().zip(&self.logits[1]).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Activations of both domains for one batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    source: Vec<ClipForward>,
    target: Vec<ClipForward>,
}

impl BatchForward {
    fn domain(&self, d: Domain) -> &[ClipForward] {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn fused_logits(&self, d: Domain) -> Vec<Vec<f64>> {
        self.domain(d).iter().map(ClipForward::fused).collect()
    }
}

fn midx(m: Modality) -> usize {
    m as usize
}

pub fn forward_batch(model: &TwoStreamModel, batch: &StepBatch) -> Result<BatchForward> {
    let run = |clips: &[BatchClip]| -> Result<Vec<ClipForward>> {
        clips
            .iter()
            .map(|c| {
                let (fa, ta) = model.encode_one(&c.appearance, Modality::Appearance)?;
                let (fm, tm) = model.encode_one(&c.motion, Modality::Motion)?;
                let pa = model.projection_head.forward(&fa);
                let pm = model.projection_head.forward(&fm);
                let la = model.classifier_appearance.forward(&fa);
                let lm = model.classifier_motion.forward(&fm);
                Ok(ClipForward {
                    raw: [fa, fm],
                    traces: [ta, tm],
                    proj: [pa, pm],
                    logits: [la, lm],
                })
            })
            .collect()
    };
    Ok(BatchForward {
        source: run(&batch.source)?,
        target: run(&batch.target)?,
    })
}

/// Pseudo-labels and pairing plans for one step; fixed once drawn.
#[derive(Debug, Clone, Default)]
pub struct StepPlans {
    pub mo_source: Option<PairingPlan>,
    pub mo_target: Option<PairingPlan>,
    pub do_appearance: Option<PairingPlan>,
    pub do_motion: Option<PairingPlan>,
    /// Row-aligned with the target batch; empty when no pseudo-labels were
    /// needed this step.
    pub records: Vec<PseudoLabelRecord>,
}

struct StepLookup<'a> {
    batch: HashMap<FeatureRef, &'a [f64]>,
    banks: &'a MemoryBankSet,
    space: Space,
}

impl FeatureLookup for StepLookup<'_> {
    fn lookup(&self, r: &FeatureRef) -> Option<&[f64]> {
        match r.origin {
            Origin::Batch => self.batch.get(r).copied(),
            Origin::Bank => self.banks.row_for(r, self.space),
        }
    }
}

fn step_lookup<'a>(batch: &StepBatch, fwd: &'a BatchForward, banks: &'a MemoryBankSet, space: Space) -> StepLookup<'a> {
    let mut map = HashMap::new();
    for d in Domain::ALL {
        for (c, f) in batch.clips(d).iter().zip(fwd.domain(d)) {
            for m in Modality::ALL {
                let v: &[f64] = match space {
                    Space::Raw => &f.raw[midx(m)],
                    Space::Projected => f.proj[midx(m)].output(),
                };
                map.insert(FeatureRef::batch(c.clip_id.clone(), m, d), v);
            }
        }
    }
    StepLookup { batch: map, banks, space }
}

/// Loss bundle and parameter gradients of the full objective for fixed
/// batch, plans and banks.
pub fn evaluate_objective(
    model: &TwoStreamModel,
    batch: &StepBatch,
    fwd: &BatchForward,
    plans: &StepPlans,
    banks: &MemoryBankSet,
    cfg: &TrainConfig,
) -> Result<(LossBundle, TwoStreamModel)> {
    let sim = cfg.similarity();
    let lambda = cfg.lambda;
    let mut comps = LossComponents::default();

    // dL/d(logits) and dL/d(raw feature) per clip, per modality.
    let zero_like = |v: &[ClipForward], pick: fn(&ClipForward) -> &[Vec<f64>; 2]| -> Vec<[Vec<f64>; 2]> {
        v.iter()
            .map(|c| {
                let p = pick(c);
                [vec![0.0; p[0].len()], vec![0.0; p[1].len()]]
            })
            .collect()
    };
    let mut d_logits: HashMap<Domain, Vec<[Vec<f64>; 2]>> = HashMap::new();
    let mut d_raw: HashMap<Domain, Vec<[Vec<f64>; 2]>> = HashMap::new();
    let mut d_proj: HashMap<Domain, Vec<[Vec<f64>; 2]>> = HashMap::new();
    for d in Domain::ALL {
        d_logits.insert(d, zero_like(fwd.domain(d), |c| &c.logits));
        d_raw.insert(d, zero_like(fwd.domain(d), |c| &c.raw));
        d_proj.insert(
            d,
            fwd.domain(d)
                .iter()
                .map(|c| [vec![0.0; c.proj[0].output().len()], vec![0.0; c.proj[1].output().len()]])
                .collect(),
        );
    }
    let mut touched_logits = [false; 2];
    let mut touched_raw = [false; 2];
    let mut touched_proj = [false; 2];

    // Supervised source term.
    let b = batch.source.len() as f64;
    {
        let dl = d_logits.get_mut(&Domain::Source).expect("present");
        for (i, (c, f)) in batch.source.iter().zip(&fwd.source).enumerate() {
            let y = c.label.ok_or_else(|| Error::Config(format!("source clip {} has no label", c.clip_id)))?;
            if cfg.per_stream_ce {
                for m in 0..2 {
                    let (l, g) = softmax_cross_entropy(&f.logits[m], y);
                    comps.l_src += l / b;
                    dl[i][m].iter_mut().zip(g).for_each(|(d, v)| *d += v / b);
                }
            } else {
                let (l, g) = softmax_cross_entropy(&f.fused(), y);
                comps.l_src += l / b;
                for m in 0..2 {
                    dl[i][m].iter_mut().zip(&g).for_each(|(d, v)| *d += 0.5 * v / b);
                }
            }
        }
        touched_logits[Domain::Source as usize] = !batch.source.is_empty();
    }

    let index_of = |d: Domain| -> HashMap<&str, usize> {
        batch.clips(d).iter().enumerate().map(|(i, c)| (c.clip_id.as_str(), i)).collect()
    };
    let src_index = index_of(Domain::Source);
    let tgt_index = index_of(Domain::Target);
    let scatter = |grads: &LossGrad, target: &mut HashMap<Domain, Vec<[Vec<f64>; 2]>>, scale: f64| -> Result<[bool; 2]> {
        let mut touched = [false; 2];
        for (r, g) in &grads.grads {
            let idx = match r.domain {
                Domain::Source => &src_index,
                Domain::Target => &tgt_index,
            };
            let i = *idx.get(r.clip_id.as_str()).ok_or_else(|| Error::UnknownClip(r.clip_id.clone()))?;
            let slot = &mut target.get_mut(&r.domain).expect("present")[i][midx(r.modality)];
            slot.iter_mut().zip(g).for_each(|(s, v)| *s += scale * v);
            touched[r.domain as usize] = true;
        }
        Ok(touched)
    };

    if cfg.enable_mo && (plans.mo_source.is_some() || plans.mo_target.is_some()) {
        let lookup = step_lookup(batch, fwd, banks, Space::Projected);
        for (plan, slot) in [(&plans.mo_source, &mut comps.l_mo_s), (&plans.mo_target, &mut comps.l_mo_t)] {
            if let Some(plan) = plan {
                let lg = cross_modal_loss(&lookup, plan, &sim, cfg.nce_form())?;
                *slot = lg.value;
                let t = scatter(&lg, &mut d_proj, lambda)?;
                touched_proj[0] |= t[0];
                touched_proj[1] |= t[1];
            }
        }
    }

    if cfg.enable_do && (plans.do_appearance.is_some() || plans.do_motion.is_some()) {
        let lookup = step_lookup(batch, fwd, banks, Space::Raw);
        for (plan, slot) in [(&plans.do_appearance, &mut comps.l_do_a), (&plans.do_motion, &mut comps.l_do_m)] {
            if let Some(plan) = plan {
                let lg = cross_domain_loss(&lookup, plan, &sim)?;
                *slot = lg.value;
                let t = scatter(&lg, &mut d_raw, lambda)?;
                touched_raw[0] |= t[0];
                touched_raw[1] |= t[1];
            }
        }
    }

    if cfg.enable_self_training_baseline && !plans.records.is_empty() {
        let app: Vec<Vec<f64>> = fwd.target.iter().map(|c| c.logits[0].clone()).collect();
        let mot: Vec<Vec<f64>> = fwd.target.iter().map(|c| c.logits[1].clone()).collect();
        let st = self_training_loss_from_logits(&app, &mot, &plans.records)?;
        comps.l_self_train = st.value;
        let dl = d_logits.get_mut(&Domain::Target).expect("present");
        for (i, (ga, gm)) in st.d_appearance.iter().zip(&st.d_motion).enumerate() {
            dl[i][0].iter_mut().zip(ga).for_each(|(d, v)| *d += lambda * v);
            dl[i][1].iter_mut().zip(gm).for_each(|(d, v)| *d += lambda * v);
        }
        touched_logits[Domain::Target as usize] = true;
    }

    let bundle = total_loss(comps, lambda, cfg.flags());
    if !bundle.is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss bundle {bundle:?}"),
            clip_id: "batch".into(),
        });
    }

    // Backward.
    let mut grad = model.zeros_like();
    for d in Domain::ALL {
        let di = d as usize;
        if !(touched_logits[di] || touched_raw[di] || touched_proj[di]) {
            continue;
        }
        let clips = fwd.domain(d);
        for (i, c) in clips.iter().enumerate() {
            for m in Modality::ALL {
                let mi = midx(m);
                let mut df = d_raw[&d][i][mi].clone();
                if touched_logits[di] {
                    let dx = model.classifier(m).backward(&c.raw[mi], &d_logits[&d][i][mi], grad.classifier_mut(m));
                    df.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                }
                if touched_proj[di] {
                    let dz = &d_proj[&d][i][mi];
                    if dz.iter().any(|v| *v != 0.0) {
                        let dx = model.projection_head.backward(&c.proj[mi], dz, &mut grad.projection_head);
                        df.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                    }
                }
                if df.iter().any(|v| *v != 0.0) {
                    model.encoder(m).backward(&c.traces[mi], &df, grad.encoder_mut(m));
                }
            }
        }
    }
    Ok((bundle, grad))
}

/// Result of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBundle,
    pub accepted: usize,
    pub rejected: usize,
    /// Confidence counts of this step's pseudo-labels in ten equal bins.
    pub confidence_histogram: [usize; 10],
    pub skipped_anchors: usize,
}

fn confidence_bin(c: f64) -> usize {
    ((c * 10.0) as usize).min(9)
}

/// Global L2 norm over every parameter gradient.
pub fn gradient_norm(grad: &TwoStreamModel) -> f64 {
    grad.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn clip_gradient(grad: &mut TwoStreamModel, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = gradient_norm(grad);
    if n > max_norm {
        let s = max_norm / n;
        for (_, t) in grad.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn apply_sgd(state: &mut TrainState, grad: &TwoStreamModel, lr: f64, momentum: f64) {
    match state.velocity.as_mut() {
        Some(vel) if momentum > 0.0 => {
            for ((_, v), (_, g)) in vel.tensors_mut().into_iter().zip(grad.tensors()) {
                v.iter_mut().zip(g).for_each(|(vi, gi)| *vi = momentum * *vi + gi);
            }
            for ((_, p), (_, v)) in state.model.tensors_mut().into_iter().zip(vel.tensors()) {
                p.iter_mut().zip(v).for_each(|(pi, vi)| *pi -= lr * vi);
            }
        }
        _ => {
            for ((_, p), (_, g)) in state.model.tensors_mut().into_iter().zip(grad.tensors()) {
                p.iter_mut().zip(g).for_each(|(pi, gi)| *pi -= lr * gi);
            }
        }
    }
}

fn update_banks(banks: &mut MemoryBankSet, batch: &StepBatch, fwd: &BatchForward, momentum: f64) -> Result<()> {
    for d in Domain::ALL {
        let ids = batch.ids(d);
        for m in Modality::ALL {
            let raw: Vec<Vec<f64>> = fwd.domain(d).iter().map(|c| c.raw[midx(m)].clone()).collect();
            let proj: Vec<Vec<f64>> = fwd.domain(d).iter().map(|c| c.proj[midx(m)].output().to_vec()).collect();
            banks.momentum_update(d, m, Space::Raw, &ids, &raw, momentum)?;
            banks.momentum_update(d, m, Space::Projected, &ids, &proj, momentum)?;
        }
    }
    Ok(())
}

/// Draws pseudo-labels and pairing plans for a forward pass.
pub fn draw_plans(
    state: &mut TrainState,
    batch: &StepBatch,
    fwd: &BatchForward,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<StepPlans> {
    let mut plans = StepPlans::default();
    if cfg.enable_mo {
        for d in Domain::ALL {
            let bank_ids = state.banks.bank(d, Modality::Appearance).ids().to_vec();
            let plan = build_cross_modal_plan(
                &batch.ids(d),
                d,
                &bank_ids,
                cfg.cross_modal_negatives,
                cfg.negative_source,
                &mut state.plan_rng,
            )?;
            match d {
                Domain::Source => plans.mo_source = Some(plan),
                Domain::Target => plans.mo_target = Some(plan),
            }
        }
    }

    let wants_pseudo = cfg.enable_do || cfg.enable_self_training_baseline;
    if wants_pseudo && state.step >= cfg.warmup_steps() {
        let mut records = match (&state.pseudo_cache, cfg.pseudo_label_refresh) {
            (Some(cache), PseudoLabelRefresh::PerEpoch) => batch
                .target
                .iter()
                .map(|c| {
                    cache
                        .get(&c.clip_id)
                        .cloned()
                        .ok_or_else(|| Error::UnknownClip(c.clip_id.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
            _ => records_from_logits(&batch.ids(Domain::Target), &fwd.fused_logits(Domain::Target), cfg.threshold, state.step)?,
        };
        inject_label_noise(&mut records, cfg.pseudo_label_noise, data.shape.num_classes, &mut state.noise_rng);
        if cfg.enable_do {
            for m in Modality::ALL {
                let plan = build_cross_domain_plan(
                    &records,
                    &data.source_index,
                    m,
                    cfg.cross_domain_positives,
                    cfg.cross_domain_negatives,
                    &mut state.plan_rng,
                );
                match m {
                    Modality::Appearance => plans.do_appearance = Some(plan),
                    Modality::Motion => plans.do_motion = Some(plan),
                }
            }
        }
        plans.records = records;
    }
    Ok(plans)
}

/// Samples the next batch of each domain (source windows first).
pub fn next_batch(state: &mut TrainState, data: &TrainingData, cfg: &TrainConfig) -> Result<(StepBatch, bool)> {
    let (src_idx, _) = state.source_sampler.next(cfg.batch_size, &mut state.data_rng);
    let (tgt_idx, new_epoch) = state.target_sampler.next(cfg.batch_size, &mut state.data_rng);
    let src: Vec<&ClipSample> = src_idx.iter().map(|&i| &data.source[i]).collect();
    let tgt: Vec<&ClipSample> = tgt_idx.iter().map(|&i| &data.target[i]).collect();
    let source = sample_batch(&src, cfg.window_length, &mut state.data_rng)?;
    let target = sample_batch(&tgt, cfg.window_length, &mut state.data_rng)?;
    Ok((StepBatch { source, target }, new_epoch))
}

/// One gradient step on a given batch; banks are refreshed afterwards.
pub fn train_step(state: &mut TrainState, batch: &StepBatch, data: &TrainingData, cfg: &TrainConfig) -> Result<StepLog> {
    if batch.source.is_empty() || batch.target.is_empty() {
        return Err(Error::InvalidArgument("train_step needs nonempty batches in both domains".into()));
    }
    let fwd = forward_batch(&state.model, batch)?;
    let plans = draw_plans(state, batch, &fwd, data, cfg)?;
    let (losses, mut grad) = evaluate_objective(&state.model, batch, &fwd, &plans, &state.banks, cfg)?;
    clip_gradient(&mut grad, cfg.max_grad_norm);
    let lr = cfg.learning_rate(state.step);
    apply_sgd(state, &grad, lr, cfg.optimizer_momentum);
    update_banks(&mut state.banks, batch, &fwd, cfg.bank_momentum)?;
    let accepted = plans.records.iter().filter(|r| r.accepted).count();
    let mut confidence_histogram = [0usize; 10];
    for r in &plans.records {
        confidence_histogram[confidence_bin(r.confidence)] += 1;
    }
    let log = StepLog {
        step: state.step,
        lr,
        losses,
        accepted,
        rejected: plans.records.len() - accepted,
        confidence_histogram,
        skipped_anchors: [&plans.do_appearance, &plans.do_motion]
            .iter()
            .filter_map(|p| p.as_ref())
            .map(|p| p.skipped_anchors)
            .sum(),
    };
    state.step += 1;
    Ok(log)
}

/// Plain supervised step on source clips only: per-stream (or fused)
/// cross-entropy, SGD, no banks. Draws windows exactly as [`next_batch`]
/// does for the source half.
pub fn supervised_step(state: &mut TrainState, source: &[&ClipSample], cfg: &TrainConfig) -> Result<f64> {
    let batch = StepBatch {
        source: sample_batch(source, cfg.window_length, &mut state.data_rng)?,
        target: Vec::new(),
    };
    let fwd = forward_batch(&state.model, &batch)?;
    let src_only = TrainConfig {
        enable_mo: false,
        enable_do: false,
        enable_self_training_baseline: false,
        ..cfg.clone()
    };
    let (losses, mut grad) = evaluate_objective(&state.model, &batch, &fwd, &StepPlans::default(), &state.banks, &src_only)?;
    clip_gradient(&mut grad, cfg.max_grad_norm);
    let lr = cfg.learning_rate(state.step);
    apply_sgd(state, &grad, lr, cfg.optimizer_momentum);
    state.step += 1;
    Ok(losses.l_src)
}

/// Accepted/rejected counts and a 10-bin confidence histogram for one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoEpochStats {
    pub epoch: u64,
    pub accepted: usize,
    pub rejected: usize,
    pub confidence_histogram: [usize; 10],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalReport>,
    pub pseudo: Vec<PseudoEpochStats>,
}

impl TrainingHistory {
    /// Mean target top-1 over the last `n` evaluations.
    pub fn final_target_accuracy(&self, n: usize) -> Option<f64> {
        if self.evals.is_empty() {
            return None;
        }
        let tail = &self.evals[self.evals.len().saturating_sub(n)..];
        Some(tail.iter().map(|e| e.top1_target).sum::<f64>() / tail.len() as f64)
    }

    /// Writes `step,l_src,l_mo_s,l_mo_t,l_do_a,l_do_m,l_total,l_self_train`.
    pub fn write_loss_log(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,l_src,l_mo_s,l_mo_t,l_do_a,l_do_m,l_total,l_self_train\n");
        for s in &self.steps {
            let l = &s.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.step, l.l_src, l.l_mo_s, l.l_mo_t, l.l_do_a, l.l_do_m, l.l_total, l.l_self_train
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluation callback invoked during training; it owns whatever labels it
/// needs.
pub type Evaluator<'a> = dyn Fn(&TwoStreamModel, u64) -> Result<EvalReport> + 'a;

fn refresh_pseudo_cache(state: &mut TrainState, data: &TrainingData, cfg: &TrainConfig) -> Result<()> {
    let records = predict_pseudo_labels(&state.model, &data.target, cfg.threshold, state.step)?;
    state.pseudo_cache = Some(records.into_iter().map(|r| (r.clip_id.clone(), r)).collect());
    Ok(())
}

/// Runs steps until `state.step == cfg.total_steps`.
pub fn continue_training(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    evaluator: Option<&Evaluator<'_>>,
    history: &mut TrainingHistory,
) -> Result<()> {
    train_until(state, data, cfg, evaluator, history, cfg.total_steps)
}

/// Like [`continue_training`] but halts once `state.step` reaches `stop`.
/// The schedule (warmup, milestones) still follows `cfg.total_steps`, so a
/// run stopped early and resumed matches one that never stopped.
pub fn train_until(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    evaluator: Option<&Evaluator<'_>>,
    history: &mut TrainingHistory,
    stop: u64,
) -> Result<()> {
    cfg.validate()?;
    let stop = stop.min(cfg.total_steps);
    let mut epoch_stats = PseudoEpochStats {
        epoch: state.target_sampler.epoch,
        ..Default::default()
    };
    let per_epoch = cfg.pseudo_label_refresh == PseudoLabelRefresh::PerEpoch && (cfg.enable_do || cfg.enable_self_training_baseline);
    if per_epoch && state.pseudo_cache.is_none() {
        refresh_pseudo_cache(state, data, cfg)?;
    }
    while state.step < stop {
        let (batch, new_epoch) = next_batch(state, data, cfg)?;
        if new_epoch {
            if epoch_stats.accepted + epoch_stats.rejected > 0 {
                history.pseudo.push(std::mem::take(&mut epoch_stats));
            }
            epoch_stats.epoch = state.target_sampler.epoch;
            if per_epoch {
                refresh_pseudo_cache(state, data, cfg)?;
            }
        }
        let log = train_step(state, &batch, data, cfg)?;
        epoch_stats.accepted += log.accepted;
        epoch_stats.rejected += log.rejected;
        for (h, c) in epoch_stats.confidence_histogram.iter_mut().zip(log.confidence_histogram) {
            *h += c;
        }
        history.steps.push(log);
        let due = cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every);
        if let Some(eval) = evaluator {
            if due || state.step == stop {
                history.evals.push(eval(&state.model, state.step)?);
            }
        }
    }
    if epoch_stats.accepted + epoch_stats.rejected > 0 {
        history.pseudo.push(epoch_stats);
    }
    Ok(())
}

pub fn run_training(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    evaluator: Option<&Evaluator<'_>>,
) -> Result<(TrainState, TrainingHistory)> {
    let mut state = TrainState::new(model_cfg, cfg, data)?;
    let mut history = TrainingHistory::default();
    continue_training(&mut state, data, cfg, evaluator, &mut history)?;
    Ok((state, history))
}
