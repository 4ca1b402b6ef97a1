//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code)]

use contrastive_vda::datagen::{generate_corpus, ClipSample, Corpus, DomainShift, SyntheticSpec};
use contrastive_vda::encoder::{ModelConfig, TwoStreamModel};
use contrastive_vda::trainer::{
    draw_plans, evaluate_objective, forward_batch, next_batch, StepBatch, StepPlans, TrainConfig, TrainState,
    TrainingData,
};
use contrastive_vda::{Domain, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 3,
        clips_per_class_per_domain: 4,
        clip_length: 8,
        frame_size: 6,
        domain_shift: DomainShift::default(),
        seed,
        ..Default::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        conv1_channels: 3,
        conv2_channels: 4,
        feature_dim: 6,
        projection_dim: 4,
    }
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        window_length: 6,
        batch_size: 4,
        total_steps: 20,
        lr_milestones: vec![10],
        cross_modal_negatives: 3,
        cross_domain_positives: 2,
        cross_domain_negatives: 3,
        warmup_fraction: 0.0,
        threshold: 0.3,
        seed,
        ..Default::default()
    }
}

pub fn tiny_corpus(seed: u64) -> Corpus {
    generate_corpus(&tiny_spec(seed)).unwrap()
}

pub fn split(corpus: &Corpus) -> (Vec<ClipSample>, Vec<ClipSample>) {
    (corpus.domain_clips(Domain::Source), corpus.domain_clips(Domain::Target))
}

pub fn tiny_data(corpus: &Corpus, cfg: &TrainConfig) -> TrainingData {
    let (s, t) = split(corpus);
    TrainingData::new(&s, &t, corpus.spec.num_classes, corpus.spec.frame_size, cfg).unwrap()
}

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `exp(cos(x, y) / τ)` computed naively.
pub fn oracle_similarity(x: &[f64], y: &[f64], tau: f64) -> f64 {
    let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut d = 0.0;
    for i in 0..x.len() {
        d += (x[i] / nx) * (y[i] / ny);
    }
    (d / tau).exp()
}

/// `-log(Σ pos / (Σ pos + Σ neg))` with explicit loops.
pub fn oracle_info_nce(anchor: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let mut p = 0.0;
    for v in pos {
        p += oracle_similarity(anchor, v, tau);
    }
    let mut n = 0.0;
    for v in neg {
        n += oracle_similarity(anchor, v, tau);
    }
    -(p / (p + n)).ln()
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub struct Fixture {
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub batch: StepBatch,
    pub plans: StepPlans,
}

pub fn min_feature_norm(model: &TwoStreamModel, batch: &StepBatch) -> f64 {
    let mut min = f64::INFINITY;
    for d in Domain::ALL {
        for c in batch.clips(d) {
            for (w, m) in [(&c.appearance, Modality::Appearance), (&c.motion, Modality::Motion)] {
                let f = model.encode_one(w, m).unwrap().0;
                min = min.min(f.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
    }
    min
}

/// Two source and two target clips with every loss term active. Seeds whose
/// batch has a raw feature near the origin are skipped: normalization is
/// ill-conditioned there and a 1e-4 step can swing the cosine arbitrarily.
pub fn two_clip_fixture(seed: u64) -> Fixture {
    two_clip_fixture_with(seed, |c| c)
}

/// As [`two_clip_fixture`], with `tweak` applied to the training config.
pub fn two_clip_fixture_with(seed: u64, tweak: impl Fn(TrainConfig) -> TrainConfig) -> Fixture {
    for s in seed..seed + 50 {
        let corpus = tiny_corpus(s);
        let cfg = tweak(TrainConfig {
            batch_size: 2,
            threshold: 0.01,
            enable_mo: true,
            enable_do: true,
            ..tiny_train(s)
        });
        let data = tiny_data(&corpus, &cfg);
        let mut state = TrainState::new(&tiny_model(), &cfg, &data).unwrap();
        let (batch, _) = next_batch(&mut state, &data, &cfg).unwrap();
        if min_feature_norm(&state.model, &batch) < 0.1 {
            continue;
        }
        let fwd = forward_batch(&state.model, &batch).unwrap();
        let plans = draw_plans(&mut state, &batch, &fwd, &data, &cfg).unwrap();
        return Fixture { cfg, state, batch, plans };
    }
    panic!("no well-conditioned batch near seed {seed}");
}

pub fn objective(fx: &Fixture, model: &TwoStreamModel) -> f64 {
    let fwd = forward_batch(model, &fx.batch).unwrap();
    evaluate_objective(model, &fx.batch, &fwd, &fx.plans, &fx.state.banks, &fx.cfg)
        .unwrap()
        .0
        .l_total
}

/// Largest relative error between the analytic objective gradient and
/// central differences over `per_tensor` random coordinates of every tensor.
pub fn max_objective_gradient_error(fx: &Fixture, per_tensor: usize, h: f64, seed: u64) -> f64 {
    let fwd = forward_batch(&fx.state.model, &fx.batch).unwrap();
    let (_, grad) = evaluate_objective(&fx.state.model, &fx.batch, &fwd, &fx.plans, &fx.state.banks, &fx.cfg).unwrap();
    let grads: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        for _ in 0..per_tensor {
            let i = rng.random_range(0..g.len());
            let mut plus = fx.state.model.clone();
            plus.tensors_mut()[t].1[i] += h;
            let mut minus = fx.state.model.clone();
            minus.tensors_mut()[t].1[i] -= h;
            let num = (objective(fx, &plus) - objective(fx, &minus)) / (2.0 * h);
            worst = worst.max(relative_error(g[i], num, 1e-6));
        }
    }
    worst
}
