mod common;

use common::{max_objective_gradient_error, two_clip_fixture, two_clip_fixture_with, tiny_corpus, tiny_data, tiny_model, tiny_train};
use contrastive_vda::datagen::{held_out_label_violations, reset_label_audit, ClipSample, EvalScope};
use contrastive_vda::encoder::TwoStreamModel;
use contrastive_vda::membank::Space;
use contrastive_vda::trainer::checkpoint::{decode_checkpoint, encode_checkpoint};
use contrastive_vda::trainer::{
    continue_training, evaluate_objective, forward_batch, next_batch, run_training, supervised_step,
    train_step, StepPlans, TrainConfig, TrainState, TrainingHistory,
};
use contrastive_vda::{Domain, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn full(seed: u64) -> TrainConfig {
    TrainConfig {
        enable_mo: true,
        enable_do: true,
        ..tiny_train(seed)
    }
}

fn flags_off(seed: u64) -> TrainConfig {
    TrainConfig {
        enable_mo: false,
        enable_do: false,
        ..tiny_train(seed)
    }
}

fn models_equal(a: &TwoStreamModel, b: &TwoStreamModel) -> bool {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .all(|((_, x), (_, y))| x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
}

#[test]
fn flags_off_step_is_a_plain_supervised_step() {
    let corpus = tiny_corpus(1);
    let cfg = flags_off(3);
    let data = tiny_data(&corpus, &cfg);
    let mut a = TrainState::new(&tiny_model(), &cfg, &data).unwrap();
    for _ in 0..5 {
        let mut b = a.clone();
        let (batch, _) = next_batch(&mut a, &data, &cfg).unwrap();
        let log = train_step(&mut a, &batch, &data, &cfg).unwrap();

        // Same draws as the source half of `next_batch`.
        let (idx, _) = b.source_sampler.next(cfg.batch_size, &mut b.data_rng);
        b.target_sampler.next(cfg.batch_size, &mut b.data_rng);
        let clips: Vec<&ClipSample> = idx.iter().map(|&i| &data.source[i]).collect();
        let l = supervised_step(&mut b, &clips, &cfg).unwrap();
        assert_eq!(l.to_bits(), log.losses.l_src.to_bits());
        assert!(models_equal(&a.model, &b.model));
        assert_eq!(a.step, b.step);
    }
}

#[test]
fn zero_lambda_matches_flags_off() {
    let corpus = tiny_corpus(2);
    let off = flags_off(5);
    let zero = TrainConfig { lambda: 0.0, ..full(5) };
    let data = tiny_data(&corpus, &off);
    let (a, _) = run_training(&data, &tiny_model(), &off, None).unwrap();
    let (b, hb) = run_training(&data, &tiny_model(), &zero, None).unwrap();
    assert!(models_equal(&a.model, &b.model));
    assert!(hb.steps.iter().any(|s| s.losses.l_mo_s > 0.0));
}

#[test]
fn source_loss_decreases_over_fifty_steps() {
    let corpus = tiny_corpus(3);
    let cfg = TrainConfig {
        total_steps: 50,
        lr_milestones: vec![],
        base_lr: 0.05,
        ..full(1)
    };
    let data = tiny_data(&corpus, &cfg);
    let (_, h) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    let mean = |s: &[contrastive_vda::trainer::StepLog]| s.iter().map(|l| l.losses.l_total).sum::<f64>() / s.len() as f64;
    let first = mean(&h.steps[..10]);
    let last = mean(&h.steps[40..]);
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let corpus = tiny_corpus(4);
    let cfg = TrainConfig { total_steps: 0, lr_milestones: vec![], ..full(2) };
    let data = tiny_data(&corpus, &cfg);
    let init = TrainState::new(&tiny_model(), &cfg, &data).unwrap();
    let evaluator = |_: &TwoStreamModel, _: u64| -> contrastive_vda::Result<_> { unreachable!() };
    let (state, h) = run_training(&data, &tiny_model(), &cfg, Some(&evaluator)).unwrap();
    assert_eq!(state, init);
    assert!(h.steps.is_empty() && h.evals.is_empty());
}

#[test]
fn identical_runs_are_identical() {
    let corpus = tiny_corpus(5);
    let cfg = full(7);
    let data = tiny_data(&corpus, &cfg);
    let (a, ha) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    let (b, hb) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    assert_eq!(ha, hb);
    assert!(models_equal(&a.model, &b.model));
    let (c, _) = run_training(&data, &tiny_model(), &TrainConfig { seed: 8, ..cfg }, None).unwrap();
    assert!(!models_equal(&a.model, &c.model));
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let corpus = tiny_corpus(6);
    for cfg in [full(1), TrainConfig { lambda: 0.7, ..full(2) }, flags_off(3)] {
        let data = tiny_data(&corpus, &cfg);
        let (_, h) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
        for s in &h.steps {
            let l = &s.losses;
            let expect = l.l_src + cfg.lambda * (l.l_mo_s + l.l_mo_t + l.l_do_a + l.l_do_m + l.l_self_train);
            assert!((l.l_total - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn target_labels_never_reach_the_trainer() {
    let corpus = tiny_corpus(7);
    let cfg = full(4);
    let data = tiny_data(&corpus, &cfg);
    assert!(data.target.iter().all(|c| c.label().is_none()));

    // Scrambling the held-out labels leaves the trajectory untouched, and
    // training never reads one.
    let mut scrambled = corpus.clone();
    for c in scrambled.clips.iter_mut().filter(|c| c.domain == Domain::Target) {
        let l = {
            let _scope = EvalScope::enter();
            c.eval_label().unwrap()
        };
        *c = ClipSample::new(
            c.clip_id.clone(),
            c.domain,
            c.frames_appearance.clone(),
            c.frames_motion.clone(),
            Some((l + 1) % corpus.spec.num_classes),
        )
        .unwrap();
    }
    let other = tiny_data(&scrambled, &cfg);
    reset_label_audit();
    let (_, ha) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    let (_, hb) = run_training(&other, &tiny_model(), &cfg, None).unwrap();
    assert_eq!(held_out_label_violations(), 0);
    assert_eq!(ha.steps, hb.steps);
}

#[test]
fn banks_are_refreshed_after_the_step_with_pre_step_features() {
    let corpus = tiny_corpus(8);
    let cfg = full(6);
    let data = tiny_data(&corpus, &cfg);
    let mut state = TrainState::new(&tiny_model(), &cfg, &data).unwrap();
    let (batch, _) = next_batch(&mut state, &data, &cfg).unwrap();
    let before = state.clone();
    train_step(&mut state, &batch, &data, &cfg).unwrap();
    assert!(!models_equal(&before.model, &state.model));
    let delta = cfg.bank_momentum;
    for d in Domain::ALL {
        let clips = batch.clips(d);
        let ids: Vec<String> = clips.iter().map(|c| c.clip_id.clone()).collect();
        for m in Modality::ALL {
            let old = before.banks.lookup(d, m, Space::Raw, &ids).unwrap();
            let new = state.banks.lookup(d, m, Space::Raw, &ids).unwrap();
            for (i, c) in clips.iter().enumerate() {
                let window = match m {
                    Modality::Appearance => &c.appearance,
                    Modality::Motion => &c.motion,
                };
                // Features of the pre-step model, not the updated one.
                let raw = before.model.encode_one(window, m).unwrap().0;
                for k in 0..raw.len() {
                    let expect = delta * old[i][k] + (1.0 - delta) * raw[k];
                    assert!((new[i][k] - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn learning_rate_follows_milestones() {
    let corpus = tiny_corpus(9);
    let cfg = TrainConfig {
        lr_milestones: vec![5, 12],
        lr_decay: 0.5,
        ..flags_off(1)
    };
    let data = tiny_data(&corpus, &cfg);
    let (_, h) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    for s in &h.steps {
        let expect = match s.step {
            0..5 => cfg.base_lr,
            5..12 => cfg.base_lr * 0.5,
            _ => cfg.base_lr * 0.25,
        };
        assert!((s.lr - expect).abs() < 1e-15, "step {}", s.step);
    }
}

#[test]
fn threshold_one_silences_the_cross_domain_loss() {
    let corpus = tiny_corpus(10);
    let cfg = TrainConfig { threshold: 1.0, ..full(3) };
    let data = tiny_data(&corpus, &cfg);
    let (_, h) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    for s in &h.steps {
        assert_eq!(s.losses.l_do_a, 0.0);
        assert_eq!(s.losses.l_do_m, 0.0);
        assert_eq!(s.accepted, 0);
    }
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_one() {
    let corpus = tiny_corpus(11);
    for cfg in [full(9), TrainConfig { optimizer_momentum: 0.9, ..full(10) }] {
        let data = tiny_data(&corpus, &cfg);
        let (whole, hw) = run_training(&data, &tiny_model(), &cfg, None).unwrap();

        let half = TrainConfig { total_steps: 9, ..cfg.clone() };
        let (state, mut h) = run_training(&data, &tiny_model(), &half, None).unwrap();
        let bytes = encode_checkpoint(&state, &tiny_model(), &cfg).unwrap();
        let ckpt = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.state, state);
        assert_eq!(ckpt.train_config, cfg);
        assert_eq!(encode_checkpoint(&ckpt.state, &ckpt.model_config, &ckpt.train_config).unwrap(), bytes);

        let mut resumed = ckpt.state;
        continue_training(&mut resumed, &data, &cfg, None, &mut h).unwrap();
        assert_eq!(h.steps, hw.steps);
        assert_eq!(resumed, whole);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let corpus = tiny_corpus(12);
    let cfg = full(1);
    let data = tiny_data(&corpus, &cfg);
    let state = TrainState::new(&tiny_model(), &cfg, &data).unwrap();
    let bytes = encode_checkpoint(&state, &tiny_model(), &cfg).unwrap();
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
}

#[test]
fn self_training_objective_gradient_matches_finite_differences() {
    let fx = two_clip_fixture_with(3, |c| TrainConfig {
        enable_do: false,
        enable_self_training_baseline: true,
        ..c
    });
    assert!(!fx.plans.records.is_empty());
    let err = max_objective_gradient_error(&fx, 6, 1e-4, 5);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn objective_gradient_matches_finite_differences() {
    for seed in [1, 2] {
        let fx = two_clip_fixture(seed);
        let fwd = forward_batch(&fx.state.model, &fx.batch).unwrap();
        let (losses, _) =
            evaluate_objective(&fx.state.model, &fx.batch, &fwd, &fx.plans, &fx.state.banks, &fx.cfg).unwrap();
        assert!(losses.l_mo_s > 0.0 && losses.l_mo_t > 0.0);
        assert!(losses.l_do_a > 0.0 && losses.l_do_m > 0.0);
        let err = max_objective_gradient_error(&fx, 6, 1e-4, seed);
        assert!(err < 1e-3, "relative error {err}");
    }
}

#[test]
fn projection_head_is_shared_by_both_domains() {
    let fx = two_clip_fixture(3);
    let fwd = forward_batch(&fx.state.model, &fx.batch).unwrap();
    let only = |src: bool| StepPlans {
        mo_source: if src { fx.plans.mo_source.clone() } else { None },
        mo_target: if src { None } else { fx.plans.mo_target.clone() },
        ..Default::default()
    };
    let grad_of = |p: &StepPlans| {
        evaluate_objective(&fx.state.model, &fx.batch, &fwd, p, &fx.state.banks, &fx.cfg).unwrap().1
    };
    let both = StepPlans { do_appearance: None, do_motion: None, records: vec![], ..fx.plans.clone() };
    let (gs, gt, gb) = (grad_of(&only(true)), grad_of(&only(false)), grad_of(&both));
    let head = |g: &TwoStreamModel| -> Vec<f64> {
        g.tensors().into_iter().filter(|(n, _)| n.starts_with("projection_head")).flat_map(|(_, t)| t.clone()).collect()
    };
    let (s, t, b) = (head(&gs), head(&gt), head(&gb));
    assert!(s.iter().any(|v| *v != 0.0) && t.iter().any(|v| *v != 0.0));
    for i in 0..b.len() {
        assert!((b[i] - s[i] - t[i]).abs() < 1e-12);
    }
}

#[test]
fn cross_domain_loss_ignores_the_projection_head() {
    let fx = two_clip_fixture(4);
    let eval = |m: &TwoStreamModel| {
        let fwd = forward_batch(m, &fx.batch).unwrap();
        evaluate_objective(m, &fx.batch, &fwd, &fx.plans, &fx.state.banks, &fx.cfg).unwrap()
    };
    let (a, _) = eval(&fx.state.model);
    let mut reinit = fx.state.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, t) in reinit.tensors_mut() {
        if name.starts_with("projection_head") {
            t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    let (b, _) = eval(&reinit);
    assert_eq!(a.l_do_a.to_bits(), b.l_do_a.to_bits());
    assert_eq!(a.l_do_m.to_bits(), b.l_do_m.to_bits());
    assert_eq!(a.l_src.to_bits(), b.l_src.to_bits());
    assert_ne!(a.l_mo_s, b.l_mo_s);

    // Without the cross-modal term the head receives no gradient at all.
    let no_mo = StepPlans { mo_source: None, mo_target: None, ..fx.plans.clone() };
    let fwd = forward_batch(&fx.state.model, &fx.batch).unwrap();
    let (_, g) = evaluate_objective(&fx.state.model, &fx.batch, &fwd, &no_mo, &fx.state.banks, &fx.cfg).unwrap();
    assert!(g.tensors().iter().filter(|(n, _)| n.starts_with("projection_head")).all(|(_, t)| t.iter().all(|v| *v == 0.0)));
}

#[test]
fn pseudo_label_stats_cover_every_target_step() {
    let corpus = tiny_corpus(13);
    let cfg = full(2);
    let data = tiny_data(&corpus, &cfg);
    let mut state = TrainState::new(&tiny_model(), &cfg, &data).unwrap();
    let mut h = TrainingHistory::default();
    continue_training(&mut state, &data, &cfg, None, &mut h).unwrap();
    let total: usize = h.pseudo.iter().map(|p| p.accepted + p.rejected).sum();
    assert_eq!(total, cfg.batch_size * cfg.total_steps as usize);
    for p in &h.pseudo {
        assert_eq!(p.confidence_histogram.iter().sum::<usize>(), p.accepted + p.rejected);
    }
}
