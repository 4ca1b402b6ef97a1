mod common;

use common::{split, tiny_corpus, tiny_data, tiny_model, tiny_train};
use contrastive_vda::datagen::{
    generate_corpus, held_out_label_violations, load_feature_file, reset_label_audit, write_feature_file, ClipSample,
    FeatureFileRecord, SyntheticSpec,
};
use contrastive_vda::encoder::{ModelConfig, TwoStreamModel};
use contrastive_vda::evalviz::{
    clip_outputs, dump_embeddings, eval_report, evaluate, feature_records, modality_alignment, read_embedding_dump,
    retrieve, EmbeddingSpace,
};
use contrastive_vda::trainer::{run_training, TrainConfig, TrainState};
use contrastive_vda::{Domain, Modality};
use proptest::prelude::*;

fn trained(seed: u64) -> (TwoStreamModel, Vec<ClipSample>, Vec<ClipSample>) {
    let corpus = tiny_corpus(seed);
    let cfg = TrainConfig {
        enable_mo: true,
        enable_do: true,
        ..tiny_train(seed)
    };
    let data = tiny_data(&corpus, &cfg);
    let (state, _) = run_training(&data, &tiny_model(), &cfg, None).unwrap();
    let (s, t) = split(&corpus);
    (state.model, s, t)
}

#[test]
fn constant_logits_score_chance() {
    let (mut model, source, target) = trained(1);
    for m in [Modality::Appearance, Modality::Motion] {
        let c = model.classifier_mut(m);
        c.weight.iter_mut().for_each(|v| *v = 0.0);
        c.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    // Every prediction ties and resolves to class 0; classes are balanced.
    for (clips, d) in [(&source, Domain::Source), (&target, Domain::Target)] {
        let acc = evaluate(&model, clips, d).unwrap();
        assert!((acc.top1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc.per_class, vec![1.0, 0.0, 0.0]);
        assert_eq!(acc.evaluated, clips.len());
    }
}

#[test]
fn accuracy_agrees_with_per_clip_predictions() {
    let (model, _, target) = trained(2);
    let outs = clip_outputs(&model, &target).unwrap();
    let preds: Vec<usize> = outs.iter().map(|o| contrastive_vda::argmax(&o.fused_logits)).collect();
    let labels = contrastive_vda::evalviz::eval_labels(&target);
    let hits = preds.iter().zip(&labels).filter(|(p, l)| Some(**p) == **l).count();
    let acc = evaluate(&model, &target, Domain::Target).unwrap();
    assert!((acc.top1 - hits as f64 / target.len() as f64).abs() < 1e-12);
}

#[test]
fn evaluation_is_side_effect_free() {
    let (model, source, target) = trained(3);
    let copy = model.clone();
    reset_label_audit();
    let a = eval_report(&model, &source, &target, 7).unwrap();
    let b = eval_report(&model, &source, &target, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, copy);
    assert_eq!(held_out_label_violations(), 0);
    assert_eq!(a.step, 7);
    assert!((0.0..=1.0).contains(&a.top1_target) && (0.0..=1.0).contains(&a.retrieval_precision_at_1));
    assert!(evaluate(&model, &target, Domain::Source).is_err());
}

#[test]
fn embedding_dumps_have_one_row_per_clip_and_modality() {
    let (model, source, target) = trained(4);
    let all: Vec<ClipSample> = source.iter().chain(&target).cloned().collect();
    let dir = tempfile::tempdir().unwrap();
    let written = dump_embeddings(&model, &all, &[EmbeddingSpace::Pre, EmbeddingSpace::Post], dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    let pre = read_embedding_dump(&dir.path().join("embeddings_pre.csv")).unwrap();
    let post = read_embedding_dump(&dir.path().join("embeddings_post.csv")).unwrap();
    assert_eq!(pre.len(), 2 * all.len());
    assert_eq!(post.len(), 2 * all.len());
    assert!(pre.iter().all(|r| r.vector.len() == model.feature_dim() && r.space == EmbeddingSpace::Pre));
    for r in &post {
        assert_eq!(r.vector.len(), model.projection_dim());
        let n: f64 = r.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    // Target rows carry their class for plotting, read under an eval scope.
    assert!(post.iter().filter(|r| r.domain == Domain::Target).all(|r| r.class.is_some()));
    assert!(modality_alignment(&post, EmbeddingSpace::Post).unwrap().is_finite());
}

#[test]
fn feature_files_round_trip_byte_exactly() {
    let (model, source, _) = trained(5);
    let records = feature_records(&model, &source, Modality::Motion).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.csv");
    let p2 = dir.path().join("b.csv");
    write_feature_file(&p1, &records).unwrap();
    let back = load_feature_file(&p1).unwrap();
    assert_eq!(back, records);
    write_feature_file(&p2, &back).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_feature_values_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..40)) {
        let dim = 4;
        let records: Vec<FeatureFileRecord> = values
            .chunks(dim)
            .filter(|c| c.len() == dim)
            .enumerate()
            .map(|(i, c)| FeatureFileRecord {
                clip_id: format!("c{i}"),
                domain: if i % 2 == 0 { Domain::Source } else { Domain::Target },
                modality: Modality::Appearance,
                label: (i % 3 != 0).then_some(i % 4),
                vector: c.to_vec(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_feature_file(&p, &records).unwrap();
        let back = load_feature_file(&p).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(&a.clip_id, &b.clip_id);
            prop_assert_eq!(a.label, b.label);
            prop_assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn retrieval_against_itself_finds_each_query_first() {
    let (model, _, target) = trained(6);
    let records = feature_records(&model, &target, Modality::Appearance).unwrap();
    let res = retrieve(&records, &records, 3).unwrap();
    for list in &res.lists {
        assert_eq!(list.hits[0].clip_id, list.query_id);
        assert!((list.hits[0].cosine - 1.0).abs() < 1e-9);
        assert!(list.hits.windows(2).all(|w| w[0].cosine >= w[1].cosine));
    }
    assert!((res.precision_at_1 - 1.0).abs() < 1e-12);
    assert!(retrieve(&records, &records, 0).is_err());
    assert!(retrieve(&records, &records, records.len() + 1).is_err());
}

/// Training directly on labeled target clips bounds what adaptation can
/// reach; it should do at least as well as training on the source.
#[test]
fn supervised_target_training_is_an_upper_bound() {
    let spec = SyntheticSpec {
        num_classes: 3,
        clips_per_class_per_domain: 12,
        clip_length: 10,
        frame_size: 8,
        seed: 21,
        ..Default::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let (source, target) = split(&corpus);
    let labels = contrastive_vda::evalviz::eval_labels(&target);
    let as_source: Vec<ClipSample> = target
        .iter()
        .zip(&labels)
        .map(|(c, l)| {
            ClipSample::new(
                format!("{}-as-source", c.clip_id),
                Domain::Source,
                c.frames_appearance.clone(),
                c.frames_motion.clone(),
                *l,
            )
            .unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        total_steps: 300,
        lr_milestones: vec![200],
        base_lr: 0.05,
        batch_size: 6,
        window_length: 8,
        max_grad_norm: 5.0,
        enable_mo: false,
        enable_do: false,
        ..tiny_train(0)
    };
    let score = |train_source: &[ClipSample]| {
        let data = contrastive_vda::trainer::TrainingData::new(train_source, &target, 3, 8, &cfg).unwrap();
        let mut state = TrainState::new(&ModelConfig::default(), &cfg, &data).unwrap();
        let mut h = Default::default();
        contrastive_vda::trainer::continue_training(&mut state, &data, &cfg, None, &mut h).unwrap();
        evaluate(&state.model, &target, Domain::Target).unwrap().top1
    };
    let oracle = score(&as_source);
    let baseline = score(&source);
    assert!(oracle >= baseline, "oracle {oracle} baseline {baseline}");
    assert!(oracle > 0.6, "oracle {oracle}");
}
