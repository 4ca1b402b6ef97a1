//! Target accuracy, cross-domain nearest-neighbor retrieval and embedding
//! export.
//!
//! Evaluation always uses the centered window of each clip, so reports are
//! deterministic for a fixed model. Nothing here mutates the model.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClipSample, EvalScope, FeatureFileRecord};
use crate::encoder::TwoStreamModel;
use crate::sampling::{extract_window, WindowPair};
use crate::{argmax, dot, l2_norm, Domain, Error, Modality, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_target: f64,
    pub top1_source: f64,
    /// Target accuracy per class; classes absent from the corpus report 0.
    pub per_class_accuracy: Vec<f64>,
    /// Target-to-source retrieval precision@1, averaged over both modalities.
    pub retrieval_precision_at_1: f64,
    pub step: u64,
}

/// Accuracy of the fused prediction on one set of clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub evaluated: usize,
}

/// Centered-window outputs of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipOutputs {
    pub clip_id: String,
    pub domain: Domain,
    /// Raw encoder features, indexed by modality.
    pub raw: [Vec<f64>; 2],
    /// Projected features, indexed by modality.
    pub projected: [Vec<f64>; 2],
    pub fused_logits: Vec<f64>,
}

/// Runs both streams on the centered window of every clip.
pub fn clip_outputs(model: &TwoStreamModel, clips: &[ClipSample]) -> Result<Vec<ClipOutputs>> {
    let wl = model.shape.window_length;
    clips
        .par_iter()
        .map(|clip| {
            if clip.clip_length() < wl {
                return Err(Error::ClipTooShort {
                    clip_id: clip.clip_id.clone(),
                    length: clip.clip_length(),
                    window: wl,
                });
            }
            let pair = WindowPair::centered(clip.clip_length(), wl);
            let fa = model.encode_one(&extract_window(clip, &pair, Modality::Appearance), Modality::Appearance)?.0;
            let fm = model.encode_one(&extract_window(clip, &pair, Modality::Motion), Modality::Motion)?.0;
            let projected = [
                model.projection_head.forward(&fa).output().to_vec(),
                model.projection_head.forward(&fm).output().to_vec(),
            ];
            let la = model.classifier_appearance.forward(&fa);
            let lm = model.classifier_motion.forward(&fm);
            let fused_logits = la.iter().zip(&lm).map(|(a, b)| 0.5 * (a + b)).collect();
            Ok(ClipOutputs {
                clip_id: clip.clip_id.clone(),
                domain: clip.domain,
                raw: [fa, fm],
                projected,
                fused_logits,
            })
        })
        .collect()
}

/// Ground-truth labels for evaluation, read inside an [`EvalScope`].
pub fn eval_labels(clips: &[ClipSample]) -> Vec<Option<usize>> {
    let _scope = EvalScope::enter();
    clips.iter().map(ClipSample::eval_label).collect()
}

fn accuracy_from(preds: &[usize], labels: &[Option<usize>], num_classes: usize) -> Result<DomainAccuracy> {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (p, l) in preds.iter().zip(labels) {
        if let Some(l) = *l {
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!("label {l} outside 0..{num_classes}")));
            }
            totals[l] += 1;
            if *p == l {
                hits[l] += 1;
            }
        }
    }
    let evaluated: usize = totals.iter().sum();
    if evaluated == 0 {
        return Err(Error::InvalidArgument("no labeled clips to evaluate".into()));
    }
    Ok(DomainAccuracy {
        top1: hits.iter().sum::<usize>() as f64 / evaluated as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        evaluated,
    })
}

/// Top-1 accuracy of the fused logits on the clips of `domain`.
pub fn evaluate(model: &TwoStreamModel, clips: &[ClipSample], domain: Domain) -> Result<DomainAccuracy> {
    let selected: Vec<ClipSample> = clips.iter().filter(|c| c.domain == domain).cloned().collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!("no {domain} clips to evaluate")));
    }
    let outputs = clip_outputs(model, &selected)?;
    let preds: Vec<usize> = outputs.iter().map(|o| argmax(&o.fused_logits)).collect();
    accuracy_from(&preds, &eval_labels(&selected), model.shape.num_classes)
}

/// Full report: accuracy on both domains and target-to-source retrieval.
pub fn eval_report(model: &TwoStreamModel, source: &[ClipSample], target: &[ClipSample], step: u64) -> Result<EvalReport> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs clips in both domains".into()));
    }
    let src_out = clip_outputs(model, source)?;
    let tgt_out = clip_outputs(model, target)?;
    let src_labels = eval_labels(source);
    let tgt_labels = eval_labels(target);
    let c = model.shape.num_classes;
    let pred = |o: &[ClipOutputs]| o.iter().map(|x| argmax(&x.fused_logits)).collect::<Vec<_>>();
    let src_acc = accuracy_from(&pred(&src_out), &src_labels, c)?;
    let tgt_acc = accuracy_from(&pred(&tgt_out), &tgt_labels, c)?;

    let mut p1 = 0.0;
    for m in Modality::ALL {
        let q = records_from_outputs(&tgt_out, &tgt_labels, m);
        let g = records_from_outputs(&src_out, &src_labels, m);
        p1 += retrieve(&q, &g, 1)?.precision_at_1;
    }
    Ok(EvalReport {
        top1_target: tgt_acc.top1,
        top1_source: src_acc.top1,
        per_class_accuracy: tgt_acc.per_class,
        retrieval_precision_at_1: p1 / 2.0,
        step,
    })
}

fn records_from_outputs(outputs: &[ClipOutputs], labels: &[Option<usize>], m: Modality) -> Vec<FeatureFileRecord> {
    outputs
        .iter()
        .zip(labels)
        .map(|(o, l)| FeatureFileRecord {
            clip_id: o.clip_id.clone(),
            domain: o.domain,
            modality: m,
            label: *l,
            vector: o.raw[m as usize].clone(),
        })
        .collect()
}

/// Raw centered-window features of one modality, with evaluation labels.
pub fn feature_records(model: &TwoStreamModel, clips: &[ClipSample], modality: Modality) -> Result<Vec<FeatureFileRecord>> {
    let outputs = clip_outputs(model, clips)?;
    Ok(records_from_outputs(&outputs, &eval_labels(clips), modality))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub clip_id: String,
    pub label: Option<usize>,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub query_label: Option<usize>,
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub lists: Vec<RankedList>,
    /// Fraction of labeled queries whose top hit shares their label.
    pub precision_at_1: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Ranks `gallery` for each query by cosine similarity, keeping the top `k`.
/// Equal scores are ordered by clip id.
pub fn retrieve(queries: &[FeatureFileRecord], gallery: &[FeatureFileRecord], k: usize) -> Result<RetrievalResult> {
    if k == 0 || k > gallery.len() {
        return Err(Error::InvalidArgument(format!("k = {k} but the gallery holds {} clips", gallery.len())));
    }
    let mut correct = 0usize;
    let mut labeled = 0usize;
    let mut lists = Vec::with_capacity(queries.len());
    for q in queries {
        let mut hits: Vec<RetrievalHit> = gallery
            .iter()
            .map(|g| {
                if g.vector.len() != q.vector.len() {
                    return Err(Error::DimensionMismatch {
                        expected: q.vector.len(),
                        found: g.vector.len(),
                    });
                }
                Ok(RetrievalHit {
                    clip_id: g.clip_id.clone(),
                    label: g.label,
                    cosine: cosine(&q.vector, &g.vector),
                })
            })
            .collect::<Result<_>>()?;
        hits.sort_by(|a, b| match b.cosine.total_cmp(&a.cosine) {
            Ordering::Equal => a.clip_id.cmp(&b.clip_id),
            o => o,
        });
        hits.truncate(k);
        if let Some(ql) = q.label {
            labeled += 1;
            if hits[0].label == Some(ql) {
                correct += 1;
            }
        }
        lists.push(RankedList {
            query_id: q.clip_id.clone(),
            query_label: q.label,
            hits,
        });
    }
    Ok(RetrievalResult {
        lists,
        precision_at_1: if labeled == 0 { 0.0 } else { correct as f64 / labeled as f64 },
    })
}

/// Nearest `gallery` clips for every `queries` clip in one modality's raw
/// feature space.
pub fn cross_domain_retrieve(
    model: &TwoStreamModel,
    queries: &[ClipSample],
    gallery: &[ClipSample],
    modality: Modality,
    k: usize,
) -> Result<RetrievalResult> {
    if k == 0 || k > gallery.len() {
        return Err(Error::InvalidArgument(format!("k = {k} but the gallery holds {} clips", gallery.len())));
    }
    let q = feature_records(model, queries, modality)?;
    let g = feature_records(model, gallery, modality)?;
    retrieve(&q, &g, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    /// Raw encoder output.
    Pre,
    /// Projection-head output.
    Post,
}

impl EmbeddingSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingSpace::Pre => "pre",
            EmbeddingSpace::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pre" => Some(EmbeddingSpace::Pre),
            "post" => Some(EmbeddingSpace::Post),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub clip_id: String,
    pub domain: Domain,
    pub modality: Modality,
    pub class: Option<usize>,
    pub space: EmbeddingSpace,
    pub vector: Vec<f64>,
}

/// Embeddings of every clip and modality in each requested space.
pub fn embed(model: &TwoStreamModel, clips: &[ClipSample], spaces: &[EmbeddingSpace]) -> Result<Vec<EmbeddingRow>> {
    let outputs = clip_outputs(model, clips)?;
    let labels = eval_labels(clips);
    let mut rows = Vec::with_capacity(outputs.len() * 2 * spaces.len());
    for &space in spaces {
        for (o, l) in outputs.iter().zip(&labels) {
            for m in Modality::ALL {
                let vector = match space {
                    EmbeddingSpace::Pre => o.raw[m as usize].clone(),
                    EmbeddingSpace::Post => o.projected[m as usize].clone(),
                };
                rows.push(EmbeddingRow {
                    clip_id: o.clip_id.clone(),
                    domain: o.domain,
                    modality: m,
                    class: *l,
                    space,
                    vector,
                });
            }
        }
    }
    Ok(rows)
}

const DUMP_PREFIX: [&str; 5] = ["clip_id", "domain", "modality", "class", "space"];

/// Writes rows of one space as `clip_id,domain,modality,class,space,d0..`.
pub fn write_embedding_dump(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    if let Some(bad) = rows.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.vector.len(),
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = DUMP_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.clip_id.clone(),
            r.domain.to_string(),
            r.modality.to_string(),
            r.class.map(|c| c.to_string()).unwrap_or_default(),
            r.space.as_str().to_string(),
        ];
        rec.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_embedding_dump(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < DUMP_PREFIX.len() || header.iter().zip(DUMP_PREFIX).any(|(a, b)| a != b) {
        return Err(Error::Malformed {
            line: 1,
            reason: "header must start with clip_id,domain,modality,class,space".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| Error::Malformed { line: i + 2, reason };
        rows.push(EmbeddingRow {
            clip_id: rec[0].to_string(),
            domain: Domain::parse(&rec[1]).ok_or_else(|| bad(format!("unknown domain {:?}", &rec[1])))?,
            modality: Modality::parse(&rec[2]).ok_or_else(|| bad(format!("unknown modality {:?}", &rec[2])))?,
            class: match &rec[3] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(format!("invalid class {s:?}")))?),
            },
            space: EmbeddingSpace::parse(&rec[4]).ok_or_else(|| bad(format!("unknown space {:?}", &rec[4])))?,
            vector: rec
                .iter()
                .skip(DUMP_PREFIX.len())
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("invalid number {s:?}"))))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Writes `embeddings_pre.csv` and/or `embeddings_post.csv` into `dir` and
/// returns the paths written.
pub fn dump_embeddings(
    model: &TwoStreamModel,
    clips: &[ClipSample],
    spaces: &[EmbeddingSpace],
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = embed(model, clips, spaces)?;
    let mut written = Vec::new();
    for &space in spaces {
        let path = dir.join(format!("embeddings_{}.csv", space.as_str()));
        let subset: Vec<EmbeddingRow> = rows.iter().filter(|r| r.space == space).cloned().collect();
        write_embedding_dump(&path, &subset)?;
        written.push(path);
    }
    Ok(written)
}

/// Cross-modal alignment in one space: mean cosine between a clip's two
/// modality embeddings minus mean cosine between appearance and motion
/// embeddings of different clips of the same domain.
pub fn modality_alignment(rows: &[EmbeddingRow], space: EmbeddingSpace) -> Result<f64> {
    let mut pos = (0.0, 0usize);
    let mut neg = (0.0, 0usize);
    for d in Domain::ALL {
        let app: Vec<&EmbeddingRow> = rows
            .iter()
            .filter(|r| r.space == space && r.domain == d && r.modality == Modality::Appearance)
            .collect();
        let mot: Vec<&EmbeddingRow> = rows
            .iter()
            .filter(|r| r.space == space && r.domain == d && r.modality == Modality::Motion)
            .collect();
        for a in &app {
            for m in &mot {
                let c = cosine(&a.vector, &m.vector);
                let acc = if a.clip_id == m.clip_id { &mut pos } else { &mut neg };
                acc.0 += c;
                acc.1 += 1;
            }
        }
    }
    if pos.1 == 0 || neg.1 == 0 {
        return Err(Error::InvalidArgument("need at least two clips with both modalities".into()));
    }
    Ok(pos.0 / pos.1 as f64 - neg.0 / neg.1 as f64)
}

/// Cross-domain class alignment in one space: mean cosine between target and
/// source embeddings (same modality) of the same class minus that of
/// different classes.
pub fn class_alignment(rows: &[EmbeddingRow], space: EmbeddingSpace) -> Result<f64> {
    let mut same = (0.0, 0usize);
    let mut diff = (0.0, 0usize);
    let pick = |d: Domain| -> Vec<&EmbeddingRow> {
        rows.iter()
            .filter(|r| r.space == space && r.domain == d && r.class.is_some())
            .collect()
    };
    let src = pick(Domain::Source);
    let tgt = pick(Domain::Target);
    for t in &tgt {
        for s in src.iter().filter(|s| s.modality == t.modality) {
            let c = cosine(&t.vector, &s.vector);
            let acc = if t.class == s.class { &mut same } else { &mut diff };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    if same.1 == 0 || diff.1 == 0 {
        return Err(Error::InvalidArgument("need labeled clips of several classes in both domains".into()));
    }
    Ok(same.0 / same.1 as f64 - diff.0 / diff.1 as f64)
}
