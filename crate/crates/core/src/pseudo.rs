//! Confidence-thresholded pseudo-labels for target clips, and the hard
//! pseudo-label self-training loss used as a baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ClipSample;
use crate::encoder::TwoStreamModel;
use crate::losses::{softmax, softmax_cross_entropy};
use crate::sampling::{extract_window, WindowPair};
use crate::{argmax, Error, Modality, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub clip_id: String,
    pub predicted_class: usize,
    /// Max softmax probability of the fused prediction.
    pub confidence: f64,
    /// `confidence > T`.
    pub accepted: bool,
    pub step_created: u64,
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1], got {threshold}")));
    }
    Ok(())
}

/// Records from fused logits; a record is accepted iff its top softmax
/// probability strictly exceeds `threshold`.
pub fn records_from_logits(
    clip_ids: &[String],
    fused_logits: &[Vec<f64>],
    threshold: f64,
    step: u64,
) -> Result<Vec<PseudoLabelRecord>> {
    check_threshold(threshold)?;
    if clip_ids.len() != fused_logits.len() {
        return Err(Error::Shape(format!("{} ids but {} logit rows", clip_ids.len(), fused_logits.len())));
    }
    Ok(clip_ids
        .iter()
        .zip(fused_logits)
        .map(|(id, logits)| record_from_probs(id, &softmax(logits), threshold, step))
        .collect())
}

fn record_from_probs(clip_id: &str, probs: &[f64], threshold: f64, step: u64) -> PseudoLabelRecord {
    let predicted_class = argmax(probs);
    let confidence = probs[predicted_class].clamp(0.0, 1.0);
    PseudoLabelRecord {
        clip_id: clip_id.to_string(),
        predicted_class,
        confidence,
        accepted: confidence > threshold,
        step_created: step,
    }
}

/// Predicts every clip from its centered windows. Read-only over the model.
pub fn predict_pseudo_labels(
    model: &TwoStreamModel,
    target_clips: &[ClipSample],
    threshold: f64,
    step: u64,
) -> Result<Vec<PseudoLabelRecord>> {
    check_threshold(threshold)?;
    let wl = model.shape.window_length;
    let mut ids = Vec::with_capacity(target_clips.len());
    let mut f_app = Vec::with_capacity(target_clips.len());
    let mut f_mot = Vec::with_capacity(target_clips.len());
    for clip in target_clips {
        if clip.clip_length() < wl {
            return Err(Error::ClipTooShort {
                clip_id: clip.clip_id.clone(),
                length: clip.clip_length(),
                window: wl,
            });
        }
        let pair = WindowPair::centered(clip.clip_length(), wl);
        f_app.push(model.encode_one(&extract_window(clip, &pair, Modality::Appearance), Modality::Appearance)?.0);
        f_mot.push(model.encode_one(&extract_window(clip, &pair, Modality::Motion), Modality::Motion)?.0);
        ids.push(clip.clip_id.clone());
    }
    let logits = model.classify(&f_app, &f_mot)?;
    records_from_logits(&ids, &logits.fused, threshold, step)
}

/// Replaces each accepted record's class, with probability `fraction`, by a
/// uniformly drawn different class.
pub fn inject_label_noise<R: Rng + ?Sized>(records: &mut [PseudoLabelRecord], fraction: f64, num_classes: usize, rng: &mut R) {
    if fraction <= 0.0 || num_classes < 2 {
        return;
    }
    for r in records.iter_mut().filter(|r| r.accepted) {
        if rng.random_bool(fraction.min(1.0)) {
            let shift = rng.random_range(1..num_classes);
            r.predicted_class = (r.predicted_class + shift) % num_classes;
        }
    }
}

/// Hard pseudo-label cross-entropy on per-stream logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainingLoss {
    pub value: f64,
    /// Row-aligned with the input logits; zero rows for unaccepted clips.
    pub d_appearance: Vec<Vec<f64>>,
    pub d_motion: Vec<Vec<f64>>,
}

/// Mean over accepted records of the summed per-stream cross-entropy against
/// the pseudo-label. `records[i]` must describe logit row `i`. Zero when
/// nothing is accepted.
pub fn self_training_loss_from_logits(
    appearance: &[Vec<f64>],
    motion: &[Vec<f64>],
    records: &[PseudoLabelRecord],
) -> Result<SelfTrainingLoss> {
    if appearance.len() != records.len() || motion.len() != records.len() {
        return Err(Error::Shape("records and logits must be row-aligned".into()));
    }
    let zeros = |rows: &[Vec<f64>]| rows.iter().map(|r| vec![0.0; r.len()]).collect::<Vec<_>>();
    let mut out = SelfTrainingLoss {
        value: 0.0,
        d_appearance: zeros(appearance),
        d_motion: zeros(motion),
    };
    let accepted = records.iter().filter(|r| r.accepted).count();
    if accepted == 0 {
        return Ok(out);
    }
    let scale = 1.0 / accepted as f64;
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.accepted) {
        for (logits, grad) in [(&appearance[i], &mut out.d_appearance[i]), (&motion[i], &mut out.d_motion[i])] {
            let (l, g) = softmax_cross_entropy(logits, r.predicted_class);
            out.value += scale * l;
            grad.iter_mut().zip(g).for_each(|(d, v)| *d = scale * v);
        }
    }
    Ok(out)
}

/// Self-training loss of `model` on the accepted clips, using centered
/// windows.
pub fn self_training_loss(model: &TwoStreamModel, clips: &[ClipSample], records: &[PseudoLabelRecord]) -> Result<f64> {
    let accepted: Vec<&PseudoLabelRecord> = records.iter().filter(|r| r.accepted).collect();
    if accepted.is_empty() {
        return Ok(0.0);
    }
    let wl = model.shape.window_length;
    let mut f_app = Vec::new();
    let mut f_mot = Vec::new();
    for r in &accepted {
        let clip = clips
            .iter()
            .find(|c| c.clip_id == r.clip_id)
            .ok_or_else(|| Error::UnknownClip(r.clip_id.clone()))?;
        let pair = WindowPair::centered(clip.clip_length(), wl);
        f_app.push(model.encode_one(&extract_window(clip, &pair, Modality::Appearance), Modality::Appearance)?.0);
        f_mot.push(model.encode_one(&extract_window(clip, &pair, Modality::Motion), Modality::Motion)?.0);
    }
    let logits = model.classify(&f_app, &f_mot)?;
    let owned: Vec<PseudoLabelRecord> = accepted.into_iter().cloned().collect();
    Ok(self_training_loss_from_logits(&logits.appearance, &logits.motion, &owned)?.value)
}
