//! Window extraction and positive/negative pairing plans.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ClipSample;
use crate::encoder::ClipWindow;
use crate::pseudo::PseudoLabelRecord;
use crate::{Domain, Error, Modality, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPair {
    pub appearance_start: usize,
    pub motion_start: usize,
    pub window_length: usize,
}

impl WindowPair {
    pub fn start(&self, modality: Modality) -> usize {
        match modality {
            Modality::Appearance => self.appearance_start,
            Modality::Motion => self.motion_start,
        }
    }

    /// Both modalities start at the center of the clip.
    pub fn centered(clip_length: usize, window_length: usize) -> Self {
        let start = (clip_length - window_length) / 2;
        Self {
            appearance_start: start,
            motion_start: start,
            window_length,
        }
    }
}

/// Draws the two start offsets independently and uniformly over the valid
/// range.
pub fn sample_window_pair<R: Rng + ?Sized>(clip: &ClipSample, window_length: usize, rng: &mut R) -> Result<WindowPair> {
    let len = clip.clip_length();
    if len < window_length || window_length == 0 {
        return Err(Error::ClipTooShort {
            clip_id: clip.clip_id.clone(),
            length: len,
            window: window_length,
        });
    }
    let max_start = len - window_length;
    Ok(WindowPair {
        appearance_start: rng.random_range(0..=max_start),
        motion_start: rng.random_range(0..=max_start),
        window_length,
    })
}

/// Cuts the window of `modality` out of `clip`.
pub fn extract_window(clip: &ClipSample, pair: &WindowPair, modality: Modality) -> ClipWindow {
    ClipWindow {
        clip_id: clip.clip_id.clone(),
        length: pair.window_length,
        data: clip.frames(modality).window_channel_major(pair.start(modality), pair.window_length),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Feature computed in the current step; gradients flow into it.
    Batch,
    /// Memory-bank entry; treated as a constant.
    Bank,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureRef {
    pub clip_id: String,
    pub modality: Modality,
    pub domain: Domain,
    pub origin: Origin,
}

impl FeatureRef {
    pub fn batch(clip_id: impl Into<String>, modality: Modality, domain: Domain) -> Self {
        Self {
            clip_id: clip_id.into(),
            modality,
            domain,
            origin: Origin::Batch,
        }
    }

    pub fn bank(clip_id: impl Into<String>, modality: Modality, domain: Domain) -> Self {
        Self {
            clip_id: clip_id.into(),
            modality,
            domain,
            origin: Origin::Bank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub anchor: FeatureRef,
    pub positives: Vec<FeatureRef>,
    pub negatives: Vec<FeatureRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    CrossModal,
    CrossDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingPlan {
    pub kind: PlanKind,
    pub entries: Vec<PlanEntry>,
    /// Anchors dropped because their pseudo-class had no source clips.
    pub skipped_anchors: usize,
}

impl PairingPlan {
    pub fn empty(kind: PlanKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            skipped_anchors: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Where cross-modal negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Batch,
    Bank,
    Both,
}

impl NegativeSource {
    fn uses_batch(self) -> bool {
        matches!(self, NegativeSource::Batch | NegativeSource::Both)
    }

    fn uses_bank(self) -> bool {
        matches!(self, NegativeSource::Bank | NegativeSource::Both)
    }
}

/// Plan for the within-domain cross-modal loss. Every (clip, modality) in
/// the batch is an anchor; its positive is the other modality of the same
/// clip; negatives are the other modality of other clips, taken from the
/// batch and/or `bank_negatives` ids drawn from `bank_ids` (ids in the
/// batch are never drawn from the bank). Labels are never consulted.
pub fn build_cross_modal_plan<R: Rng + ?Sized>(
    batch_ids: &[String],
    domain: Domain,
    bank_ids: &[String],
    bank_negatives: usize,
    source: NegativeSource,
    rng: &mut R,
) -> Result<PairingPlan> {
    if batch_ids.len() < 2 {
        return Err(Error::Plan("cross-modal plan needs at least two clips in the batch".into()));
    }
    let in_batch: HashSet<&str> = batch_ids.iter().map(String::as_str).collect();
    let drawn: Vec<&String> = if source.uses_bank() {
        let pool: Vec<&String> = bank_ids.iter().filter(|id| !in_batch.contains(id.as_str())).collect();
        pool.choose_multiple(rng, bank_negatives.min(pool.len())).copied().collect()
    } else {
        Vec::new()
    };

    let mut entries = Vec::with_capacity(2 * batch_ids.len());
    for id in batch_ids {
        for modality in Modality::ALL {
            let other = modality.other();
            let mut negatives = Vec::new();
            if source.uses_batch() {
                negatives.extend(
                    batch_ids
                        .iter()
                        .filter(|j| *j != id)
                        .map(|j| FeatureRef::batch(j.clone(), other, domain)),
                );
            }
            negatives.extend(drawn.iter().map(|j| FeatureRef::bank((*j).clone(), other, domain)));
            if negatives.is_empty() {
                return Err(Error::Plan(format!("no negatives available for clip {id}")));
            }
            entries.push(PlanEntry {
                anchor: FeatureRef::batch(id.clone(), modality, domain),
                positives: vec![FeatureRef::batch(id.clone(), other, domain)],
                negatives,
            });
        }
    }
    Ok(PairingPlan {
        kind: PlanKind::CrossModal,
        entries,
        skipped_anchors: 0,
    })
}

/// Plan for the cross-domain loss of one modality. Each accepted target
/// record anchors on its own batch feature; positives are up to
/// `max_positives` source bank entries of the pseudo-class, negatives up to
/// `max_negatives` source bank entries of other classes.
pub fn build_cross_domain_plan<R: Rng + ?Sized>(
    records: &[PseudoLabelRecord],
    source_index: &BTreeMap<usize, Vec<String>>,
    modality: Modality,
    max_positives: usize,
    max_negatives: usize,
    rng: &mut R,
) -> PairingPlan {
    let mut plan = PairingPlan::empty(PlanKind::CrossDomain);
    for rec in records.iter().filter(|r| r.accepted) {
        let same: &[String] = source_index.get(&rec.predicted_class).map_or(&[], Vec::as_slice);
        let others: Vec<&String> = source_index
            .iter()
            .filter(|(class, _)| **class != rec.predicted_class)
            .flat_map(|(_, ids)| ids.iter())
            .collect();
        if same.is_empty() || others.is_empty() {
            plan.skipped_anchors += 1;
            continue;
        }
        let positives = same
            .choose_multiple(rng, max_positives.min(same.len()))
            .map(|id| FeatureRef::bank(id.clone(), modality, Domain::Source))
            .collect();
        let mut negatives: Vec<FeatureRef> = others
            .choose_multiple(rng, max_negatives.min(others.len()))
            .map(|id| FeatureRef::bank((*id).clone(), modality, Domain::Source))
            .collect();
        negatives.shuffle(rng);
        plan.entries.push(PlanEntry {
            anchor: FeatureRef::batch(rec.clip_id.clone(), modality, Domain::Target),
            positives,
            negatives,
        });
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("c{i}")).collect()
    }

    fn clip(len: usize) -> ClipSample {
        let spec = SyntheticSpec {
            num_classes: 2,
            clips_per_class_per_domain: 1,
            clip_length: len,
            ..Default::default()
        };
        generate_corpus(&spec).unwrap().clips.remove(0)
    }

    #[test]
    fn window_bounds() {
        let c = clip(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let p = sample_window_pair(&c, 16, &mut rng).unwrap();
            assert!(p.appearance_start <= 24 && p.motion_start <= 24);
        }
        let c = clip(16);
        let p = sample_window_pair(&c, 16, &mut rng).unwrap();
        assert_eq!((p.appearance_start, p.motion_start), (0, 0));
        assert!(matches!(sample_window_pair(&c, 17, &mut rng), Err(Error::ClipTooShort { .. })));
    }

    #[test]
    fn window_starts_are_uncorrelated() {
        let c = clip(40);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<(f64, f64)> = (0..10_000)
            .map(|_| {
                let p = sample_window_pair(&c, 16, &mut rng).unwrap();
                (p.appearance_start as f64, p.motion_start as f64)
            })
            .collect();
        let n = draws.len() as f64;
        let (ma, mm) = draws.iter().fold((0.0, 0.0), |(a, m), (x, y)| (a + x / n, m + y / n));
        let cov = draws.iter().map(|(x, y)| (x - ma) * (y - mm)).sum::<f64>() / n;
        let va = draws.iter().map(|(x, _)| (x - ma).powi(2)).sum::<f64>() / n;
        let vm = draws.iter().map(|(_, y)| (y - mm).powi(2)).sum::<f64>() / n;
        let corr = cov / (va * vm).sqrt();
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn cross_modal_two_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = build_cross_modal_plan(&ids(2), Domain::Source, &[], 0, NegativeSource::Batch, &mut rng).unwrap();
        let e = plan
            .entries
            .iter()
            .find(|e| e.anchor.clip_id == "c1" && e.anchor.modality == Modality::Appearance)
            .unwrap();
        assert_eq!(e.positives, vec![FeatureRef::batch("c1", Modality::Motion, Domain::Source)]);
        assert!(e.negatives.contains(&FeatureRef::batch("c2", Modality::Motion, Domain::Source)));
        assert!(!e.negatives.iter().any(|n| n.modality == Modality::Appearance));
    }

    #[test]
    fn cross_modal_anchor_count_and_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank: Vec<String> = (1..=20).map(|i| format!("c{i}")).collect();
        let plan = build_cross_modal_plan(&ids(3), Domain::Target, &bank, 8, NegativeSource::Both, &mut rng).unwrap();
        assert_eq!(plan.entries.len(), 6);
        for e in &plan.entries {
            assert_eq!(e.positives.len(), 1);
            assert_eq!(e.positives[0].clip_id, e.anchor.clip_id);
            assert_ne!(e.positives[0].modality, e.anchor.modality);
            assert_eq!(e.negatives.len(), 2 + 8);
            for n in &e.negatives {
                assert_ne!(n.clip_id, e.anchor.clip_id);
                assert_ne!(n.modality, e.anchor.modality);
                assert_eq!(n.domain, Domain::Target);
            }
        }
    }

    #[test]
    fn cross_modal_rejects_singleton_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_cross_modal_plan(&ids(1), Domain::Source, &ids(10), 4, NegativeSource::Both, &mut rng),
            Err(Error::Plan(_))
        ));
    }

    fn index() -> BTreeMap<usize, Vec<String>> {
        (0..3).map(|c| (c, (0..5).map(|j| format!("s{c}-{j}")).collect())).collect()
    }

    fn record(id: &str, class: usize, accepted: bool) -> PseudoLabelRecord {
        PseudoLabelRecord {
            clip_id: id.into(),
            predicted_class: class,
            confidence: if accepted { 0.9 } else { 0.5 },
            accepted,
            step_created: 0,
        }
    }

    #[test]
    fn cross_domain_positives_share_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = index();
        let plan = build_cross_domain_plan(&[record("t1", 2, true)], &idx, Modality::Appearance, 4, 64, &mut rng);
        assert_eq!(plan.entries.len(), 1);
        let e = &plan.entries[0];
        assert_eq!(e.positives.len(), 4);
        assert!(e.positives.iter().all(|p| idx[&2].contains(&p.clip_id)));
        assert_eq!(e.negatives.len(), 10);
        assert!(e.negatives.iter().all(|n| idx[&0].contains(&n.clip_id) || idx[&1].contains(&n.clip_id)));
    }

    #[test]
    fn cross_domain_empty_and_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_cross_domain_plan(&[], &index(), Modality::Motion, 4, 64, &mut rng).is_empty());
        let plan = build_cross_domain_plan(&[record("t1", 1, false)], &index(), Modality::Motion, 4, 64, &mut rng);
        assert!(plan.is_empty());
    }

    #[test]
    fn cross_domain_skips_missing_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = build_cross_domain_plan(&[record("t1", 7, true)], &index(), Modality::Motion, 4, 64, &mut rng);
        assert!(plan.is_empty());
        assert_eq!(plan.skipped_anchors, 1);
    }

    #[test]
    fn plans_serialize_for_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = build_cross_modal_plan(&ids(2), Domain::Source, &[], 0, NegativeSource::Batch, &mut rng).unwrap();
        let json = plan.to_json().unwrap();
        let back: PairingPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
