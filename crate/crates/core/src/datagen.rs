//! Synthetic two-domain, two-modality clip corpus and feature-file ingestion.
//!
//! Each clip shows a Gaussian sprite drifting across a toroidal frame. The
//! class is the drift direction. The appearance modality renders the sprite
//! over a background whose palette is shifted in the target domain (plus
//! target-only pixel noise and viewpoint rotation); the motion modality is
//! the dense displacement field of the sprite, which does not see the
//! palette at all.

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Domain, Error, Modality, Result};

const SPRITE_SIGMA: f64 = 1.0;
const SOURCE_BACKGROUND: [f64; 3] = [0.12, 0.15, 0.22];
const SHIFTED_BACKGROUND: [f64; 3] = [0.92, 0.90, 0.88];
const SPRITE_COLOR: [f64; 3] = [0.90, 0.60, 0.30];
const MIN_SPEED: f64 = 0.6;
const MAX_SPEED: f64 = 1.0;

pub const APPEARANCE_CHANNELS: usize = 3;
pub const MOTION_CHANNELS: usize = 2;

/// Dense `[time × height × width × channels]` array stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub time: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn zeros(time: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            time,
            height,
            width,
            channels,
            data: vec![0.0; time * height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.time, self.height, self.width, self.channels]
    }

    #[inline]
    pub fn offset(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(t, y, x, c)]
    }

    /// Copies `len` consecutive frames starting at `start` into a
    /// channel-major `[channels × len × height × width]` buffer, the layout
    /// the encoders consume.
    pub fn window_channel_major(&self, start: usize, len: usize) -> Vec<f64> {
        assert!(start + len <= self.time, "window out of range");
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.channels * len * plane];
        for t in 0..len {
            for y in 0..self.height {
                for x in 0..self.width {
                    let src = self.offset(start + t, y, x, 0);
                    for c in 0..self.channels {
                        out[(c * len + t) * plane + y * self.width + x] = self.data[src + c] as f64;
                    }
                }
            }
        }
        out
    }
}

thread_local! {
    static EVAL_SCOPE_DEPTH: Cell<usize> = const { Cell::new(0) };
    static GUARDED_READS: Cell<usize> = const { Cell::new(0) };
}

/// While alive, reads of held-out target labels on this thread count as
/// legitimate evaluation reads.
pub struct EvalScope(());

impl EvalScope {
    pub fn enter() -> Self {
        EVAL_SCOPE_DEPTH.with(|d| d.set(d.get() + 1));
        EvalScope(())
    }
}

impl Drop for EvalScope {
    fn drop(&mut self) {
        EVAL_SCOPE_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Number of held-out label reads on this thread that happened outside an
/// [`EvalScope`] since the last [`reset_label_audit`].
pub fn held_out_label_violations() -> usize {
    GUARDED_READS.with(|c| c.get())
}

pub fn reset_label_audit() {
    GUARDED_READS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClipLabel {
    Supervised(usize),
    HeldOut(usize),
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub domain: Domain,
    pub frames_appearance: Frames,
    pub frames_motion: Frames,
    label: ClipLabel,
}

impl ClipSample {
    /// Source clips carry a training label; target clips may carry a
    /// held-out label reachable only through [`ClipSample::eval_label`].
    pub fn new(
        clip_id: impl Into<String>,
        domain: Domain,
        frames_appearance: Frames,
        frames_motion: Frames,
        label: Option<usize>,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames_appearance.time != frames_motion.time {
            return Err(Error::Shape(format!(
                "clip {clip_id}: appearance has {} frames, motion has {}",
                frames_appearance.time, frames_motion.time
            )));
        }
        let label = match (domain, label) {
            (_, None) => ClipLabel::Unlabeled,
            (Domain::Source, Some(l)) => ClipLabel::Supervised(l),
            (Domain::Target, Some(l)) => ClipLabel::HeldOut(l),
        };
        if domain == Domain::Source && label == ClipLabel::Unlabeled {
            return Err(Error::Config(format!("source clip {clip_id} has no label")));
        }
        Ok(Self {
            clip_id,
            domain,
            frames_appearance,
            frames_motion,
            label,
        })
    }

    pub fn clip_length(&self) -> usize {
        self.frames_appearance.time
    }

    /// Label usable for training: present only for source clips.
    pub fn label(&self) -> Option<usize> {
        match self.label {
            ClipLabel::Supervised(l) => Some(l),
            _ => None,
        }
    }

    /// Ground truth for evaluation. Reading a held-out target label outside
    /// an [`EvalScope`] is recorded as an audit violation.
    pub fn eval_label(&self) -> Option<usize> {
        match self.label {
            ClipLabel::Supervised(l) => Some(l),
            ClipLabel::HeldOut(l) => {
                if EVAL_SCOPE_DEPTH.with(|d| d.get()) == 0 {
                    GUARDED_READS.with(|c| c.set(c.get() + 1));
                }
                Some(l)
            }
            ClipLabel::Unlabeled => None,
        }
    }

    pub fn has_held_out_label(&self) -> bool {
        matches!(self.label, ClipLabel::HeldOut(_))
    }

    /// Copy with any held-out label removed.
    pub fn without_held_out_label(&self) -> Self {
        let mut c = self.clone();
        if let ClipLabel::HeldOut(_) = c.label {
            c.label = ClipLabel::Unlabeled;
        }
        c
    }

    pub fn frames(&self, modality: Modality) -> &Frames {
        match modality {
            Modality::Appearance => &self.frames_appearance,
            Modality::Motion => &self.frames_motion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// 0 keeps the source palette, 1 moves the target background to a
    /// bright palette that inverts sprite contrast in most channels.
    pub background_palette_shift: f64,
    /// Half-width in radians of the extra random rotation applied to target
    /// trajectories.
    pub viewpoint_jitter: f64,
    /// Standard deviation of Gaussian pixel noise on target appearance.
    pub noise_level: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            background_palette_shift: 1.0,
            viewpoint_jitter: 0.3,
            noise_level: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class_per_domain: usize,
    pub clip_length: usize,
    pub frame_size: usize,
    pub domain_shift: DomainShift,
    /// Half-width in radians of the per-clip direction spread within a class.
    pub class_spread: f64,
    /// Standard deviation of Gaussian noise on the motion field (both domains).
    pub motion_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            clips_per_class_per_domain: 50,
            clip_length: 24,
            frame_size: 8,
            domain_shift: DomainShift::default(),
            class_spread: 0.5,
            motion_noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.clips_per_class_per_domain == 0 {
            return Err(Error::Config(
                "num_classes and clips_per_class_per_domain must be positive".into(),
            ));
        }
        if self.clip_length < 2 {
            return Err(Error::Config("clip_length must be at least 2".into()));
        }
        if self.frame_size < 2 {
            return Err(Error::Config("frame_size must be at least 2".into()));
        }
        let shift = &self.domain_shift;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(shift.background_palette_shift)
            && finite_nonneg(shift.viewpoint_jitter)
            && finite_nonneg(shift.noise_level)
            && finite_nonneg(self.class_spread)
            && finite_nonneg(self.motion_noise))
        {
            return Err(Error::Config(
                "domain shift, spread and noise parameters must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticSpec,
    pub clips: Vec<ClipSample>,
}

impl Corpus {
    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &ClipSample> {
        self.clips.iter().filter(move |c| c.domain == domain)
    }

    pub fn domain_clips(&self, domain: Domain) -> Vec<ClipSample> {
        self.domain(domain).cloned().collect()
    }

    /// SHA-256 over the serialized manifest and every frame buffer.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.manifest()).expect("manifest serializes"));
        for clip in &self.clips {
            for m in Modality::ALL {
                for v in &clip.frames(m).data {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    fn manifest(&self) -> CorpusManifest {
        let clips = self
            .clips
            .iter()
            .map(|c| ManifestClip {
                clip_id: c.clip_id.clone(),
                domain: c.domain,
                label: match c.label {
                    ClipLabel::Supervised(l) => Some(l),
                    _ => None,
                },
                held_out_label: match c.label {
                    ClipLabel::HeldOut(l) => Some(l),
                    _ => None,
                },
                appearance: ArrayEntry {
                    file: array_file_name(&c.clip_id, Modality::Appearance),
                    shape: c.frames_appearance.shape(),
                },
                motion: ArrayEntry {
                    file: array_file_name(&c.clip_id, Modality::Motion),
                    shape: c.frames_motion.shape(),
                },
            })
            .collect();
        CorpusManifest {
            spec: self.spec.clone(),
            clips,
        }
    }
}

/// Rejects any clip shorter than `window_length`.
pub fn validate_window_length(clips: &[ClipSample], window_length: usize) -> Result<()> {
    for c in clips {
        if c.clip_length() < window_length {
            return Err(Error::ClipTooShort {
                clip_id: c.clip_id.clone(),
                length: c.clip_length(),
                window: window_length,
            });
        }
    }
    Ok(())
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clips = Vec::with_capacity(2 * spec.num_classes * spec.clips_per_class_per_domain);
    for domain in Domain::ALL {
        for class in 0..spec.num_classes {
            for j in 0..spec.clips_per_class_per_domain {
                let clip_id = format!("{}-c{class}-{j:04}", domain.as_str());
                let (app, mot) = render_clip(spec, domain, class, &mut rng);
                clips.push(ClipSample::new(clip_id, domain, app, mot, Some(class))?);
            }
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        clips,
    })
}

/// Signed toroidal offset of `a - b` on a ring of length `n`, in `[-n/2, n/2)`.
fn wrap(a: f64, b: f64, n: f64) -> f64 {
    (a - b + 0.5 * n).rem_euclid(n) - 0.5 * n
}

fn render_clip(spec: &SyntheticSpec, domain: Domain, class: usize, rng: &mut ChaCha8Rng) -> (Frames, Frames) {
    let n = spec.frame_size;
    let len = spec.clip_length;
    let size = n as f64;
    let shift = &spec.domain_shift;

    let mut theta = std::f64::consts::TAU * class as f64 / spec.num_classes as f64;
    theta += rng.random_range(-1.0..=1.0) * spec.class_spread;
    if domain == Domain::Target {
        theta += rng.random_range(-1.0..=1.0) * shift.viewpoint_jitter;
    }
    let speed = rng.random_range(MIN_SPEED..=MAX_SPEED);
    let (vx, vy) = (speed * theta.cos(), speed * theta.sin());
    let (x0, y0) = (rng.random_range(0.0..size), rng.random_range(0.0..size));

    let brightness = rng.random_range(0.9..=1.0);
    let sprite: [f64; 3] = SPRITE_COLOR.map(|c| c * brightness);
    let mut background = [0.0; 3];
    for (i, b) in background.iter_mut().enumerate() {
        let base = SOURCE_BACKGROUND[i] + rng.random_range(-0.05..=0.05);
        *b = match domain {
            Domain::Source => base,
            Domain::Target => base + shift.background_palette_shift * (SHIFTED_BACKGROUND[i] - base),
        };
    }

    let pixel_noise = match domain {
        Domain::Target if shift.noise_level > 0.0 => Some(Normal::new(0.0, shift.noise_level).expect("valid std")),
        _ => None,
    };
    let motion_noise = (spec.motion_noise > 0.0).then(|| Normal::new(0.0, spec.motion_noise).expect("valid std"));

    let mut app = Frames::zeros(len, n, n, APPEARANCE_CHANNELS);
    let mut mot = Frames::zeros(len, n, n, MOTION_CHANNELS);
    for t in 0..len {
        let px = x0 + vx * t as f64;
        let py = y0 + vy * t as f64;
        for y in 0..n {
            for x in 0..n {
                let dx = wrap(x as f64 + 0.5, px, size);
                let dy = wrap(y as f64 + 0.5, py, size);
                let mask = (-(dx * dx + dy * dy) / (2.0 * SPRITE_SIGMA * SPRITE_SIGMA)).exp();
                let o = app.offset(t, y, x, 0);
                for c in 0..APPEARANCE_CHANNELS {
                    let mut v = background[c] * (1.0 - mask) + sprite[c] * mask;
                    if let Some(dist) = &pixel_noise {
                        v += dist.sample(rng);
                    }
                    app.data[o + c] = v.clamp(0.0, 1.0) as f32;
                }
                let o = mot.offset(t, y, x, 0);
                for (c, v) in [vx, vy].into_iter().enumerate() {
                    let mut m = mask * v / MAX_SPEED;
                    if let Some(dist) = &motion_noise {
                        m += dist.sample(rng);
                    }
                    mot.data[o + c] = m as f32;
                }
            }
        }
    }
    (app, mot)
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    file: String,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClip {
    clip_id: String,
    domain: Domain,
    label: Option<usize>,
    held_out_label: Option<usize>,
    appearance: ArrayEntry,
    motion: ArrayEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    spec: SyntheticSpec,
    clips: Vec<ManifestClip>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn array_file_name(clip_id: &str, modality: Modality) -> String {
    format!("{clip_id}.{}.f32", modality.as_str())
}

/// Writes `manifest.json` plus one little-endian f32 file per clip and
/// modality into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = corpus.manifest();
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    for (clip, entry) in corpus.clips.iter().zip(&manifest.clips) {
        for (frames, file) in [
            (&clip.frames_appearance, &entry.appearance.file),
            (&clip.frames_motion, &entry.motion.file),
        ] {
            let path = dir.join(file);
            let mut bytes = Vec::with_capacity(frames.data.len() * 4);
            for v in &frames.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_slice(&raw)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in manifest.clips {
        let app = read_array(dir, &entry.appearance)?;
        let mot = read_array(dir, &entry.motion)?;
        let label = entry.label.or(entry.held_out_label);
        clips.push(ClipSample::new(entry.clip_id, entry.domain, app, mot, label)?);
    }
    Ok(Corpus {
        spec: manifest.spec,
        clips,
    })
}

fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Frames> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let [t, h, w, c] = entry.shape;
    let expected = t * h * w * c;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Frames {
        time: t,
        height: h,
        width: w,
        channels: c,
        data,
    })
}

/// One precomputed feature vector for a clip and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFileRecord {
    pub clip_id: String,
    pub domain: Domain,
    pub modality: Modality,
    pub label: Option<usize>,
    pub vector: Vec<f64>,
}

const FEATURE_HEADER_PREFIX: [&str; 4] = ["clip_id", "domain", "modality", "label"];

/// Writes records as `clip_id,domain,modality,label,d0,...,d{D-1}` CSV.
pub fn write_feature_file(path: &Path, records: &[FeatureFileRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    check_feature_records(records)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FEATURE_HEADER_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.clip_id.clone(),
            r.domain.to_string(),
            r.modality.to_string(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        row.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn check_feature_records(records: &[FeatureFileRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let dim = first.vector.len();
    let mut seen = HashSet::new();
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.vector.len(),
            });
        }
        if !seen.insert((r.clip_id.as_str(), r.modality)) {
            return Err(Error::DuplicateRecord {
                clip_id: r.clip_id.clone(),
                modality: r.modality.to_string(),
            });
        }
    }
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<Vec<FeatureFileRecord>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "feature file not found"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < FEATURE_HEADER_PREFIX.len()
        || header.iter().zip(FEATURE_HEADER_PREFIX).any(|(a, b)| a != b)
    {
        return Err(Error::Malformed {
            line: 1,
            reason: "header must start with clip_id,domain,modality,label".into(),
        });
    }
    let dim = header.len() - FEATURE_HEADER_PREFIX.len();
    for (i, name) in header.iter().skip(FEATURE_HEADER_PREFIX.len()).enumerate() {
        if name != format!("d{i}") {
            return Err(Error::Malformed {
                line: 1,
                reason: format!("expected column d{i}, found {name}"),
            });
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() < FEATURE_HEADER_PREFIX.len() {
            return Err(Error::Malformed {
                line,
                reason: format!("expected at least 4 fields, found {}", row.len()),
            });
        }
        let found = row.len() - FEATURE_HEADER_PREFIX.len();
        if found != dim {
            return Err(Error::DimensionMismatch { expected: dim, found });
        }
        let bad = |reason: String| Error::Malformed { line, reason };
        let domain = Domain::parse(&row[1]).ok_or_else(|| bad(format!("unknown domain {:?}", &row[1])))?;
        let modality = Modality::parse(&row[2]).ok_or_else(|| bad(format!("unknown modality {:?}", &row[2])))?;
        let label = match &row[3] {
            "" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad(format!("invalid label {s:?}")))?),
        };
        let vector = row
            .iter()
            .skip(FEATURE_HEADER_PREFIX.len())
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("invalid number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureFileRecord {
            clip_id: row[0].to_string(),
            domain,
            modality,
            label,
            vector,
        });
    }
    check_feature_records(&records)?;
    Ok(records)
}

/// Groups source clip ids by training label.
pub fn source_class_index(clips: &[ClipSample]) -> BTreeMap<usize, Vec<String>> {
    let mut index: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for c in clips.iter().filter(|c| c.domain == Domain::Source) {
        if let Some(l) = c.label() {
            index.entry(l).or_default().push(c.clip_id.clone());
        }
    }
    index
}
