//! Two-stream model: per-modality 3-D conv encoders, per-stream linear
//! classifiers, and a single projection head shared by both domains.

pub mod layers;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{APPEARANCE_CHANNELS, MOTION_CHANNELS};
use crate::{l2_norm, Error, Modality, Result};
use layers::{global_avg_pool, global_avg_pool_backward, relu_backward_in_place, relu_in_place, Conv3d, Linear};

/// Added to every coordinate of an all-zero projection before normalizing.
pub const PROJECTION_EPS: f64 = 1e-6;

static PROJECTION_EPS_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// How many zero-norm projection rows have been patched with
/// [`PROJECTION_EPS`] in this process.
pub fn projection_eps_warnings() -> usize {
    PROJECTION_EPS_WARNINGS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 8,
            conv2_channels: 16,
            feature_dim: 32,
            projection_dim: 16,
        }
    }
}

/// Input geometry a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub window_length: usize,
    pub frame_size: usize,
    pub num_classes: usize,
}

/// One modality's window of a clip, channel-major `[C × T × H × W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindow {
    pub clip_id: String,
    pub length: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEncoder {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub fc: Linear,
    dims: [usize; 3],
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h1_dims: [usize; 3],
    h2: Vec<f64>,
    pooled: Vec<f64>,
}

impl StreamEncoder {
    fn new<R: Rng + ?Sized>(in_channels: usize, cfg: &ModelConfig, shape: &InputShape, rng: &mut R) -> Result<Self> {
        let conv1 = Conv3d::new(in_channels, cfg.conv1_channels, [3, 3, 3], [1, 1, 1], rng);
        let conv2 = Conv3d::new(cfg.conv1_channels, cfg.conv2_channels, [3, 3, 3], [2, 2, 2], rng);
        let dims = [shape.window_length, shape.frame_size, shape.frame_size];
        let fits = conv1.output_dims(dims).and_then(|d| conv2.output_dims(d));
        if fits.is_none() {
            return Err(Error::Config(format!(
                "window {}x{}x{} too small for the encoder (need at least 5 per axis)",
                dims[0], dims[1], dims[2]
            )));
        }
        let fc = Linear::new(cfg.conv2_channels, cfg.feature_dim, rng);
        Ok(Self { conv1, conv2, fc, dims })
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            fc: self.fc.zeros_like(),
            dims: self.dims,
        }
    }

    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, EncoderTrace) {
        let (mut h1, h1_dims) = self.conv1.forward(input, self.dims);
        relu_in_place(&mut h1);
        let (mut h2, _) = self.conv2.forward(&h1, h1_dims);
        relu_in_place(&mut h2);
        let pooled = global_avg_pool(&h2, self.conv2.out_channels);
        let feature = self.fc.forward(&pooled);
        let trace = EncoderTrace {
            input: input.to_vec(),
            h1,
            h1_dims,
            h2,
            pooled,
        };
        (feature, trace)
    }

    pub fn backward(&self, trace: &EncoderTrace, d_feature: &[f64], grad: &mut StreamEncoder) {
        let d_pooled = self.fc.backward(&trace.pooled, d_feature, &mut grad.fc);
        let plane = trace.h2.len() / self.conv2.out_channels;
        let mut d_h2 = global_avg_pool_backward(&d_pooled, plane);
        relu_backward_in_place(&trace.h2, &mut d_h2);
        let mut d_h1 = self
            .conv2
            .backward(&trace.h1, trace.h1_dims, &d_h2, &mut grad.conv2, true)
            .expect("input gradient requested");
        relu_backward_in_place(&trace.h1, &mut d_h1);
        self.conv1.backward(&trace.input, self.dims, &d_h1, &mut grad.conv1, false);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    pre_norm: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

impl ProjectionTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl ProjectionHead {
    fn new<R: Rng + ?Sized>(dim: usize, proj_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, dim, rng),
            fc2: Linear::new(dim, proj_dim, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    /// linear → ReLU → linear → L2 normalize.
    pub fn forward(&self, f: &[f64]) -> ProjectionTrace {
        let mut hidden = self.fc1.forward(f);
        relu_in_place(&mut hidden);
        let mut pre_norm = self.fc2.forward(&hidden);
        let mut norm = l2_norm(&pre_norm);
        if norm < 1e-12 {
            PROJECTION_EPS_WARNINGS.fetch_add(1, Ordering::Relaxed);
            log::warn!("zero-norm projection row; adding epsilon before normalizing");
            pre_norm.iter_mut().for_each(|v| *v += PROJECTION_EPS);
            norm = l2_norm(&pre_norm);
        }
        let output = pre_norm.iter().map(|v| v / norm).collect();
        ProjectionTrace {
            input: f.to_vec(),
            hidden,
            pre_norm,
            norm,
            output,
        }
    }

    /// Returns dL/df given dL/dz for the normalized output z.
    pub fn backward(&self, trace: &ProjectionTrace, d_out: &[f64], grad: &mut ProjectionHead) -> Vec<f64> {
        let z = &trace.output;
        let zdot: f64 = z.iter().zip(d_out).map(|(a, b)| a * b).sum();
        let d_pre: Vec<f64> = d_out
            .iter()
            .zip(z)
            .map(|(g, zi)| (g - zi * zdot) / trace.norm)
            .collect();
        debug_assert_eq!(trace.pre_norm.len(), d_pre.len());
        let mut d_hidden = self.fc2.backward(&trace.hidden, &d_pre, &mut grad.fc2);
        relu_backward_in_place(&trace.hidden, &mut d_hidden);
        self.fc1.backward(&trace.input, &d_hidden, &mut grad.fc1)
    }
}

/// Per-stream logits and their elementwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamLogits {
    pub appearance: Vec<Vec<f64>>,
    pub motion: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
}

/// Raw and projected features of the four (domain, modality) spaces for one
/// batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureQuad {
    pub f_src_app: Vec<Vec<f64>>,
    pub f_src_mot: Vec<Vec<f64>>,
    pub f_tgt_app: Vec<Vec<f64>>,
    pub f_tgt_mot: Vec<Vec<f64>>,
    pub h_src_app: Vec<Vec<f64>>,
    pub h_src_mot: Vec<Vec<f64>>,
    pub h_tgt_app: Vec<Vec<f64>>,
    pub h_tgt_mot: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamModel {
    pub shape: InputShape,
    pub appearance_encoder: StreamEncoder,
    pub motion_encoder: StreamEncoder,
    pub classifier_appearance: Linear,
    pub classifier_motion: Linear,
    pub projection_head: ProjectionHead,
}

impl TwoStreamModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, shape: InputShape, rng: &mut R) -> Result<Self> {
        if cfg.feature_dim == 0 || cfg.projection_dim == 0 || cfg.conv1_channels == 0 || cfg.conv2_channels == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if shape.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let appearance_encoder = StreamEncoder::new(APPEARANCE_CHANNELS, cfg, &shape, rng)?;
        let motion_encoder = StreamEncoder::new(MOTION_CHANNELS, cfg, &shape, rng)?;
        let classifier_appearance = Linear::new(cfg.feature_dim, shape.num_classes, rng);
        let classifier_motion = Linear::new(cfg.feature_dim, shape.num_classes, rng);
        let projection_head = ProjectionHead::new(cfg.feature_dim, cfg.projection_dim, rng);
        Ok(Self {
            shape,
            appearance_encoder,
            motion_encoder,
            classifier_appearance,
            classifier_motion,
            projection_head,
        })
    }

    /// Same architecture with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            appearance_encoder: self.appearance_encoder.zeros_like(),
            motion_encoder: self.motion_encoder.zeros_like(),
            classifier_appearance: self.classifier_appearance.zeros_like(),
            classifier_motion: self.classifier_motion.zeros_like(),
            projection_head: self.projection_head.zeros_like(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.appearance_encoder.fc.out_dim
    }

    pub fn projection_dim(&self) -> usize {
        self.projection_head.fc2.out_dim
    }

    pub fn encoder(&self, modality: Modality) -> &StreamEncoder {
        match modality {
            Modality::Appearance => &self.appearance_encoder,
            Modality::Motion => &self.motion_encoder,
        }
    }

    pub fn encoder_mut(&mut self, modality: Modality) -> &mut StreamEncoder {
        match modality {
            Modality::Appearance => &mut self.appearance_encoder,
            Modality::Motion => &mut self.motion_encoder,
        }
    }

    pub fn classifier(&self, modality: Modality) -> &Linear {
        match modality {
            Modality::Appearance => &self.classifier_appearance,
            Modality::Motion => &self.classifier_motion,
        }
    }

    pub fn classifier_mut(&mut self, modality: Modality) -> &mut Linear {
        match modality {
            Modality::Appearance => &mut self.classifier_appearance,
            Modality::Motion => &mut self.classifier_motion,
        }
    }

    /// Every parameter array keyed by module path, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (name, enc) in [("appearance_encoder", &self.appearance_encoder), ("motion_encoder", &self.motion_encoder)] {
            out.push((format!("{name}.conv1.weight"), &enc.conv1.weight));
            out.push((format!("{name}.conv1.bias"), &enc.conv1.bias));
            out.push((format!("{name}.conv2.weight"), &enc.conv2.weight));
            out.push((format!("{name}.conv2.bias"), &enc.conv2.bias));
            out.push((format!("{name}.fc.weight"), &enc.fc.weight));
            out.push((format!("{name}.fc.bias"), &enc.fc.bias));
        }
        for (name, lin) in [
            ("classifier_appearance", &self.classifier_appearance),
            ("classifier_motion", &self.classifier_motion),
            ("projection_head.fc1", &self.projection_head.fc1),
            ("projection_head.fc2", &self.projection_head.fc2),
        ] {
            out.push((format!("{name}.weight"), &lin.weight));
            out.push((format!("{name}.bias"), &lin.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (name, enc) in [
            ("appearance_encoder", &mut self.appearance_encoder),
            ("motion_encoder", &mut self.motion_encoder),
        ] {
            out.push((format!("{name}.conv1.weight"), &mut enc.conv1.weight));
            out.push((format!("{name}.conv1.bias"), &mut enc.conv1.bias));
            out.push((format!("{name}.conv2.weight"), &mut enc.conv2.weight));
            out.push((format!("{name}.conv2.bias"), &mut enc.conv2.bias));
            out.push((format!("{name}.fc.weight"), &mut enc.fc.weight));
            out.push((format!("{name}.fc.bias"), &mut enc.fc.bias));
        }
        for (name, lin) in [
            ("classifier_appearance", &mut self.classifier_appearance),
            ("classifier_motion", &mut self.classifier_motion),
            ("projection_head.fc1", &mut self.projection_head.fc1),
            ("projection_head.fc2", &mut self.projection_head.fc2),
        ] {
            out.push((format!("{name}.weight"), &mut lin.weight));
            out.push((format!("{name}.bias"), &mut lin.bias));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_window(&self, w: &ClipWindow) -> Result<()> {
        if w.length != self.shape.window_length {
            return Err(Error::WindowMismatch {
                clip_id: w.clip_id.clone(),
                expected: self.shape.window_length,
                found: w.length,
            });
        }
        Ok(())
    }

    /// Encodes one window and keeps the activations for backprop.
    pub fn encode_one(&self, window: &ClipWindow, modality: Modality) -> Result<(Vec<f64>, EncoderTrace)> {
        self.check_window(window)?;
        let enc = self.encoder(modality);
        let expected = enc.conv1.in_channels * window.length * self.shape.frame_size * self.shape.frame_size;
        if window.data.len() != expected {
            return Err(Error::Shape(format!(
                "clip {}: {} window has {} values, expected {expected}",
                window.clip_id,
                modality,
                window.data.len()
            )));
        }
        let (feature, trace) = enc.forward(&window.data);
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{modality} encoder output"),
                clip_id: window.clip_id.clone(),
            });
        }
        Ok((feature, trace))
    }

    /// `[B × D]` features for a batch of windows of one modality.
    pub fn encode(&self, windows: &[ClipWindow], modality: Modality) -> Result<Vec<Vec<f64>>> {
        windows.iter().map(|w| self.encode_one(w, modality).map(|(f, _)| f)).collect()
    }

    /// Unit-norm `[B × P]` projections.
    pub fn project(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features
            .iter()
            .map(|f| {
                if f.len() != self.feature_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim(),
                        found: f.len(),
                    });
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("non-finite feature passed to projection".into()));
                }
                Ok(self.projection_head.forward(f).output)
            })
            .collect()
    }

    pub fn classify(&self, f_app: &[Vec<f64>], f_mot: &[Vec<f64>]) -> Result<StreamLogits> {
        if f_app.len() != f_mot.len() {
            return Err(Error::Shape(format!(
                "appearance batch {} != motion batch {}",
                f_app.len(),
                f_mot.len()
            )));
        }
        if self.classifier_appearance.out_dim != self.classifier_motion.out_dim {
            return Err(Error::Config("stream classifiers disagree on the class count".into()));
        }
        let appearance: Vec<Vec<f64>> = f_app.iter().map(|f| self.classifier_appearance.forward(f)).collect();
        let motion: Vec<Vec<f64>> = f_mot.iter().map(|f| self.classifier_motion.forward(f)).collect();
        let fused = fuse_logits(&appearance, &motion);
        Ok(StreamLogits {
            appearance,
            motion,
            fused,
        })
    }
}

/// Elementwise mean of the two streams' logits.
pub fn fuse_logits(appearance: &[Vec<f64>], motion: &[Vec<f64>]) -> Vec<Vec<f64>> {
    appearance
        .iter()
        .zip(motion)
        .map(|(a, m)| a.iter().zip(m).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect()
}
