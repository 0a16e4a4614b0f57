//! The Conv5FC3 binary classifier: network, loss, training, cross-validation,
//! fine-tuning with frozen convolutional blocks, checkpoints and inference.

mod checkpoint;
pub mod layers;
mod network;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{normalize_minmax, Volume3D};

pub use checkpoint::{Checkpoint, CheckpointMeta, Section, SectionKind, CHECKPOINT_VERSION};
pub use layers::{pooled_dims, Real};
pub use network::{parameter_count, Gradients, Network, CONV_PARAM_TENSORS};
pub use train::{
    class_weights_for, cross_validate, finetune, fit, loss_and_gradients, train, CvOutcome,
    EpochLog, FitOutcome, Sample, TrainConfig, TrainMode,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("no samples")]
    Empty,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("fold {0} has no samples")]
    MissingFold(usize),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How volumes whose dims differ from the model input are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPolicy {
    /// Reject any volume whose dims differ.
    #[default]
    Strict,
    /// Centre-crop or pad (with the volume minimum) to the input dims.
    CropOrPad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub conv_channels: [usize; 5],
    pub kernel: usize,
    pub pool: usize,
    pub fc_widths: [usize; 2],
    pub dropout_rate: f64,
    pub input_policy: InputPolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [32; 3],
            conv_channels: [8, 16, 32, 64, 128],
            kernel: 3,
            pool: 2,
            fc_widths: [1300, 50],
            dropout_rate: 0.0,
            input_policy: InputPolicy::Strict,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_owned()));
        if self.kernel != 3 {
            return bad("only 3×3×3 kernels are supported");
        }
        if self.pool != 2 {
            return bad("only 2×2×2 pooling is supported");
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return bad("input dims must be positive");
        }
        if self
            .conv_channels
            .iter()
            .chain(&self.fc_widths)
            .any(|&w| w == 0)
        {
            return bad("all widths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// Spatial dims after the five pooling stages (partial windows kept).
    pub fn feature_dims(&self) -> [usize; 3] {
        (0..5).fold(self.input_dims, |d, _| pooled_dims(d))
    }

    pub fn flatten_width(&self) -> usize {
        let d = self.feature_dims();
        self.conv_channels[4] * d[0] * d[1] * d[2]
    }
}

/// Weighted binary cross entropy of one logit, stable for large magnitudes.
///
/// `weights = (w0, w1)` scale the negative and positive class terms.
pub fn weighted_bce(logit: f64, label: bool, weights: (f64, f64)) -> f64 {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    if label {
        weights.1 * softplus(-logit)
    } else {
        weights.0 * softplus(logit)
    }
}

/// Derivative of [`weighted_bce`] with respect to the logit.
pub fn weighted_bce_grad(logit: f64, label: bool, weights: (f64, f64)) -> f64 {
    let p = sigmoid(logit);
    if label {
        weights.1 * (p - 1.0)
    } else {
        weights.0 * p
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Centre-crops or pads with the volume minimum to `dims`.
pub fn crop_or_pad(vol: &Volume3D, dims: [usize; 3]) -> Volume3D {
    let src = vol.dims();
    let (lo, _) = vol.min_max();
    let offset = [0, 1, 2].map(|a| src[a] as isize / 2 - dims[a] as isize / 2);
    Volume3D::from_fn(dims, vol.spacing(), |x, y, z| {
        let s = [
            x as isize + offset[0],
            y as isize + offset[1],
            z as isize + offset[2],
        ];
        if (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < src[a]) {
            vol.get(s[0] as usize, s[1] as usize, s[2] as usize)
        } else {
            lo
        }
    })
    .expect("cropped volume has valid geometry")
}

/// Network input for a volume: shape policy, then min-max normalization.
pub fn prepare_input(vol: &Volume3D, cfg: &ModelConfig) -> Result<Vec<f32>, ModelError> {
    let shaped;
    let vol = if vol.dims() == cfg.input_dims {
        vol
    } else {
        match cfg.input_policy {
            InputPolicy::Strict => {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("{:?}", cfg.input_dims),
                    got: format!("{:?}", vol.dims()),
                })
            }
            InputPolicy::CropOrPad => {
                shaped = crop_or_pad(vol, cfg.input_dims);
                &shaped
            }
        }
    };
    Ok(normalize_minmax(vol)
        .0
        .data()
        .iter()
        .map(|&v| v as f32)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub label: bool,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        Self::from_probability(sigmoid(logit))
    }

    pub fn from_probability(probability: f64) -> Self {
        Self {
            probability,
            label: probability >= 0.5,
        }
    }
}

/// Evaluation-mode predictions for prepared inputs, processed in chunks.
pub fn predict_inputs(
    net: &Network<f32>,
    inputs: &[&[f32]],
) -> Result<Vec<Prediction>, ModelError> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let x: Vec<f32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        let logits = net.forward_eval(&x, chunk.len())?;
        out.extend(logits.iter().map(|&l| Prediction::from_logit(l as f64)));
    }
    Ok(out)
}

/// Probability and label for one volume.
pub fn predict(net: &Network<f32>, vol: &Volume3D) -> Result<Prediction, ModelError> {
    let x = prepare_input(vol, &net.config)?;
    Ok(predict_inputs(net, &[&x])?[0])
}
