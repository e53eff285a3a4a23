//! The capsule classifier: conv stem, primary capsules, per-pair transforms
//! into class capsules via a selected routing rule, plus the margin loss.
//!
//! Pipeline (with batch norm enabled):
//! conv1 -> BN -> relu -> primary conv -> BN -> reshape to capsules ->
//! squash -> per-pair transform -> routing -> class capsules.
//! Batch norm acts on the channel axis of each convolution output, before
//! the nonlinearity / squash; conv biases are dropped where BN supplies
//! its own shift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::routing::{self, PredictionTensor, RoutingConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-scale architecture: conv1 256x9x9 stride 1, primary 32 types x
    /// 8 dims (9x9 stride 2), 10 classes x 16 dims.
    Paper,
    /// Reduced width for CPU experiments: conv1 32 channels, 8 primary
    /// capsule types, same kernels and capsule dimensions.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Preset::Paper),
            "desk" => Some(Preset::Desk),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PrimarySpec {
    pub capsule_types: usize,
    pub capsule_dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub conv1: ConvSpec,
    pub primary: PrimarySpec,
    pub classes: usize,
    pub class_capsule_dim: usize,
    pub routing: RoutingConfig,
    pub bn_enabled: bool,
}

/// Spatial extents derived from the convolution arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DerivedDims {
    pub conv1_hw: (usize, usize),
    pub primary_hw: (usize, usize),
    /// capsule_types * primary_h * primary_w
    pub n_lower: usize,
}

impl ModelConfig {
    pub fn preset(preset: Preset, input: (usize, usize, usize), routing: RoutingConfig) -> Self {
        let conv1_channels = match preset {
            Preset::Paper => 256,
            Preset::Desk => 32,
        };
        let capsule_types = match preset {
            Preset::Paper => 32,
            Preset::Desk => 8,
        };
        ModelConfig {
            input,
            conv1: ConvSpec { out_channels: conv1_channels, kernel: 9, stride: 1 },
            primary: PrimarySpec { capsule_types, capsule_dim: 8, kernel: 9, stride: 2 },
            classes: 10,
            class_capsule_dim: 16,
            routing,
            bn_enabled: true,
        }
    }

    fn conv_out(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
        if kernel > extent || stride == 0 {
            None
        } else {
            Some((extent - kernel) / stride + 1)
        }
    }

    /// Checks the convolution arithmetic and returns the derived extents.
    pub fn derived(&self) -> Result<DerivedDims> {
        self.routing.validate()?;
        let stage = |name: &str| {
            Error::InvalidConfig(format!(
                "{name}: kernel/stride leave no spatial extent for input {:?}",
                self.input
            ))
        };
        let (_, h, w) = self.input;
        let h1 = Self::conv_out(h, self.conv1.kernel, self.conv1.stride).ok_or_else(|| stage("conv1"))?;
        let w1 = Self::conv_out(w, self.conv1.kernel, self.conv1.stride).ok_or_else(|| stage("conv1"))?;
        let h2 = Self::conv_out(h1, self.primary.kernel, self.primary.stride)
            .ok_or_else(|| stage("primary"))?;
        let w2 = Self::conv_out(w1, self.primary.kernel, self.primary.stride)
            .ok_or_else(|| stage("primary"))?;
        if self.classes == 0 || self.class_capsule_dim == 0 || self.primary.capsule_dim == 0 {
            return Err(Error::InvalidConfig("class and capsule extents must be positive".into()));
        }
        Ok(DerivedDims {
            conv1_hw: (h1, w1),
            primary_hw: (h2, w2),
            n_lower: self.primary.capsule_types * h2 * w2,
        })
    }
}

/// Named parameter tensors. Running-statistics buffers are part of the
/// checkpointed state but not of the trainable set.
pub struct Parameters<T: Real> {
    pub conv1_kernel: Tensor<T>,
    pub conv1_bias: Option<Tensor<T>>,
    pub bn1_gamma: Option<Tensor<T>>,
    pub bn1_beta: Option<Tensor<T>>,
    pub bn1_running_mean: Option<Tensor<T>>,
    pub bn1_running_var: Option<Tensor<T>>,
    pub primary_kernel: Tensor<T>,
    pub primary_bias: Option<Tensor<T>>,
    pub bn2_gamma: Option<Tensor<T>>,
    pub bn2_beta: Option<Tensor<T>>,
    pub bn2_running_mean: Option<Tensor<T>>,
    pub bn2_running_var: Option<Tensor<T>>,
    /// Per-pair transform `[n_lower, n_upper, d_in, d_out]`; prediction
    /// vectors are rows `u_i` multiplied through `W_ij`.
    pub w_caps: Tensor<T>,
}

impl<T: Real> Parameters<T> {
    /// Fan-in scaled normal initialization; BN scale 1, shift 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let dims = config.derived()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, _, _) = config.input;
        let c1 = config.conv1.out_channels;
        let k1 = config.conv1.kernel;
        let pc = config.primary.capsule_types * config.primary.capsule_dim;
        let k2 = config.primary.kernel;

        let conv1_std = 1.0 / ((cin * k1 * k1) as f64).sqrt();
        let conv1_kernel =
            Tensor::randn(&[c1, cin, k1, k1], conv1_std, &mut rng).trainable();
        let primary_std = 1.0 / ((c1 * k2 * k2) as f64).sqrt();
        let primary_kernel =
            Tensor::randn(&[pc, c1, k2, k2], primary_std, &mut rng).trainable();
        let w_std = 1.0 / (config.primary.capsule_dim as f64).sqrt();
        let w_caps = Tensor::randn(
            &[dims.n_lower, config.classes, config.primary.capsule_dim, config.class_capsule_dim],
            w_std,
            &mut rng,
        )
        .trainable();

        let mut params = Parameters {
            conv1_kernel,
            conv1_bias: None,
            bn1_gamma: None,
            bn1_beta: None,
            bn1_running_mean: None,
            bn1_running_var: None,
            primary_kernel,
            primary_bias: None,
            bn2_gamma: None,
            bn2_beta: None,
            bn2_running_mean: None,
            bn2_running_var: None,
            w_caps,
        };
        if config.bn_enabled {
            params.bn1_gamma = Some(Tensor::ones(&[c1]).trainable());
            params.bn1_beta = Some(Tensor::zeros(&[c1]).trainable());
            params.bn1_running_mean = Some(Tensor::zeros(&[c1]));
            params.bn1_running_var = Some(Tensor::ones(&[c1]));
            params.bn2_gamma = Some(Tensor::ones(&[pc]).trainable());
            params.bn2_beta = Some(Tensor::zeros(&[pc]).trainable());
            params.bn2_running_mean = Some(Tensor::zeros(&[pc]));
            params.bn2_running_var = Some(Tensor::ones(&[pc]));
        } else {
            params.conv1_bias = Some(Tensor::zeros(&[c1]).trainable());
            params.primary_bias = Some(Tensor::zeros(&[pc]).trainable());
        }
        Ok(params)
    }

    /// Trainable tensors in a fixed order (drives optimizer state slots).
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let entries: [(&'static str, Option<&Tensor<T>>); 9] = [
            ("conv1_kernel", Some(&self.conv1_kernel)),
            ("conv1_bias", self.conv1_bias.as_ref()),
            ("bn1_gamma", self.bn1_gamma.as_ref()),
            ("bn1_beta", self.bn1_beta.as_ref()),
            ("primary_kernel", Some(&self.primary_kernel)),
            ("primary_bias", self.primary_bias.as_ref()),
            ("bn2_gamma", self.bn2_gamma.as_ref()),
            ("bn2_beta", self.bn2_beta.as_ref()),
            ("w_caps", Some(&self.w_caps)),
        ];
        entries.into_iter().filter_map(|(name, t)| t.map(|t| (name, t))).collect()
    }

    /// Rebuilds parameters from named tensors (checkpoint loading). Shapes
    /// are validated against the architecture; trainable tensors are
    /// re-marked as such.
    pub fn from_named(config: &ModelConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let dims = config.derived()?;
        let mut map: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
        let mut take = |name: &str, shape: Vec<usize>, trainable: bool| -> Result<Tensor<T>> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointCorrupt(format!(
                    "tensor {name} has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(if trainable { t.trainable() } else { t })
        };
        let (cin, _, _) = config.input;
        let c1 = config.conv1.out_channels;
        let k1 = config.conv1.kernel;
        let pc = config.primary.capsule_types * config.primary.capsule_dim;
        let k2 = config.primary.kernel;

        let params = Parameters {
            conv1_kernel: take("conv1_kernel", vec![c1, cin, k1, k1], true)?,
            conv1_bias: if config.bn_enabled {
                None
            } else {
                Some(take("conv1_bias", vec![c1], true)?)
            },
            bn1_gamma: config.bn_enabled.then(|| take("bn1_gamma", vec![c1], true)).transpose()?,
            bn1_beta: config.bn_enabled.then(|| take("bn1_beta", vec![c1], true)).transpose()?,
            bn1_running_mean: config
                .bn_enabled
                .then(|| take("bn1_running_mean", vec![c1], false))
                .transpose()?,
            bn1_running_var: config
                .bn_enabled
                .then(|| take("bn1_running_var", vec![c1], false))
                .transpose()?,
            primary_kernel: take("primary_kernel", vec![pc, c1, k2, k2], true)?,
            primary_bias: if config.bn_enabled {
                None
            } else {
                Some(take("primary_bias", vec![pc], true)?)
            },
            bn2_gamma: config.bn_enabled.then(|| take("bn2_gamma", vec![pc], true)).transpose()?,
            bn2_beta: config.bn_enabled.then(|| take("bn2_beta", vec![pc], true)).transpose()?,
            bn2_running_mean: config
                .bn_enabled
                .then(|| take("bn2_running_mean", vec![pc], false))
                .transpose()?,
            bn2_running_var: config
                .bn_enabled
                .then(|| take("bn2_running_var", vec![pc], false))
                .transpose()?,
            w_caps: take(
                "w_caps",
                vec![dims.n_lower, config.classes, config.primary.capsule_dim, config.class_capsule_dim],
                true,
            )?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::CheckpointCorrupt(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    /// Every named tensor, including running statistics (checkpoint order).
    pub fn all_named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> = Vec::new();
        let entries: [(&'static str, Option<&Tensor<T>>); 13] = [
            ("conv1_kernel", Some(&self.conv1_kernel)),
            ("conv1_bias", self.conv1_bias.as_ref()),
            ("bn1_gamma", self.bn1_gamma.as_ref()),
            ("bn1_beta", self.bn1_beta.as_ref()),
            ("bn1_running_mean", self.bn1_running_mean.as_ref()),
            ("bn1_running_var", self.bn1_running_var.as_ref()),
            ("primary_kernel", Some(&self.primary_kernel)),
            ("primary_bias", self.primary_bias.as_ref()),
            ("bn2_gamma", self.bn2_gamma.as_ref()),
            ("bn2_beta", self.bn2_beta.as_ref()),
            ("bn2_running_mean", self.bn2_running_mean.as_ref()),
            ("bn2_running_var", self.bn2_running_var.as_ref()),
            ("w_caps", Some(&self.w_caps)),
        ];
        for (name, slot) in entries {
            if let Some(t) = slot {
                out.push((name, t));
            }
        }
        out
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.trainable() {
            t.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Forward pass from images `[batch, c, h, w]` to class capsules
/// `[batch, classes, class_capsule_dim]`.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    images: &Tensor<T>,
    config: &ModelConfig,
    mode: Mode,
) -> Result<Tensor<T>> {
    Ok(forward_with_state(params, images, config, mode)?.0)
}

/// Forward pass that also returns the routing state of the class layer.
pub fn forward_with_state<T: Real>(
    params: &Parameters<T>,
    images: &Tensor<T>,
    config: &ModelConfig,
    mode: Mode,
) -> Result<(Tensor<T>, routing::RoutingState<T>)> {
    let dims = config.derived()?;
    let (cin, h, w) = config.input;
    if images.rank() != 4 || images.shape()[1..] != [cin, h, w] {
        return Err(Error::ShapeMismatch {
            op: "forward input".to_string(),
            lhs: vec![images.shape()[0], cin, h, w],
            rhs: images.shape().to_vec(),
        });
    }
    let batch = images.shape()[0];
    let train = mode == Mode::Train;

    let mut x = images.conv2d(&params.conv1_kernel, config.conv1.stride)?;
    x = match (&params.bn1_gamma, &params.conv1_bias) {
        (Some(gamma), _) => x.batch_norm(
            gamma,
            params.bn1_beta.as_ref().expect("bn1 beta"),
            params.bn1_running_mean.as_ref().expect("bn1 running mean"),
            params.bn1_running_var.as_ref().expect("bn1 running var"),
            train,
            BN_EPS,
            BN_MOMENTUM,
        )?,
        (None, Some(bias)) => x.add(&bias.reshape(&[config.conv1.out_channels, 1, 1])?)?,
        (None, None) => x,
    };
    x = x.relu();

    let mut caps = x.conv2d(&params.primary_kernel, config.primary.stride)?;
    caps = match (&params.bn2_gamma, &params.primary_bias) {
        (Some(gamma), _) => caps.batch_norm(
            gamma,
            params.bn2_beta.as_ref().expect("bn2 beta"),
            params.bn2_running_mean.as_ref().expect("bn2 running mean"),
            params.bn2_running_var.as_ref().expect("bn2 running var"),
            train,
            BN_EPS,
            BN_MOMENTUM,
        )?,
        (None, Some(bias)) => {
            let pc = config.primary.capsule_types * config.primary.capsule_dim;
            caps.add(&bias.reshape(&[pc, 1, 1])?)?
        }
        (None, None) => caps,
    };

    // [b, types*dim, h2, w2] -> capsules indexed by (type, y, x) with the
    // capsule dimension last
    let (h2, w2) = dims.primary_hw;
    let (types, cdim) = (config.primary.capsule_types, config.primary.capsule_dim);
    let u = caps
        .reshape(&[batch, types, cdim, h2, w2])?
        .permute(&[0, 1, 3, 4, 2])?
        .reshape(&[batch, dims.n_lower, cdim])?;
    let u = routing::squash(&u)?;

    // predictions u_hat[b, i, j, :] = u[b, i, :] * W_ij
    let u_rows = u.reshape(&[batch, dims.n_lower, 1, 1, cdim])?;
    let w = params.w_caps.reshape(&[
        1,
        dims.n_lower,
        config.classes,
        cdim,
        config.class_capsule_dim,
    ])?;
    let u_hat = u_rows.matmul(&w)?.reshape(&[
        batch,
        dims.n_lower,
        config.classes,
        config.class_capsule_dim,
    ])?;

    let predictions = PredictionTensor::new(u_hat)?;
    let state = routing::route(&predictions, &config.routing)?;
    Ok((state.outputs.clone(), state))
}

/// Predicted class per batch item: the capsule with the largest norm, ties
/// to the lowest index.
pub fn predict<T: Real>(class_capsules: &Tensor<T>) -> Vec<usize> {
    let shape = class_capsules.shape();
    let (batch, classes, dim) = (shape[0], shape[1], shape[2]);
    let data = class_capsules.data();
    let mut out = Vec::with_capacity(batch);
    for s in 0..batch {
        let mut best = 0usize;
        let mut best_norm = T::neg_infinity();
        for k in 0..classes {
            let base = (s * classes + k) * dim;
            let mut sq = T::zero();
            for d in 0..dim {
                sq = sq + data[base + d] * data[base + d];
            }
            if sq > best_norm {
                best_norm = sq;
                best = k;
            }
        }
        out.push(best);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "margin loss requires 0 < m_minus < m_plus < 1, got ({}, {})",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::InvalidConfig("margin loss lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of
/// `sum_k [ T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2 ]`.
pub fn margin_loss<T: Real>(
    class_capsules: &Tensor<T>,
    labels: &[usize],
    config: &MarginLossConfig,
) -> Result<Tensor<T>> {
    config.validate()?;
    let shape = class_capsules.shape();
    let (batch, classes) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(Error::DataLength { expected: batch, got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut onehot = vec![T::zero(); batch * classes];
    for (s, &l) in labels.iter().enumerate() {
        onehot[s * classes + l] = T::one();
    }
    let targets = Tensor::from_vec(&[batch, classes], onehot)?;

    let norms = class_capsules.l2_norm(2)?.reshape(&[batch, classes])?;
    let present = norms.neg().add_scalar(config.m_plus).max_scalar(0.0).square();
    let absent = norms.add_scalar(-config.m_minus).max_scalar(0.0).square();
    let absent_weight = targets.neg().add_scalar(1.0).mul_scalar(config.lambda);
    let per_class = targets.mul(&present)?.add(&absent_weight.mul(&absent)?)?;
    Ok(per_class.reduce_sum(1, false)?.mean_all())
}
