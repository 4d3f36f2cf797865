use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormAxes, NormStats, Var};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

/// How a normalization layer behaves during one forward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Normalize by batch statistics, update running statistics.
    Train,
    /// Normalize by running statistics, no update.
    Eval,
    /// Teacher adaptation: update running statistics, never expose affine parameters to gradients.
    AdaptStats(AdaptNorm),
    /// Same as `Eval`; marks statistics that stay fixed across tasks.
    Frozen,
}

/// What an `AdaptStats` forward normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptNorm {
    /// Current batch statistics, as in training mode.
    #[default]
    BatchStats,
    /// The running statistics right after they absorbed the current batch.
    UpdatedRunning,
}

impl NormMode {
    fn uses_batch_stats(self) -> bool {
        matches!(self, NormMode::Train | NormMode::AdaptStats(_))
    }
}

/// Fully connected layer `x W + b` with `W` of shape (in, out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero bias, for relu-followed layers.
    pub fn he_uniform(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts_unchecked(vec![input, output], w),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Uniform weights and bias in `±1/sqrt(fan_in)` (the common default for linear classifiers).
    pub fn kaiming_uniform(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..output).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts_unchecked(vec![input, output], w),
            bias: Tensor::from_parts_unchecked(vec![output], b),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var, trainable: [bool; 2]) -> Result<(Var, [Var; 2])> {
        let w = g.param(&self.weight, trainable[0]);
        let b = g.param(&self.bias, trainable[1]);
        let xw = g.matmul(x, w)?;
        Ok((g.add_row_bias(xw, b)?, [w, b]))
    }
}

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn he_uniform(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts_unchecked(vec![cout, cin, kernel, kernel], w),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var, trainable: [bool; 2]) -> Result<(Var, [Var; 2])> {
        let w = g.param(&self.weight, trainable[0]);
        let b = g.param(&self.bias, trainable[1]);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        Ok((g.add_channel_bias(y, b)?, [w, b]))
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-channel mean and biased variance over (batch, spatial).
pub fn channel_stats(values: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (c, s) = (shape[1], shape[2..].iter().product::<usize>());
    let count = (values.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in values.iter().enumerate() {
        mean[(i / s) % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, v) in values.iter().enumerate() {
        let ch = (i / s) % c;
        var[ch] += (v - mean[ch]).powi(2);
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

impl BatchNormLayer {
    pub fn new(num_features: usize) -> Self {
        Self::with_options(num_features, 0.1, 1e-5)
    }

    pub fn with_options(num_features: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::full(&[num_features], 1.0),
            beta: Tensor::zeros(&[num_features]),
            running_mean: vec![0.0; num_features],
            running_var: vec![1.0; num_features],
            momentum,
            eps,
        }
    }

    pub fn num_features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.num_features();
        if mean.len() != c || var.len() != c {
            return Err(Error::dim(format!("running statistics must have length {c}")));
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::State("running variance must be positive and finite".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Forward pass over an (N, C, ...) input.
    ///
    /// Batch-statistics modes normalize with the biased batch variance and fold the
    /// unbiased one into `running_var` via the momentum EMA.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: NormMode, trainable: [bool; 2]) -> Result<(Var, [Var; 2])> {
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.num_features() {
            return Err(Error::dim(format!(
                "batch norm over {} channels got input {shape:?}",
                self.num_features()
            )));
        }
        let trainable = if matches!(mode, NormMode::AdaptStats(_)) { [false, false] } else { trainable };
        let gamma = g.param(&self.gamma, trainable[0]);
        let beta = g.param(&self.beta, trainable[1]);
        if mode.uses_batch_stats() && shape[0] < 2 {
            return Err(Error::DegenerateBatch(shape[0]));
        }
        let y = match mode {
            NormMode::Train | NormMode::AdaptStats(AdaptNorm::BatchStats) => {
                let y = g.normalize(x, gamma, beta, NormAxes::PerChannel, NormStats::Batch, self.eps)?;
                self.absorb_batch(g.value(x).values(), &shape);
                y
            }
            NormMode::AdaptStats(AdaptNorm::UpdatedRunning) => {
                self.absorb_batch(g.value(x).values(), &shape);
                let stats = NormStats::Fixed { mean: &self.running_mean, var: &self.running_var };
                g.normalize(x, gamma, beta, NormAxes::PerChannel, stats, self.eps)?
            }
            NormMode::Eval | NormMode::Frozen => {
                let stats = NormStats::Fixed { mean: &self.running_mean, var: &self.running_var };
                g.normalize(x, gamma, beta, NormAxes::PerChannel, stats, self.eps)?
            }
        };
        Ok((y, [gamma, beta]))
    }

    fn absorb_batch(&mut self, values: &[f64], shape: &[usize]) {
        let (mean, biased) = channel_stats(values, shape);
        let count = (values.len() / shape[1]) as f64;
        let m = self.momentum;
        for c in 0..self.num_features() {
            let unbiased = biased[c] * count / (count - 1.0);
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased;
        }
    }
}

/// Normalization without running state: layer norm (one group per sample) or group norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatelessNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// `None` for layer norm, `Some(groups)` for group norm.
    pub groups: Option<usize>,
    pub eps: f64,
}

impl StatelessNorm {
    pub fn layer_norm(channels: usize) -> Self {
        Self { gamma: Tensor::full(&[channels], 1.0), beta: Tensor::zeros(&[channels]), groups: None, eps: 1e-5 }
    }

    pub fn group_norm(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::param(format!("group count {groups} does not divide {channels} channels")));
        }
        Ok(Self { groups: Some(groups), ..Self::layer_norm(channels) })
    }

    pub(crate) fn forward(&self, g: &mut Graph, x: Var, trainable: [bool; 2]) -> Result<(Var, [Var; 2])> {
        let gamma = g.param(&self.gamma, trainable[0]);
        let beta = g.param(&self.beta, trainable[1]);
        let axes = match self.groups {
            None => NormAxes::PerSample,
            Some(k) => NormAxes::PerGroup(k),
        };
        Ok((g.normalize(x, gamma, beta, axes, NormStats::Batch, self.eps)?, [gamma, beta]))
    }
}

/// Alternative normalization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AltNorm {
    LayerNorm,
    GroupNorm(usize),
}

/// Stateless normalization of `x` with identity affine parameters folded in by the caller.
pub fn altnorm_forward(g: &mut Graph, x: Var, kind: AltNorm, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let axes = match kind {
        AltNorm::LayerNorm => NormAxes::PerSample,
        AltNorm::GroupNorm(k) => NormAxes::PerGroup(k),
    };
    g.normalize(x, gamma, beta, axes, NormStats::Batch, eps)
}
