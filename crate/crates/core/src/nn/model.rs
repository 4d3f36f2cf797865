use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;

use super::layers::{BatchNormLayer, Conv2d, Linear, NormMode, StatelessNorm};

/// Normalization family used inside backbone blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    /// Normalization layers removed (identity passthrough).
    None,
    Layer,
    Group(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// dense 64 → norm → relu → dense 64 → norm → relu
    MicroMlp,
    /// three stride-2 3×3 conv blocks (8/16/32 channels) → global average pool
    MicroCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub norm: NormKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    #[default]
    KaimingUniform,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(Linear),
    Conv(Conv2d),
    BatchNorm(BatchNormLayer),
    /// Layer or group normalization.
    Norm(StatelessNorm),
    Relu,
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamLocation {
    Backbone(usize),
    Head(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamInfo {
    pub location: ParamLocation,
    pub role: ParamRole,
}

impl ParamInfo {
    pub fn is_norm_affine(&self) -> bool {
        matches!(self.role, ParamRole::NormScale | ParamRole::NormShift)
    }
}

/// Which parameters receive gradients during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    None,
    All,
    /// Only the head of the given task (0-based).
    Head(usize),
    /// Only gamma/beta of normalization layers.
    NormAffine,
    /// Backbone and heads `0..=k`, i.e. everything a model had right after task `k`.
    UpToHead(usize),
}

impl ParamScope {
    fn selects(self, info: &ParamInfo) -> bool {
        match self {
            ParamScope::None => false,
            ParamScope::All => true,
            ParamScope::Head(t) => info.location == ParamLocation::Head(t),
            ParamScope::NormAffine => info.is_norm_affine(),
            ParamScope::UpToHead(k) => match info.location {
                ParamLocation::Backbone(_) => true,
                ParamLocation::Head(t) => t <= k,
            },
        }
    }
}

/// Graph handles of the parameters used by one forward pass, in [`IncrementalModel::param_infos`] order.
#[derive(Debug, Clone, Default)]
pub struct ParamBindings {
    vars: Vec<Option<Var>>,
}

impl ParamBindings {
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars.get(index).copied().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits per head, in task order.
    pub heads: Vec<Var>,
    /// Backbone output (batch × feature_dim).
    pub features: Var,
    pub bindings: ParamBindings,
}

/// Result of a graph-free forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub heads: Vec<Tensor>,
    pub features: Option<Tensor>,
}

impl Inference {
    /// Concatenation of all head logits, (batch × total classes).
    pub fn logits(&self) -> Tensor {
        let n = self.heads[0].shape()[0];
        let total: usize = self.heads.iter().map(|h| h.shape()[1]).sum();
        let mut values = Vec::with_capacity(n * total);
        for r in 0..n {
            for h in &self.heads {
                let w = h.shape()[1];
                values.extend_from_slice(&h.values()[r * w..(r + 1) * w]);
            }
        }
        Tensor::from_parts_unchecked(vec![n, total], values)
    }
}

/// Shared backbone with one linear classifier head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalModel {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) heads: Vec<Linear>,
    pub(crate) feature_dim: usize,
}

fn norm_layer(kind: NormKind, channels: usize) -> Result<Option<Layer>> {
    Ok(match kind {
        NormKind::Batch => Some(Layer::BatchNorm(BatchNormLayer::new(channels))),
        NormKind::None => None,
        NormKind::Layer => Some(Layer::Norm(StatelessNorm::layer_norm(channels))),
        NormKind::Group(k) => Some(Layer::Norm(StatelessNorm::group_norm(channels, k)?)),
    })
}

impl IncrementalModel {
    pub const MLP_WIDTH: usize = 64;
    pub const CNN_CHANNELS: [usize; 3] = [8, 16, 32];

    /// Builds a headless model; `input_shape` excludes the batch axis.
    pub fn build(arch: ArchSpec, input_shape: &[usize], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::dim(format!("invalid input shape {input_shape:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::purpose::INIT]));
        match arch.family {
            Family::MicroMlp => Self::micro_mlp(input_shape, arch.norm, &mut rng),
            Family::MicroCnn => Self::micro_cnn(input_shape, arch.norm, &mut rng),
        }
    }

    fn micro_mlp(input_shape: &[usize], norm: NormKind, rng: &mut Rng) -> Result<Self> {
        let width = Self::MLP_WIDTH;
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        let mut fan_in: usize = input_shape.iter().product();
        for _ in 0..2 {
            layers.push(Layer::Dense(Linear::he_uniform(fan_in, width, rng)));
            layers.extend(norm_layer(norm, width)?);
            layers.push(Layer::Relu);
            fan_in = width;
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers, heads: Vec::new(), feature_dim: width })
    }

    fn micro_cnn(input_shape: &[usize], norm: NormKind, rng: &mut Rng) -> Result<Self> {
        let &[channels, _, _] = input_shape else {
            return Err(Error::dim(format!("MicroCNN needs (channels, height, width), got {input_shape:?}")));
        };
        let mut layers = Vec::new();
        let mut cin = channels;
        for cout in Self::CNN_CHANNELS {
            layers.push(Layer::Conv(Conv2d::he_uniform(cin, cout, 3, 2, 1, rng)));
            layers.extend(norm_layer(norm, cout)?);
            layers.push(Layer::Relu);
            cin = cout;
        }
        layers.push(Layer::GlobalAvgPool);
        Ok(Self { input_shape: input_shape.to_vec(), layers, heads: Vec::new(), feature_dim: cin })
    }

    /// Builds a model from explicit layers.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, feature_dim: usize) -> Self {
        Self { input_shape, layers, heads: Vec::new(), feature_dim }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Linear] {
        &mut self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(Linear::output_dim).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.head_sizes().iter().sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn batch_norm_layers(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Appends a classifier head for a new task.
    pub fn add_task_head(&mut self, num_classes: usize, init: HeadInit, seed: u64) -> Result<()> {
        if num_classes < 1 {
            return Err(Error::param("a task head needs at least one class"));
        }
        let head = match init {
            HeadInit::Zeros => Linear::zeros(self.feature_dim, num_classes),
            HeadInit::KaimingUniform => {
                let mut rng = seed::rng(seed::derive(seed, &[seed::purpose::HEAD, self.heads.len() as u64]));
                Linear::kaiming_uniform(self.feature_dim, num_classes, &mut rng)
            }
        };
        self.heads.push(head);
        Ok(())
    }

    pub(crate) fn push_head(&mut self, head: Linear) {
        self.heads.push(head);
    }

    pub(crate) fn pop_head(&mut self) -> Option<Linear> {
        self.heads.pop()
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut infos = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let loc = ParamLocation::Backbone(i);
            match layer {
                Layer::Dense(_) | Layer::Conv(_) => {
                    infos.push(ParamInfo { location: loc, role: ParamRole::Weight });
                    infos.push(ParamInfo { location: loc, role: ParamRole::Bias });
                }
                Layer::BatchNorm(_) | Layer::Norm(_) => {
                    infos.push(ParamInfo { location: loc, role: ParamRole::NormScale });
                    infos.push(ParamInfo { location: loc, role: ParamRole::NormShift });
                }
                Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
            }
        }
        for t in 0..self.heads.len() {
            infos.push(ParamInfo { location: ParamLocation::Head(t), role: ParamRole::Weight });
            infos.push(ParamInfo { location: ParamLocation::Head(t), role: ParamRole::Bias });
        }
        infos
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => out.extend([&l.weight, &l.bias]),
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta]),
                Layer::Norm(n) => out.extend([&n.gamma, &n.beta]),
                _ => {}
            }
        }
        for h in &self.heads {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta]),
                Layer::Norm(n) => out.extend([&mut n.gamma, &mut n.beta]),
                _ => {}
            }
        }
        for h in &mut self.heads {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    /// Parameters selected by `scope`, in canonical order.
    pub fn scoped_parameters_mut(&mut self, scope: ParamScope) -> Vec<&mut Tensor> {
        let infos = self.param_infos();
        self.parameters_mut()
            .into_iter()
            .zip(infos)
            .filter_map(|(p, info)| scope.selects(&info).then_some(p))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Runs the backbone and every head on `x` (batch-first, matching `input_shape`).
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: NormMode, scope: ParamScope) -> Result<ForwardOutput> {
        let shape = g.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "model expects per-sample shape {:?}, got batch shape {shape:?}",
                self.input_shape
            )));
        }
        let infos = self.param_infos();
        let mut vars: Vec<Option<Var>> = Vec::with_capacity(infos.len());
        let mut next = 0usize;
        let mut trainable = |count: usize| -> [bool; 2] {
            let t = [scope.selects(&infos[next]), count > 1 && scope.selects(&infos[next + 1])];
            next += count;
            t
        };
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(l) => {
                    let (y, ps) = l.forward(g, h, trainable(2))?;
                    vars.extend(ps.map(Some));
                    y
                }
                Layer::Conv(c) => {
                    let (y, ps) = c.forward(g, h, trainable(2))?;
                    vars.extend(ps.map(Some));
                    y
                }
                Layer::BatchNorm(bn) => {
                    let (y, ps) = bn.forward(g, h, mode, trainable(2))?;
                    vars.extend(ps.map(Some));
                    y
                }
                Layer::Norm(n) => {
                    let (y, ps) = n.forward(g, h, trainable(2))?;
                    vars.extend(ps.map(Some));
                    y
                }
                Layer::Relu => g.relu(h)?,
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Flatten => g.flatten(h)?,
            };
        }
        let features = h;
        if g.shape(features) != [g.shape(x)[0], self.feature_dim] {
            return Err(Error::dim(format!(
                "backbone produced {:?}, expected features of width {}",
                g.shape(features),
                self.feature_dim
            )));
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (y, ps) = head.forward(g, features, trainable(2))?;
            vars.extend(ps.map(Some));
            heads.push(y);
        }
        Ok(ForwardOutput { heads, features, bindings: ParamBindings { vars } })
    }

    /// Forward pass without gradients; `capture_features` also returns the backbone output.
    pub fn infer(&mut self, x: &Tensor, mode: NormMode, capture_features: bool) -> Result<Inference> {
        if self.heads.is_empty() && !capture_features {
            return Err(Error::contract("model has no heads"));
        }
        let mut g = Graph::new();
        let xv = g.param(x, false);
        let out = self.forward(&mut g, xv, mode, ParamScope::None)?;
        Ok(Inference {
            heads: out.heads.iter().map(|&h| g.value(h).clone()).collect(),
            features: capture_features.then(|| g.value(out.features).clone()),
        })
    }

    /// Adds the gradients of bound parameters into their `grad` buffers.
    pub fn accumulate_gradients(&mut self, bindings: &ParamBindings, grads: &Gradients) -> Result<()> {
        for (i, p) in self.parameters_mut().into_iter().enumerate() {
            if let Some(g) = bindings.var(i).and_then(|v| grads.get(v)) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Deep copy of a model taken at the end of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    model: IncrementalModel,
}

impl TeacherSnapshot {
    pub fn model(&self) -> &IncrementalModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut IncrementalModel {
        &mut self.model
    }

    pub fn into_model(self) -> IncrementalModel {
        self.model
    }

    pub fn checksum(&self) -> String {
        self.model.checksum()
    }
}

/// Deep structural copy with gradient buffers dropped.
pub fn snapshot_model(model: &IncrementalModel) -> TeacherSnapshot {
    let mut model = model.clone();
    model.zero_grad();
    TeacherSnapshot { model }
}

impl From<IncrementalModel> for TeacherSnapshot {
    fn from(mut model: IncrementalModel) -> Self {
        model.zero_grad();
        Self { model }
    }
}
