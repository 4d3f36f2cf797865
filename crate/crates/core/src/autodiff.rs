//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive executed during a forward pass. Leaves are
//! copied in from owning [`Tensor`]s (model parameters, inputs, constant targets);
//! `backward` consumes the graph and hands back one gradient buffer per node that
//! requires grad. Nodes that do not depend on any grad-requiring leaf are kept for
//! their values only and are skipped during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which elements share a mean/variance in [`Graph::normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// One statistic per channel over (batch, spatial): batch normalization.
    PerChannel,
    /// One statistic per sample over (channel, spatial): layer normalization.
    PerSample,
    /// One statistic per (sample, channel group): group normalization.
    PerGroup(usize),
}

/// Source of the normalization statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Statistics computed from the input itself (biased variance).
    Batch,
    /// Externally supplied per-channel mean and variance, treated as constants.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    AvgPool2d { input: Var, kh: usize, kw: usize },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    Softmax { input: Var, temperature: f64 },
    LogSoftmax { input: Var, temperature: f64 },
    Pick { input: Var, indices: Vec<usize> },
    Normalize {
        input: Var,
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        batch_stats: bool,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = min(x, 0) - ln(1 + e^{-|x|})
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Elementwise logistic function, shared with the loss code that builds constant targets.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Row-wise `softmax(row / temperature)` with max subtraction.
pub fn softmax_rows(values: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, dst) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / temperature).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Row-wise `log_softmax(row / temperature)` with max subtraction.
pub fn log_softmax_rows(values: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, dst) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f64>().ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max) / temperature - lse;
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Maps each element of an (N, C, S) layout to its statistics group.
fn group_of(axes: NormAxes, n: usize, c: usize, channels: usize) -> usize {
    match axes {
        NormAxes::PerChannel => c,
        NormAxes::PerSample => n,
        NormAxes::PerGroup(g) => n * g + c / (channels / g),
    }
}

fn group_count(axes: NormAxes, batch: usize, channels: usize) -> usize {
    match axes {
        NormAxes::PerChannel => channels,
        NormAxes::PerSample => batch,
        NormAxes::PerGroup(g) => batch * g,
    }
}

/// Batch, channel and flattened-spatial extents of a normalization input.
fn norm_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("normalization needs (batch, channels, ..), got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf, requiring grad iff the tensor does. The tensor's own grad buffer is not copied.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::from_parts_unchecked(tensor.shape().to_vec(), tensor.into_values());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor in as a leaf with an explicit grad flag.
    pub fn param(&mut self, tensor: &Tensor, trainable: bool) -> Var {
        let value = Tensor::from_parts_unchecked(tensor.shape().to_vec(), tensor.values().to_vec());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.values()[0]
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::from_parts_unchecked(shape, values);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{name}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, name: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{name}: expected a 2-D tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner dimensions {k} and {k2} differ")));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), n, k, m);
        self.push("matmul", vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D cross-correlation of an (N, Cin, H, W) input with a (Cout, Cin, kh, kw) kernel and zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (self.shape(input), self.shape(kernel)) else {
            return Err(Error::dim(format!(
                "conv2d: expected 4-D input and kernel, got {:?} and {:?}",
                self.shape(input),
                self.shape(kernel)
            )));
        };
        if cin != kcin {
            return Err(Error::dim(format!("conv2d: input has {cin} channels, kernel expects {kcin}")));
        }
        if stride == 0 {
            return Err(Error::param("conv2d: stride must be positive"));
        }
        let (Some(ho), Some(wo)) = (conv_out_dim(h, kh, stride, padding), conv_out_dim(w, kw, stride, padding)) else {
            return Err(Error::dim("conv2d: kernel larger than padded input"));
        };
        let x = self.value(input).values();
        let k = self.value(kernel).values();
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * ho * wo..(b * cout + o + 1) * ho * wo];
                for c in 0..cin {
                    let plane = &x[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                    let kern = &k[(o * cin + c) * kh * kw..(o * cin + c + 1) * kh * kw];
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for ki in 0..kh {
                                let y = (i * stride + ki) as isize - padding as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let xx = (j * stride + kj) as isize - padding as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc += plane[y as usize * w + xx as usize] * kern[ki * kw + kj];
                                }
                            }
                            dst[i * wo + j] += acc;
                        }
                    }
                }
            }
        }
        self.push("conv2d", vec![n, cout, ho, wo], out, Op::Conv2d { input, kernel, stride, padding }, &[input, kernel])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x - y).collect();
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).values().iter().map(|x| x * factor).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`m` bias to every row of an (n, m) matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.matrix_dims("add_row_bias", x)?;
        if self.shape(bias) != [m] {
            return Err(Error::dim(format!("add_row_bias: bias {:?} for {m} columns", self.shape(bias))));
        }
        let b = self.value(bias).values();
        let out = self.value(x).values().chunks(m).flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b)).collect();
        self.push("add_row_bias", self.shape(x).to_vec(), out, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds a per-channel bias to an (N, C, ...) tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, s) = norm_layout(self.shape(x))?;
        if self.shape(bias) != [c] {
            return Err(Error::dim(format!("add_channel_bias: bias {:?} for {c} channels", self.shape(bias))));
        }
        let b = self.value(bias).values();
        let out = self.value(x).values().iter().enumerate().map(|(i, v)| v + b[(i / s) % c]).collect();
        self.push("add_channel_bias", self.shape(x).to_vec(), out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).values().iter().map(|&x| x.max(0.0)).collect();
        self.push("relu", self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).values().iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", self.shape(a).to_vec(), out, Op::Sigmoid(a), &[a])
    }

    /// `ln σ(x)`, evaluated without forming σ(x) so large negative inputs stay finite.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).values().iter().map(|&x| log_sigmoid(x)).collect();
        self.push("log_sigmoid", self.shape(a).to_vec(), out, Op::LogSigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).values().iter().map(|&x| x.ln()).collect();
        self.push("log", self.shape(a).to_vec(), out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).values().iter().map(|&x| x.exp()).collect();
        self.push("exp", self.shape(a).to_vec(), out, Op::Exp(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).values();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Per-row sum of an (n, m) matrix, giving shape (n).
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("sum_rows", a)?;
        let out = self.value(a).values().chunks(m).map(|r| r.iter().sum()).collect();
        self.push("sum_rows", vec![n], out, Op::SumRows(a), &[a])
    }

    /// Non-overlapping average pooling with window (kh, kw) over an (N, C, H, W) input.
    pub fn avg_pool2d(&mut self, input: Var, kh: usize, kw: usize) -> Result<Var> {
        let &[n, c, h, w] = self.shape(input) else {
            return Err(Error::dim(format!("avg_pool2d: expected 4-D input, got {:?}", self.shape(input))));
        };
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(Error::dim(format!("avg_pool2d: window {kh}x{kw} does not tile {h}x{w}")));
        }
        let (ho, wo) = (h / kh, w / kw);
        let x = self.value(input).values();
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    out[p * ho * wo + (i / kh) * wo + j / kw] += x[p * h * w + i * w + j] * norm;
                }
            }
        }
        self.push("avg_pool2d", vec![n, c, ho, wo], out, Op::AvgPool2d { input, kh, kw }, &[input])
    }

    /// Global average pooling: (N, C, H, W) → (N, C).
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(input) else {
            return Err(Error::dim(format!("global_avg_pool: expected 4-D input, got {:?}", self.shape(input))));
        };
        let pooled = self.avg_pool2d(input, h, w)?;
        self.reshape(pooled, vec![n, c])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim(format!("reshape: {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.value(a).values().to_vec();
        self.push("reshape", shape, out, Op::Reshape(a), &[a])
    }

    /// (N, ...) → (N, prod(...)).
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, vec![n, rest])
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat: no inputs"))?;
        let (n, _) = self.matrix_dims("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            if r != n {
                return Err(Error::dim(format!("concat: row counts {n} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[row * w..(row + 1) * w]);
            }
        }
        self.push("concat", vec![n, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of an (n, m) matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > m {
            return Err(Error::dim(format!("slice_cols: {start}..{} out of {m} columns", start + len)));
        }
        let v = self.value(a).values();
        let out = (0..n).flat_map(|r| v[r * m + start..r * m + start + len].iter().copied()).collect();
        self.push("slice_cols", vec![n, len], out, Op::SliceCols { input: a, start }, &[a])
    }

    /// Row-wise tempered softmax of an (n, m) matrix.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let (_, m) = self.matrix_dims("softmax", a)?;
        if !(temperature > 0.0) {
            return Err(Error::param(format!("softmax temperature must be positive, got {temperature}")));
        }
        let out = softmax_rows(self.value(a).values(), m, temperature);
        self.push("softmax", self.shape(a).to_vec(), out, Op::Softmax { input: a, temperature }, &[a])
    }

    /// Row-wise tempered log-softmax of an (n, m) matrix.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let (_, m) = self.matrix_dims("log_softmax", a)?;
        if !(temperature > 0.0) {
            return Err(Error::param(format!("softmax temperature must be positive, got {temperature}")));
        }
        let out = log_softmax_rows(self.value(a).values(), m, temperature);
        self.push("log_softmax", self.shape(a).to_vec(), out, Op::LogSoftmax { input: a, temperature }, &[a])
    }

    /// Picks one column per row of an (n, m) matrix, giving shape (n).
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims("pick", a)?;
        if indices.len() != n {
            return Err(Error::dim(format!("pick: {} indices for {n} rows", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("class index {bad} out of range for {m} classes")));
        }
        let v = self.value(a).values();
        let out = indices.iter().enumerate().map(|(r, &i)| v[r * m + i]).collect();
        self.push("pick", vec![n], out, Op::Pick { input: a, indices: indices.to_vec() }, &[a])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = self.log_softmax(logits, 1.0)?;
        let picked = self.pick(logp, labels)?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Affine normalization `gamma[c] * (x - mean) / sqrt(var + eps) + beta[c]` over an (N, C, ...) input.
    ///
    /// With [`NormStats::Batch`] the statistics (biased variance) come from the groups selected by
    /// `axes`; with [`NormStats::Fixed`] they are per-channel constants.
    pub fn normalize(&mut self, input: Var, gamma: Var, beta: Var, axes: NormAxes, stats: NormStats<'_>, eps: f64) -> Result<Var> {
        let (n, c, s) = norm_layout(self.shape(input))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("normalize: affine parameters must have length {c}")));
        }
        if let NormAxes::PerGroup(g) = axes {
            if g == 0 || c % g != 0 {
                return Err(Error::param(format!("group count {g} does not divide {c} channels")));
            }
        }
        let x = self.value(input).values();
        let (means, inv_std, batch_stats) = match stats {
            NormStats::Batch => {
                let groups = group_count(axes, n, c);
                let mut sum = vec![0.0; groups];
                let mut count = vec![0usize; groups];
                for (i, &v) in x.iter().enumerate() {
                    let g = group_of(axes, i / (c * s), (i / s) % c, c);
                    sum[g] += v;
                    count[g] += 1;
                }
                let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
                let mut sq = vec![0.0; groups];
                for (i, &v) in x.iter().enumerate() {
                    let g = group_of(axes, i / (c * s), (i / s) % c, c);
                    sq[g] += (v - means[g]).powi(2);
                }
                let inv: Vec<f64> = sq.iter().zip(&count).map(|(q, &k)| 1.0 / (q / k as f64 + eps).sqrt()).collect();
                (means, inv, true)
            }
            NormStats::Fixed { mean, var } => {
                if axes != NormAxes::PerChannel || mean.len() != c || var.len() != c {
                    return Err(Error::contract("fixed statistics must be per-channel with one entry per channel"));
                }
                let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv, false)
            }
        };
        if inv_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "normalize" });
        }
        let gm = self.value(gamma).values();
        let bt = self.value(beta).values();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let ch = (i / s) % c;
            let g = if batch_stats { group_of(axes, i / (c * s), ch, c) } else { ch };
            let h = (v - means[g]) * inv_std[g];
            xhat.push(h);
            out.push(gm[ch] * h + bt[ch]);
        }
        let shape = self.shape(input).to_vec();
        let op = Op::Normalize { input, gamma, beta, axes, batch_stats, xhat, inv_std };
        self.push("normalize", shape, out, op, &[input, gamma, beta])
    }

    /// Runs the reverse sweep from a scalar loss, consuming the record.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Err(Error::EmptyRecord);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
        }

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let out = node.value.values();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let m = nodes[b.0].value.shape()[1];
                    let av = nodes[a.0].value.values();
                    let bv = nodes[b.0].value.values();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for i in 0..n {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += gy[i * m + j] * bv[p * m + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for i in 0..n {
                            for p in 0..k {
                                let a_ip = av[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    gb[p * m + j] += a_ip * gy[i * m + j];
                                }
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernel, stride, padding } => {
                    let &[n, cin, h, w] = nodes[input.0].value.shape() else { unreachable!() };
                    let &[cout, _, kh, kw] = nodes[kernel.0].value.shape() else { unreachable!() };
                    let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                    let (stride, padding) = (*stride, *padding);
                    let x = nodes[input.0].value.values();
                    let k = nodes[kernel.0].value.values();
                    let need_x = nodes[input.0].requires_grad;
                    let need_k = nodes[kernel.0].requires_grad;
                    let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
                    let mut gk = vec![0.0; if need_k { k.len() } else { 0 }];
                    for b in 0..n {
                        for o in 0..cout {
                            for c in 0..cin {
                                let xoff = (b * cin + c) * h * w;
                                let koff = (o * cin + c) * kh * kw;
                                for i in 0..ho {
                                    for j in 0..wo {
                                        let g = gy[((b * cout + o) * ho + i) * wo + j];
                                        if g == 0.0 {
                                            continue;
                                        }
                                        for ki in 0..kh {
                                            let y = (i * stride + ki) as isize - padding as isize;
                                            if y < 0 || y >= h as isize {
                                                continue;
                                            }
                                            for kj in 0..kw {
                                                let xx = (j * stride + kj) as isize - padding as isize;
                                                if xx < 0 || xx >= w as isize {
                                                    continue;
                                                }
                                                let xi = xoff + y as usize * w + xx as usize;
                                                let kidx = koff + ki * kw + kj;
                                                if need_x {
                                                    gx[xi] += g * k[kidx];
                                                }
                                                if need_k {
                                                    gk[kidx] += g * x[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dst) = acc(&mut grads, &nodes, *input) {
                        dst.iter_mut().zip(&gx).for_each(|(d, g)| *d += g);
                    }
                    if let Some(dst) = acc(&mut grads, &nodes, *kernel) {
                        dst.iter_mut().zip(&gk).for_each(|(d, g)| *d += g);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        gb.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        gb.iter_mut().zip(&gy).for_each(|(d, g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.values();
                    let bv = nodes[b.0].value.values();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((d, g), y) in ga.iter_mut().zip(&gy).zip(bv) {
                            *d += g * y;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for ((d, g), x) in gb.iter_mut().zip(&gy).zip(av) {
                            *d += g * x;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&gy).for_each(|(d, g)| *d += g * f);
                    }
                }
                Op::AddRowBias(x, bias) => {
                    let m = nodes[bias.0].value.len();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *bias) {
                        for row in gy.chunks(m) {
                            gb.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::AddChannelBias(x, bias) => {
                    let c = nodes[bias.0].value.len();
                    let s: usize = nodes[x.0].value.shape()[2..].iter().product();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *bias) {
                        for (i, g) in gy.iter().enumerate() {
                            gb[(i / s) % c] += g;
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = nodes[a.0].value.values();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((d, g), x) in ga.iter_mut().zip(&gy).zip(av) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((d, g), y) in ga.iter_mut().zip(&gy).zip(out) {
                            *d += g * y * (1.0 - y);
                        }
                    }
                }
                Op::LogSigmoid(a) => {
                    let av = nodes[a.0].value.values();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((d, g), x) in ga.iter_mut().zip(&gy).zip(av) {
                            *d += g * sigmoid(-x);
                        }
                    }
                }
                Op::Log(a) => {
                    let av = nodes[a.0].value.values();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((d, g), x) in ga.iter_mut().zip(&gy).zip(av) {
                            *d += g / x;
                        }
                    }
                }
                Op::Exp(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((d, g), y) in ga.iter_mut().zip(&gy).zip(out) {
                            *d += g * y;
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|d| *d += gy[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        let g = gy[0] / ga.len() as f64;
                        ga.iter_mut().for_each(|d| *d += g);
                    }
                }
                Op::SumRows(a) => {
                    let m = nodes[a.0].value.shape()[1];
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for (i, d) in ga.iter_mut().enumerate() {
                            *d += gy[i / m];
                        }
                    }
                }
                Op::AvgPool2d { input, kh, kw } => {
                    let &[_, _, h, w] = nodes[input.0].value.shape() else { unreachable!() };
                    let (kh, kw) = (*kh, *kw);
                    let (ho, wo) = (h / kh, w / kw);
                    let norm = 1.0 / (kh * kw) as f64;
                    if let Some(gx) = acc(&mut grads, &nodes, *input) {
                        for (i, d) in gx.iter_mut().enumerate() {
                            let p = i / (h * w);
                            let r = (i % (h * w)) / w;
                            let col = i % w;
                            *d += gy[p * ho * wo + (r / kh) * wo + col / kw] * norm;
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        if let Some(gp) = acc(&mut grads, &nodes, *p) {
                            for r in 0..n {
                                for j in 0..w {
                                    gp[r * w + j] += gy[r * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { input, start } => {
                    let m = nodes[input.0].value.shape()[1];
                    let len = node.value.shape()[1];
                    if let Some(ga) = acc(&mut grads, &nodes, *input) {
                        for (r, row) in gy.chunks(len).enumerate() {
                            for (j, g) in row.iter().enumerate() {
                                ga[r * m + start + j] += g;
                            }
                        }
                    }
                }
                Op::Softmax { input, temperature } => {
                    let m = node.value.shape()[1];
                    if let Some(ga) = acc(&mut grads, &nodes, *input) {
                        for ((grow, srow), drow) in gy.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                            let dot: f64 = grow.iter().zip(srow).map(|(g, s)| g * s).sum();
                            for ((d, g), s) in drow.iter_mut().zip(grow).zip(srow) {
                                *d += s * (g - dot) / temperature;
                            }
                        }
                    }
                }
                Op::LogSoftmax { input, temperature } => {
                    let m = node.value.shape()[1];
                    if let Some(ga) = acc(&mut grads, &nodes, *input) {
                        for ((grow, lrow), drow) in gy.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                            let total: f64 = grow.iter().sum();
                            for ((d, g), l) in drow.iter_mut().zip(grow).zip(lrow) {
                                *d += (g - l.exp() * total) / temperature;
                            }
                        }
                    }
                }
                Op::Pick { input, indices } => {
                    let m = nodes[input.0].value.shape()[1];
                    if let Some(ga) = acc(&mut grads, &nodes, *input) {
                        for (r, &i) in indices.iter().enumerate() {
                            ga[r * m + i] += gy[r];
                        }
                    }
                }
                Op::Normalize { input, gamma, beta, axes, batch_stats, xhat, inv_std } => {
                    let shape = nodes[input.0].value.shape();
                    let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                    let gm = nodes[gamma.0].value.values();
                    if let Some(gg) = acc(&mut grads, &nodes, *gamma) {
                        for (i, (g, h)) in gy.iter().zip(xhat).enumerate() {
                            gg[(i / s) % c] += g * h;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *beta) {
                        for (i, g) in gy.iter().enumerate() {
                            gb[(i / s) % c] += g;
                        }
                    }
                    if nodes[input.0].requires_grad {
                        let dxhat: Vec<f64> = gy.iter().enumerate().map(|(i, g)| g * gm[(i / s) % c]).collect();
                        let mut dx = vec![0.0; dxhat.len()];
                        if *batch_stats {
                            let groups = group_count(*axes, n, c);
                            let mut sum_d = vec![0.0; groups];
                            let mut sum_dh = vec![0.0; groups];
                            let mut count = vec![0usize; groups];
                            for (i, (d, h)) in dxhat.iter().zip(xhat).enumerate() {
                                let g = group_of(*axes, i / (c * s), (i / s) % c, c);
                                sum_d[g] += d;
                                sum_dh[g] += d * h;
                                count[g] += 1;
                            }
                            for (i, out) in dx.iter_mut().enumerate() {
                                let g = group_of(*axes, i / (c * s), (i / s) % c, c);
                                let m = count[g] as f64;
                                *out = inv_std[g] * (dxhat[i] - sum_d[g] / m - xhat[i] * sum_dh[g] / m);
                            }
                        } else {
                            for (i, out) in dx.iter_mut().enumerate() {
                                *out = dxhat[i] * inv_std[(i / s) % c];
                            }
                        }
                        if let Some(gx) = acc(&mut grads, &nodes, *input) {
                            gx.iter_mut().zip(&dx).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric { op: "backward" });
        }
        // trainable leaves the loss does not depend on get an explicit zero gradient
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if g.is_none() && node.requires_grad && matches!(node.op, Op::Leaf) {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Central-difference gradient estimate of a scalar function at `x`.
///
/// Component `i` is `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_difference<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.values_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.values_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric { op: "finite_difference" });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖, 1e-8)` used by gradient checks.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.5, 2.0, 7.0]));
        let out = g.matmul(i, a).unwrap();
        assert_eq!(g.value(out).values(), &[3.0, -1.5, 2.0, 7.0]);
    }

    #[test]
    fn conv2d_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).values(), &[10.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&[0.0, 0.0], 2, 2.0), vec![0.5, 0.5]);
        let p = softmax_rows(&[2.0, 0.0], 2, 2.0);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        for c in [-300.0, 0.0, 17.5, 900.0] {
            for temp in [0.5, 1.0, 4.0] {
                let p = softmax_rows(&[c, c, c], 3, temp);
                assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
            }
        }
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(g.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[50.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.scalar(l) < 1e-6);

        let x = g.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!((g.scalar(l) - 1.5514).abs() < 1e-4);

        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_polynomial_and_relu_gate() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x), Some(&[6.0][..]));

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]).with_requires_grad(true));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.clone().backward(y), Err(Error::Contract(_))));

        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::EmptyRecord)));
    }

    #[test]
    fn shape_mismatch_and_numeric_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0; 6]));
        let b = g.constant(t(&[2, 3], &[1.0; 6]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let z = g.constant(t(&[1], &[0.0]));
        match g.log(z) {
            Err(Error::Numeric { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        let big = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(big), Err(Error::Numeric { op: "exp" })));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -2.0]).with_requires_grad(true));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.add(a, x).unwrap();
        let s = g.sum(b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x), Some(&[4.0, 4.0][..]));
    }

    #[test]
    fn finite_difference_examples() {
        let x = t(&[1], &[3.0]);
        let d = finite_difference(|x| Ok(x.values()[0].powi(2)), &x, 1e-5).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-8);
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let d = finite_difference(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert_eq!(d, vec![0.0; 3]);
        let err = finite_difference(|x| Ok(x.values()[0].ln()), &t(&[1], &[0.0]), 1e-5);
        assert!(matches!(err, Err(Error::Numeric { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-50.0) + 50.0).abs() < 1e-12);
        assert!(log_sigmoid(50.0).abs() < 1e-20);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn group_norm_with_group_per_channel_is_instance_norm() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64).collect();
        let x = g.constant(t(&[2, 2, 2, 2], &vals));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.normalize(x, gamma, beta, NormAxes::PerGroup(2), NormStats::Batch, 1e-5).unwrap();
        let out = g.value(y).values();
        for plane in 0..4 {
            let p = &vals[plane * 4..plane * 4 + 4];
            let m = p.iter().sum::<f64>() / 4.0;
            let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            for k in 0..4 {
                let expected = (p[k] - m) / (v + 1e-5).sqrt();
                assert!((out[plane * 4 + k] - expected).abs() < 1e-12);
            }
        }
    }
}
