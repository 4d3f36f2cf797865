//! Versioned flat binary model format.
//!
//! ```text
//! "CLTA" | version: u32
//! input rank: u32 | dims: u32 * rank | feature_dim: u32
//! layer count: u32 | layer record *
//! head count: u32 | (weight tensor, bias tensor) *
//! ```
//!
//! Tensors are written as `rank: u32 | dims: u32 * rank | values: f64 * n`; every integer
//! and float is little-endian. Layer records start with a one-byte tag:
//!
//! | tag | layer       | payload                                                    |
//! |-----|-------------|------------------------------------------------------------|
//! | 1   | dense       | weight, bias                                               |
//! | 2   | conv        | stride u32, padding u32, weight, bias                      |
//! | 3   | batch norm  | momentum f64, eps f64, gamma, beta, running mean, var      |
//! | 4   | layer norm  | eps f64, gamma, beta                                       |
//! | 5   | group norm  | groups u32, eps f64, gamma, beta                           |
//! | 6   | relu        | –                                                          |
//! | 7   | global pool | –                                                          |
//! | 8   | flatten     | –                                                          |

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layers::{BatchNormLayer, Conv2d, Linear, StatelessNorm};
use super::model::{IncrementalModel, Layer};

pub const MAGIC: &[u8; 4] = b"CLTA";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        t.shape().iter().for_each(|&d| self.u32(d));
        t.values().iter().for_each(|&v| self.f64(v));
    }
    fn vector(&mut self, v: &[f64]) {
        self.u32(1);
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Format { path: "<model bytes>".into(), msg: msg.into() }
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank == 0 || rank > 8 {
            return Err(corrupt(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("truncated tensor"));
        }
        let values = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, values)
    }
    fn vector(&mut self) -> Result<Vec<f64>> {
        Ok(self.tensor()?.into_values())
    }
}

impl IncrementalModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.u32(self.input_shape.len());
        self.input_shape.iter().for_each(|&d| w.u32(d));
        w.u32(self.feature_dim);
        w.u32(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    w.0.push(1);
                    w.tensor(&l.weight);
                    w.tensor(&l.bias);
                }
                Layer::Conv(c) => {
                    w.0.push(2);
                    w.u32(c.stride);
                    w.u32(c.padding);
                    w.tensor(&c.weight);
                    w.tensor(&c.bias);
                }
                Layer::BatchNorm(b) => {
                    w.0.push(3);
                    w.f64(b.momentum);
                    w.f64(b.eps);
                    w.tensor(&b.gamma);
                    w.tensor(&b.beta);
                    w.vector(b.running_mean());
                    w.vector(b.running_var());
                }
                Layer::Norm(n) => {
                    match n.groups {
                        None => w.0.push(4),
                        Some(k) => {
                            w.0.push(5);
                            w.u32(k);
                        }
                    }
                    w.f64(n.eps);
                    w.tensor(&n.gamma);
                    w.tensor(&n.beta);
                }
                Layer::Relu => w.0.push(6),
                Layer::GlobalAvgPool => w.0.push(7),
                Layer::Flatten => w.0.push(8),
            }
        }
        w.u32(self.heads.len());
        for h in &self.heads {
            w.tensor(&h.weight);
            w.tensor(&h.bias);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic, expected \"CLTA\""));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let rank = r.u32()?;
        let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let feature_dim = r.u32()?;
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let layer = match r.u8()? {
                1 => Layer::Dense(Linear { weight: r.tensor()?, bias: r.tensor()? }),
                2 => {
                    let (stride, padding) = (r.u32()?, r.u32()?);
                    Layer::Conv(Conv2d { weight: r.tensor()?, bias: r.tensor()?, stride, padding })
                }
                3 => {
                    let (momentum, eps) = (r.f64()?, r.f64()?);
                    let (gamma, beta) = (r.tensor()?, r.tensor()?);
                    let (mean, var) = (r.vector()?, r.vector()?);
                    let mut bn = BatchNormLayer::with_options(mean.len(), momentum, eps);
                    bn.gamma = gamma;
                    bn.beta = beta;
                    bn.set_running_stats(mean, var)?;
                    Layer::BatchNorm(bn)
                }
                4 => {
                    let eps = r.f64()?;
                    Layer::Norm(StatelessNorm { eps, gamma: r.tensor()?, beta: r.tensor()?, groups: None })
                }
                5 => {
                    let groups = r.u32()?;
                    let eps = r.f64()?;
                    Layer::Norm(StatelessNorm { eps, gamma: r.tensor()?, beta: r.tensor()?, groups: Some(groups) })
                }
                6 => Layer::Relu,
                7 => Layer::GlobalAvgPool,
                8 => Layer::Flatten,
                tag => return Err(corrupt(format!("unknown layer tag {tag}"))),
            };
            layers.push(layer);
        }
        let heads_n = r.u32()?;
        let mut model = IncrementalModel::from_layers(input_shape, layers, feature_dim);
        for _ in 0..heads_n {
            model.push_head(Linear { weight: r.tensor()?, bias: r.tensor()? });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(model)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    /// SHA-256 over the bit patterns of a subset of the model state.
    pub fn scoped_checksum(&self, scope: StateScope) -> String {
        let mut h = Sha256::new();
        let mut feed = |vals: &[f64]| vals.iter().for_each(|v| h.update(v.to_bits().to_le_bytes()));
        let infos = self.param_infos();
        match scope {
            StateScope::RunningStats => {
                for bn in self.batch_norm_layers() {
                    feed(bn.running_mean());
                    feed(bn.running_var());
                }
            }
            _ => {
                for (p, info) in self.parameters().into_iter().zip(infos) {
                    let keep = match scope {
                        StateScope::Parameters => true,
                        StateScope::Backbone => matches!(info.location, super::ParamLocation::Backbone(_)),
                        StateScope::Head(t) => info.location == super::ParamLocation::Head(t),
                        StateScope::NormAffine => info.is_norm_affine(),
                        StateScope::NonNormParameters => !info.is_norm_affine(),
                        StateScope::RunningStats => unreachable!(),
                    };
                    if keep {
                        feed(p.values());
                    }
                }
            }
        }
        hex(&h.finalize())
    }
}

/// Subsets of model state for [`IncrementalModel::scoped_checksum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateScope {
    Parameters,
    Backbone,
    Head(usize),
    NormAffine,
    NonNormParameters,
    RunningStats,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
