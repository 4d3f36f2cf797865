//! Distillation losses and teacher update strategies.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, sigmoid_scalar, softmax_rows, Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::sgd_step;
use crate::nn::{AdaptNorm, Linear, NormMode, ParamScope, TeacherSnapshot};
use crate::seed::{self, purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdVariant {
    Gkd,
    Tkd,
    Mkd,
    Ancl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub variant: KdVariant,
    pub temperature: f64,
    pub lambda: f64,
    /// Weight of the ANCL auxiliary term; `None` means "same as `lambda`".
    pub lambda_aux: Option<f64>,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { variant: KdVariant::Gkd, temperature: 2.0, lambda: 10.0, lambda_aux: None }
    }
}

impl KdConfig {
    pub fn new(variant: KdVariant, temperature: f64, lambda: f64) -> Self {
        Self { variant, temperature, lambda, lambda_aux: None }
    }

    pub fn lambda_aux(&self) -> f64 {
        self.lambda_aux.unwrap_or(self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(format!("kd.temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("kd.lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lambda_aux() >= 0.0 && self.lambda_aux().is_finite()) {
            return Err(Error::param("kd.lambda_aux must be non-negative"));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, student: Var, teacher: &Tensor, op: &str) -> Result<()> {
    if g.shape(student) != teacher.shape() || teacher.shape().len() != 2 {
        return Err(Error::contract(format!(
            "{op}: student logits {:?} and teacher logits {:?} differ",
            g.shape(student),
            teacher.shape()
        )));
    }
    Ok(())
}

/// `-mean_n Σ_i p_i log p̂_i` for a constant target distribution `p` (rows of `target`).
fn soft_cross_entropy(g: &mut Graph, log_q: Var, target: Vec<f64>) -> Result<Var> {
    let shape = g.shape(log_q).to_vec();
    let n = shape[0] as f64;
    let p = g.constant(Tensor::new(shape, target)?);
    let prod = g.mul(p, log_q)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / n)
}

/// Cross-entropy between tempered softmaxes of teacher and student over the whole old-class axis.
pub fn gkd_loss(g: &mut Graph, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    same_shape(g, student, teacher, "gkd_loss")?;
    let cols = teacher.shape()[1];
    let p = softmax_rows(teacher.values(), cols, temperature);
    let log_q = g.log_softmax(student, temperature)?;
    soft_cross_entropy(g, log_q, p)
}

/// Sum over tasks of the batch-mean `KL(p ‖ p̂)` between per-head tempered softmaxes.
pub fn tkd_loss(g: &mut Graph, pairs: &[(Var, &Tensor)], temperature: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("tkd_loss needs at least one previous task"));
    }
    let mut total: Option<Var> = None;
    for &(student, teacher) in pairs {
        same_shape(g, student, teacher, "tkd_loss")?;
        let cols = teacher.shape()[1];
        let n = teacher.shape()[0] as f64;
        let p = softmax_rows(teacher.values(), cols, temperature);
        let log_p = log_softmax_rows(teacher.values(), cols, temperature);
        let neg_entropy: f64 = p.iter().zip(&log_p).map(|(a, b)| a * b).sum::<f64>() / n;
        let log_q = g.log_softmax(student, temperature)?;
        let ce = soft_cross_entropy(g, log_q, p)?;
        let offset = g.constant(Tensor::scalar(neg_entropy)?);
        let kl = g.add(ce, offset)?;
        total = Some(match total {
            None => kl,
            Some(t) => g.add(t, kl)?,
        });
    }
    Ok(total.unwrap())
}

/// `-mean_n Σ_i σ(y_t,i) log σ(y_s,i)`: element-wise sigmoid targets, no temperature.
pub fn mkd_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    same_shape(g, student, teacher, "mkd_loss")?;
    let target = teacher.values().iter().map(|&v| sigmoid_scalar(v)).collect();
    let log_q = g.log_sigmoid(student)?;
    soft_cross_entropy(g, log_q, target)
}

/// `λ·gkd(old columns, main teacher) + λ_aux·gkd(current columns, auxiliary teacher)`.
pub fn ancl_loss(
    g: &mut Graph,
    student_old: Var,
    main_teacher: &Tensor,
    student_current: Var,
    aux_teacher: Option<&Tensor>,
    cfg: &KdConfig,
) -> Result<Var> {
    let aux = aux_teacher.ok_or_else(|| Error::contract("ANCL needs an auxiliary teacher for the current task"))?;
    let main = gkd_loss(g, student_old, main_teacher, cfg.temperature)?;
    let main = g.scale(main, cfg.lambda)?;
    if cfg.lambda_aux() == 0.0 {
        return Ok(main);
    }
    let side = gkd_loss(g, student_current, aux, cfg.temperature)?;
    let side = g.scale(side, cfg.lambda_aux())?;
    g.add(main, side)
}

/// `ce + λ·kd`; without a KD term, or with λ = 0, the CE node itself is returned.
pub fn total_loss(g: &mut Graph, ce: Var, kd: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::param("lambda must be non-negative"));
    }
    match kd {
        Some(kd) if lambda != 0.0 => {
            let w = g.scale(kd, lambda)?;
            g.add(ce, w)
        }
        _ => Ok(ce),
    }
}

/// Distillation term of one student batch.
pub struct KdTerm {
    /// Already weighted; add directly to the CE loss.
    pub weighted: Var,
    /// Unweighted loss value for traces (for ANCL, the sum of both terms).
    pub value: f64,
}

/// Builds the variant's KD term. `student_heads` covers every head including the current one
/// (last); `teacher_heads` covers the previous heads only.
pub fn kd_term(
    g: &mut Graph,
    cfg: &KdConfig,
    student_heads: &[Var],
    teacher_heads: &[Tensor],
    aux_current: Option<&Tensor>,
) -> Result<KdTerm> {
    let old = teacher_heads.len();
    if old == 0 || student_heads.len() <= old {
        return Err(Error::contract("distillation needs previous heads and a current head"));
    }
    let concat = |g: &mut Graph| -> Result<(Var, Tensor)> {
        let s = if old == 1 { student_heads[0] } else { g.concat(&student_heads[..old])? };
        Ok((s, concat_cols(teacher_heads)?))
    };
    let (raw, value) = match cfg.variant {
        KdVariant::Gkd => {
            let (s, t) = concat(g)?;
            let l = gkd_loss(g, s, &t, cfg.temperature)?;
            (l, g.scalar(l))
        }
        KdVariant::Mkd => {
            let (s, t) = concat(g)?;
            let l = mkd_loss(g, s, &t)?;
            (l, g.scalar(l))
        }
        KdVariant::Tkd => {
            let pairs: Vec<(Var, &Tensor)> = student_heads[..old].iter().copied().zip(teacher_heads).collect();
            let l = tkd_loss(g, &pairs, cfg.temperature)?;
            (l, g.scalar(l))
        }
        KdVariant::Ancl => {
            let (s, t) = concat(g)?;
            let aux = aux_current.ok_or_else(|| Error::contract("ANCL needs an auxiliary teacher for the current task"))?;
            let current = *student_heads.last().unwrap();
            let main = gkd_loss(g, s, &t, cfg.temperature)?;
            let side = gkd_loss(g, current, aux, cfg.temperature)?;
            let value = g.scalar(main) + g.scalar(side);
            let a = g.scale(main, cfg.lambda)?;
            let b = g.scale(side, cfg.lambda_aux())?;
            return Ok(KdTerm { weighted: g.add(a, b)?, value });
        }
    };
    Ok(KdTerm { weighted: g.scale(raw, cfg.lambda)?, value })
}

/// Column-wise concatenation of (N, k_i) matrices.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let n = parts.first().ok_or_else(|| Error::contract("nothing to concatenate"))?.shape()[0];
    if parts.iter().any(|p| p.shape().len() != 2 || p.shape()[0] != n) {
        return Err(Error::dim("concatenated logits must share their row count"));
    }
    let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        for p in parts {
            let k = p.shape()[1];
            out.extend_from_slice(&p.values()[r * k..(r + 1) * k]);
        }
    }
    Tensor::new(vec![n, width], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    #[serde(alias = "frozen_teacher")]
    Frozen,
    Ta,
    CtFm,
    CtBn,
    PFm,
    PBn,
    FixBn,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Frozen => "FrozenTeacher",
            TeacherKind::Ta => "TA",
            TeacherKind::CtFm => "CT_FM",
            TeacherKind::CtBn => "CT_BN",
            TeacherKind::PFm => "P_FM",
            TeacherKind::PBn => "P_BN",
            TeacherKind::FixBn => "FixBN",
        }
    }

    pub fn is_pretrain(self) -> bool {
        matches!(self, TeacherKind::PFm | TeacherKind::PBn)
    }

    pub fn is_continuous(self) -> bool {
        matches!(self, TeacherKind::CtFm | TeacherKind::CtBn)
    }

    fn trains_norm_only(self) -> bool {
        matches!(self, TeacherKind::CtBn | TeacherKind::PBn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherStrategy {
    pub kind: TeacherKind,
    pub teacher_lr: f64,
    pub pretrain_epochs: usize,
    /// What TA normalizes the teacher's batch with.
    pub adapt_norm: AdaptNorm,
}

impl Default for TeacherStrategy {
    fn default() -> Self {
        Self { kind: TeacherKind::Frozen, teacher_lr: 0.01, pretrain_epochs: 5, adapt_norm: AdaptNorm::BatchStats }
    }
}

impl TeacherStrategy {
    pub fn of(kind: TeacherKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.kind.is_pretrain() || self.kind.is_continuous()) && !(self.teacher_lr > 0.0) {
            return Err(Error::param(format!("strategy.teacher_lr must be positive for {}", self.kind.name())));
        }
        if self.kind.is_pretrain() && self.pretrain_epochs == 0 {
            return Err(Error::param(format!("strategy.pretrain_epochs must be at least 1 for {}", self.kind.name())));
        }
        Ok(())
    }

    /// Normalization mode of the teacher's distillation forward.
    pub fn teacher_mode(&self) -> NormMode {
        match self.kind {
            TeacherKind::Ta => NormMode::AdaptStats(self.adapt_norm),
            TeacherKind::FixBn => NormMode::Frozen,
            _ => NormMode::Eval,
        }
    }
}

/// Teacher logits per old head, computed without gradients. TA updates the snapshot's running statistics.
pub fn teacher_forward(snapshot: Option<&mut TeacherSnapshot>, x: &Tensor, strategy: &TeacherStrategy) -> Result<Vec<Tensor>> {
    let snap = snapshot.ok_or_else(|| Error::contract("teacher_forward needs a teacher snapshot"))?;
    Ok(snap.model_mut().infer(x, strategy.teacher_mode(), false)?.heads)
}

/// Trains the teacher on new-task data through a scratch classifier `head` for the current task.
///
/// `P_*` kinds run `pretrain_epochs` epochs of shuffled mini-batches over `data`; `CT_*` kinds take
/// one SGD step on `data` as a single batch. `*_BN` kinds only train normalization gamma/beta.
/// Labels in `data` are global and shifted by `offset` into the head's range. Returns the mean
/// teacher CE of every epoch (one entry for `CT_*`).
pub fn teacher_auxiliary_update(
    snapshot: &mut TeacherSnapshot,
    head: &mut Linear,
    data: &Dataset,
    offset: usize,
    strategy: &TeacherStrategy,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let kind = strategy.kind;
    if !(kind.is_pretrain() || kind.is_continuous()) {
        return Err(Error::contract(format!("{} has no auxiliary teacher update", kind.name())));
    }
    if data.is_empty() {
        return Err(Error::Data("teacher update on empty data".into()));
    }
    let epochs = if kind.is_pretrain() { strategy.pretrain_epochs } else { 1 };
    let batch = if kind.is_pretrain() { batch_size.max(1) } else { data.len() };
    let scope = if kind.trains_norm_only() { ParamScope::NormAffine } else { ParamScope::All };
    let mut rng = seed::rng(seed::derive(seed, &[purpose::TEACHER]));
    let model = snapshot.model_mut();
    let has_trainable = model.param_infos().iter().any(|i| !kind.trains_norm_only() || i.is_norm_affine());
    model.push_head(head.clone());
    let head_index = model.num_heads() - 1;
    let mut trace = Vec::with_capacity(epochs);
    let result = (|| -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            if kind.is_pretrain() {
                order.shuffle(&mut rng);
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for rows in order.chunks(batch) {
                let (x, labels) = data.batch(rows)?;
                let local: Vec<usize> = labels.iter().map(|l| l.wrapping_sub(offset)).collect();
                if local.iter().any(|&l| l >= head.output_dim()) {
                    return Err(Error::Data("teacher update labels outside the current task".into()));
                }
                let mut g = Graph::new();
                let xv = g.param(&x, false);
                let out = model.forward(&mut g, xv, NormMode::Train, scope)?;
                let loss = g.cross_entropy(out.heads[head_index], &local)?;
                sum += g.scalar(loss) * rows.len() as f64;
                count += rows.len();
                if !has_trainable {
                    continue;
                }
                let grads = g.backward(loss)?;
                model.zero_grad();
                model.accumulate_gradients(&out.bindings, &grads)?;
                sgd_step(&mut model.scoped_parameters_mut(scope), strategy.teacher_lr, None)?;
                model.zero_grad();
            }
            trace.push(sum / count as f64);
        }
        Ok(())
    })();
    *head = model.pop_head().expect("scratch head present");
    result.map(|_| trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::nn::{snapshot_model, ArchSpec, BatchNormLayer, Family, HeadInit, IncrementalModel, Layer, NormKind, StateScope};

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn eval_loss(f: impl Fn(&mut Graph, Var) -> Result<Var>, student: &Tensor) -> f64 {
        let mut g = Graph::new();
        let s = g.param(student, true);
        let l = f(&mut g, s).unwrap();
        g.scalar(l)
    }

    fn grad_check(f: impl Fn(&mut Graph, Var) -> Result<Var>, student: &Tensor) -> f64 {
        let mut g = Graph::new();
        let s = g.param(student, true);
        let l = f(&mut g, s).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(s).unwrap().to_vec();
        let numeric = finite_difference(|x| Ok(eval_loss(&f, x)), student, 1e-6).unwrap();
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn gkd_hand_values() {
        let u = t(&[vec![0.0, 0.0]]);
        assert!((eval_loss(|g, s| gkd_loss(g, s, &u, 2.0), &u) - 2f64.ln()).abs() < 1e-12);
        let teacher = t(&[vec![2.0, 0.0]]);
        // p = (0.8808, 0.1192), p̂ = (0.5, 0.5): −Σ p ln p̂ = ln 2
        let v = eval_loss(|g, s| gkd_loss(g, s, &teacher, 1.0), &u);
        let p1 = 1.0 / (1.0 + (-2f64).exp());
        let oracle = -(p1 * 0.5f64.ln() + (1.0 - p1) * 0.5f64.ln());
        assert!((v - oracle).abs() < 1e-12);
        let v = eval_loss(|g, s| gkd_loss(g, s, &teacher, 1.0), &t(&[vec![1.0, 0.0]]));
        let q1 = 1.0 / (1.0 + (-1f64).exp());
        let oracle = -(p1 * q1.ln() + (1.0 - p1) * (1.0 - q1).ln());
        assert!((v - oracle).abs() < 1e-12);
        let mut g = Graph::new();
        let s = g.param(&u, true);
        assert!(matches!(gkd_loss(&mut g, s, &t(&[vec![1.0, 2.0, 3.0]]), 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn gkd_teacher_student_mismatch_hand_case() {
        // cross-entropy decomposes into teacher entropy plus KL(p ‖ p̂)
        let teacher = t(&[vec![2.0, 0.0]]);
        let student = t(&[vec![0.0, 0.0]]);
        let ce = eval_loss(|g, s| gkd_loss(g, s, &teacher, 1.0), &student);
        let p = [1.0 / (1.0 + (-2f64).exp()), 1.0 / (1.0 + 2f64.exp())];
        let entropy = -(p[0] * p[0].ln() + p[1] * p[1].ln());
        let kl = p[0] * (p[0] / 0.5).ln() + p[1] * (p[1] / 0.5).ln();
        assert!((ce - (entropy + kl)).abs() < 1e-12);
    }

    #[test]
    fn tkd_hand_values() {
        let same = t(&[vec![0.3, -1.0], vec![2.0, 0.1]]);
        assert!(eval_loss(|g, s| tkd_loss(g, &[(s, &same)], 2.0), &same).abs() < 1e-12);
        // teacher probs (0.75, 0.25) are logits (ln 3, 0); student uniform
        let teacher = t(&[vec![3f64.ln(), 0.0]]);
        let student = t(&[vec![0.0, 0.0]]);
        let oracle = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let one = eval_loss(|g, s| tkd_loss(g, &[(s, &teacher)], 1.0), &student);
        assert!((one - oracle).abs() < 1e-12);
        assert!((one - 0.1308).abs() < 1e-4);
        let two = eval_loss(|g, s| tkd_loss(g, &[(s, &teacher), (s, &teacher)], 1.0), &student);
        assert!((two - 0.2616).abs() < 1e-4);
        let mut g = Graph::new();
        assert!(matches!(tkd_loss(&mut g, &[], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn mkd_hand_values() {
        let z = t(&[vec![0.0, 0.0]]);
        assert!((eval_loss(|g, s| mkd_loss(g, s, &z), &z) - 2f64.ln()).abs() < 1e-12);
        let big = t(&[vec![50.0, 50.0]]);
        assert!(eval_loss(|g, s| mkd_loss(g, s, &big), &big) < 1e-6);
        let v = eval_loss(|g, s| mkd_loss(g, s, &t(&[vec![50.0]])), &t(&[vec![-50.0]]));
        assert!((v - 50.0).abs() < 1e-6);
    }

    #[test]
    fn shift_invariance_and_mkd_asymmetry() {
        let teacher = t(&[vec![1.0, -0.5, 0.2], vec![0.0, 0.7, -1.2]]);
        let student = t(&[vec![0.4, 0.1, -0.3], vec![-0.6, 0.2, 0.9]]);
        let shift = |x: &Tensor, c: f64| Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| v + c).collect()).unwrap();
        for c in [-3.0, 0.5, 7.0] {
            let (ts, ss) = (shift(&teacher, c), shift(&student, c));
            let a = eval_loss(|g, s| gkd_loss(g, s, &teacher, 2.0), &student);
            let b = eval_loss(|g, s| gkd_loss(g, s, &ts, 2.0), &ss);
            assert!((a - b).abs() < 1e-12);
            let a = eval_loss(|g, s| tkd_loss(g, &[(s, &teacher)], 2.0), &student);
            let b = eval_loss(|g, s| tkd_loss(g, &[(s, &ts)], 2.0), &ss);
            assert!((a - b).abs() < 1e-12);
            let a = eval_loss(|g, s| mkd_loss(g, s, &teacher), &student);
            let b = eval_loss(|g, s| mkd_loss(g, s, &ts), &ss);
            assert!((a - b).abs() > 1e-3);
        }
    }

    #[test]
    fn losses_match_finite_differences() {
        let teacher = t(&[vec![1.0, -0.5, 0.2], vec![0.0, 0.7, -1.2]]);
        let student = t(&[vec![0.4, 0.1, -0.3], vec![-0.6, 0.2, 0.9]]);
        assert!(grad_check(|g, s| gkd_loss(g, s, &teacher, 2.0), &student) < 1e-5);
        assert!(grad_check(|g, s| tkd_loss(g, &[(s, &teacher)], 2.0), &student) < 1e-5);
        assert!(grad_check(|g, s| mkd_loss(g, s, &teacher), &student) < 1e-5);
        let cfg = KdConfig { lambda_aux: Some(0.5), ..KdConfig::new(KdVariant::Ancl, 2.0, 3.0) };
        let aux = t(&[vec![0.3, 0.1], vec![-0.2, 0.4]]);
        let f = |g: &mut Graph, s: Var| {
            let old = g.slice_cols(s, 0, 3)?;
            let cur = g.slice_cols(s, 3, 2)?;
            ancl_loss(g, old, &teacher, cur, Some(&aux), &cfg)
        };
        let wide = t(&[vec![0.4, 0.1, -0.3, 0.2, 0.0], vec![-0.6, 0.2, 0.9, -0.1, 0.5]]);
        assert!(grad_check(f, &wide) < 1e-5);
    }

    #[test]
    fn ancl_reductions() {
        let teacher = t(&[vec![2.0, 0.0]]);
        let aux = t(&[vec![3f64.ln(), 0.0]]);
        let student = t(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let run = |cfg: KdConfig, aux: Option<&Tensor>| -> Result<f64> {
            let mut g = Graph::new();
            let s = g.param(&student, true);
            let old = g.slice_cols(s, 0, 2)?;
            let cur = g.slice_cols(s, 2, 2)?;
            let l = ancl_loss(&mut g, old, &teacher, cur, aux, &cfg)?;
            Ok(g.scalar(l))
        };
        let gkd = eval_loss(|g, s| gkd_loss(g, s, &teacher, 1.0), &t(&[vec![0.0, 0.0]]));
        let aux_ce = eval_loss(|g, s| gkd_loss(g, s, &aux, 1.0), &t(&[vec![0.0, 0.0]]));
        let cfg = KdConfig { lambda_aux: Some(0.0), ..KdConfig::new(KdVariant::Ancl, 1.0, 2.0) };
        assert_eq!(run(cfg, Some(&aux)).unwrap(), 2.0 * gkd);
        let cfg = KdConfig { lambda_aux: Some(1.0), ..KdConfig::new(KdVariant::Ancl, 1.0, 1.0) };
        assert!((run(cfg, Some(&aux)).unwrap() - (gkd + aux_ce)).abs() < 1e-12);
        assert!(matches!(run(cfg, None), Err(Error::Contract(_))));

        // λ = 0 with the student matching the auxiliary teacher: the auxiliary entropy remains
        let mut g = Graph::new();
        let s = g.param(&t(&[vec![0.0, 0.0, 3f64.ln(), 0.0]]), true);
        let old = g.slice_cols(s, 0, 2).unwrap();
        let cur = g.slice_cols(s, 2, 2).unwrap();
        let cfg = KdConfig { lambda_aux: Some(2.0), ..KdConfig::new(KdVariant::Ancl, 1.0, 0.0) };
        let l = ancl_loss(&mut g, old, &teacher, cur, Some(&aux), &cfg).unwrap();
        let entropy = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((g.scalar(l) - 2.0 * entropy).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let ce = g.param(&Tensor::scalar(1.0).unwrap(), true);
        let kd = g.param(&Tensor::scalar(2.0).unwrap(), true);
        let l = total_loss(&mut g, ce, Some(kd), 10.0).unwrap();
        assert_eq!(g.scalar(l), 21.0);
        assert_eq!(total_loss(&mut g, ce, Some(kd), 0.0).unwrap(), ce);
        assert_eq!(total_loss(&mut g, ce, None, 10.0).unwrap(), ce);
    }

    fn one_bn_teacher() -> TeacherSnapshot {
        let mut m = IncrementalModel::from_layers(vec![1], vec![Layer::BatchNorm(BatchNormLayer::new(1))], 1);
        m.add_task_head(1, HeadInit::Zeros, 0).unwrap();
        snapshot_model(&m)
    }

    #[test]
    fn frozen_and_ta_teacher_forward() {
        let x = t(&[vec![1.0], vec![3.0]]);
        let mut snap = one_bn_teacher();
        let before = snap.checksum();
        teacher_forward(Some(&mut snap), &x, &TeacherStrategy::of(TeacherKind::Frozen)).unwrap();
        teacher_forward(Some(&mut snap), &x, &TeacherStrategy::of(TeacherKind::FixBn)).unwrap();
        assert_eq!(snap.checksum(), before);

        let ta = TeacherStrategy::of(TeacherKind::Ta);
        teacher_forward(Some(&mut snap), &x, &ta).unwrap();
        let bn = snap.model().batch_norm_layers().next().unwrap().clone();
        assert!((bn.running_mean()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var()[0] - 1.1).abs() < 1e-12);
        teacher_forward(Some(&mut snap), &x, &ta).unwrap();
        let bn2 = snap.model().batch_norm_layers().next().unwrap();
        // batch mean 2, unbiased var 2: each EMA step closes 10% of the remaining gap
        assert!((bn2.running_mean()[0] - (0.2 + 0.1 * 1.8)).abs() < 1e-12);
        assert!((2.0 - bn2.running_mean()[0]) < (2.0 - bn.running_mean()[0]));
        assert!((2.0 - bn2.running_var()[0]) < (2.0 - bn.running_var()[0]));

        assert!(matches!(teacher_forward(None, &x, &ta), Err(Error::Contract(_))));
    }

    fn blobs(n: usize) -> Dataset {
        let spec = crate::data::SyntheticSpec::vector(2, 2, 6, n, 0.2, 4);
        crate::data::synthetic_stream(&spec).unwrap().tasks[1].train.clone()
    }

    fn teacher_model() -> (TeacherSnapshot, Linear) {
        let mut m = IncrementalModel::build(ArchSpec { family: Family::MicroMlp, norm: NormKind::Batch }, &[6], 3).unwrap();
        m.add_task_head(2, HeadInit::KaimingUniform, 3).unwrap();
        let mut rng = seed::rng(1);
        (snapshot_model(&m), Linear::kaiming_uniform(64, 2, &mut rng))
    }

    #[test]
    fn auxiliary_update_contracts() {
        let data = blobs(40);
        let (mut snap, mut head) = teacher_model();
        let params = snap.model().scoped_checksum(StateScope::Parameters);
        let stats = snap.model().scoped_checksum(StateScope::RunningStats);
        let zero = TeacherStrategy { teacher_lr: 0.0, ..TeacherStrategy::of(TeacherKind::CtFm) };
        teacher_auxiliary_update(&mut snap, &mut head, &data, 2, &zero, 16, 1).unwrap();
        assert_eq!(params, snap.model().scoped_checksum(StateScope::Parameters));
        assert_ne!(stats, snap.model().scoped_checksum(StateScope::RunningStats));
        assert_eq!(snap.model().num_heads(), 1);

        let non_norm = snap.model().scoped_checksum(StateScope::NonNormParameters);
        let norm = snap.model().scoped_checksum(StateScope::NormAffine);
        let pbn = TeacherStrategy { teacher_lr: 0.05, pretrain_epochs: 2, ..TeacherStrategy::of(TeacherKind::PBn) };
        teacher_auxiliary_update(&mut snap, &mut head, &data, 2, &pbn, 16, 1).unwrap();
        assert_eq!(non_norm, snap.model().scoped_checksum(StateScope::NonNormParameters));
        assert_ne!(norm, snap.model().scoped_checksum(StateScope::NormAffine));

        let ta = TeacherStrategy::of(TeacherKind::Ta);
        assert!(matches!(
            teacher_auxiliary_update(&mut snap, &mut head, &data, 2, &ta, 16, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pretraining_reduces_teacher_ce() {
        let data = blobs(60);
        let (mut snap, mut head) = teacher_model();
        let pfm = TeacherStrategy { teacher_lr: 0.05, pretrain_epochs: 1, ..TeacherStrategy::of(TeacherKind::PFm) };
        let ce = |snap: &mut TeacherSnapshot, head: &Linear| {
            let mut m = snap.model().clone();
            m.push_head(head.clone());
            let out = m.infer(data.inputs(), NormMode::Eval, false).unwrap();
            let mut g = Graph::new();
            let logits = g.param(out.heads.last().unwrap(), false);
            let local: Vec<usize> = data.labels().iter().map(|l| l - 2).collect();
            let l = g.cross_entropy(logits, &local).unwrap();
            g.scalar(l)
        };
        // warm the running statistics so the eval-mode measurement reflects the new data
        let zero = TeacherStrategy { teacher_lr: 0.0, ..TeacherStrategy::of(TeacherKind::CtFm) };
        for _ in 0..30 {
            teacher_auxiliary_update(&mut snap, &mut head, &data, 2, &zero, 16, 1).unwrap();
        }
        let before = ce(&mut snap, &head);
        teacher_auxiliary_update(&mut snap, &mut head, &data, 2, &pfm, 16, 1).unwrap();
        for _ in 0..30 {
            teacher_auxiliary_update(&mut snap, &mut head, &data, 2, &zero, 16, 1).unwrap();
        }
        let after = ce(&mut snap, &head);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn kd_term_variants() {
        let mut g = Graph::new();
        let a = g.param(&t(&[vec![0.1, 0.2]]), true);
        let b = g.param(&t(&[vec![0.3]]), true);
        let c = g.param(&t(&[vec![0.0, 1.0]]), true);
        let teachers = [t(&[vec![1.0, 0.0]]), t(&[vec![0.5]])];
        let cfg = KdConfig::new(KdVariant::Gkd, 2.0, 10.0);
        let term = kd_term(&mut g, &cfg, &[a, b, c], &teachers, None).unwrap();
        let joined = concat_cols(&teachers).unwrap();
        assert_eq!(joined.values(), &[1.0, 0.0, 0.5]);
        let mut g2 = Graph::new();
        let s = g2.param(&t(&[vec![0.1, 0.2, 0.3]]), true);
        let l = gkd_loss(&mut g2, s, &joined, 2.0).unwrap();
        assert!((term.value - g2.scalar(l)).abs() < 1e-15);
        assert!((g.scalar(term.weighted) - 10.0 * term.value).abs() < 1e-12);

        let ancl = KdConfig::new(KdVariant::Ancl, 2.0, 1.0);
        assert!(kd_term(&mut g, &ancl, &[a, b, c], &teachers, None).is_err());
        assert!(kd_term(&mut g, &cfg, &[a], &teachers[..1], None).is_err());
    }
}
