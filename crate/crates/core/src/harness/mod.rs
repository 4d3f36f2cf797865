//! Sequential-task training: warmup, per-task optimization with distillation, evaluation.

mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{grad_norm, lr_schedule, one_cycle_lr, sgd_step, TrainConfig, WarmupConfig};

use crate::autodiff::Graph;
use crate::data::{Dataset, Task, TaskStream};
use crate::distill::{kd_term, teacher_auxiliary_update, teacher_forward, KdConfig, KdVariant, TeacherKind, TeacherStrategy};
use crate::error::{Error, Result};
use crate::metrics::{self, AccuracyMatrix, MetricsReport};
use crate::nn::{snapshot_model, ArchSpec, HeadInit, IncrementalModel, Linear, NormMode, ParamScope, TeacherSnapshot};
use crate::seed::{self, purpose};
use crate::tensor::Tensor;

/// Everything that shapes one run apart from the data and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub head_init: HeadInit,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
    /// `None` trains by plain finetuning.
    pub kd: Option<KdConfig>,
    pub strategy: TeacherStrategy,
    /// Record per-epoch teacher/student BN-KLD and CKA.
    pub diagnostics: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.warmup.enabled {
            self.warmup.validate()?;
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
        }
        self.strategy.validate()
    }
}

/// Per-task measurements; every per-epoch vector has one entry per trained epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub ce: Vec<f64>,
    pub kd: Vec<f64>,
    /// Teacher vs. student BN-statistics KLD after each epoch (empty without teacher or BN).
    pub bn_kld: Vec<f64>,
    /// Linear CKA between teacher and student features on new-task data after each epoch.
    /// `None` where the features were degenerate.
    pub cka: Vec<Option<f64>>,
    pub warmup_loss: Vec<f64>,
    /// Mean teacher CE per auxiliary-update epoch (P_* pretraining) or per student epoch (CT_*).
    pub teacher_ce: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy_matrix: AccuracyMatrix,
    pub report: MetricsReport,
    pub traces: Vec<TaskTrace>,
    /// Teacher vs. student BN-statistics KLD at the end of each task with a teacher.
    pub final_bn_kld: Vec<Option<f64>>,
    /// Task-confusion counts of the final model.
    pub confusion: Vec<Vec<usize>>,
    pub elapsed_s: f64,
}

/// Row batches of `order`; a trailing batch of one sample is merged into the previous one
/// so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(1)).collect();
    if out.len() >= 2 && out.last().unwrap().len() == 1 {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cross_entropy_step(
    model: &mut IncrementalModel,
    x: &Tensor,
    local: &[usize],
    head: usize,
    mode: NormMode,
    scope: ParamScope,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.param(x, false);
    let out = model.forward(&mut g, xv, mode, scope)?;
    let loss = g.cross_entropy(out.heads[head], local)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    model.zero_grad();
    model.accumulate_gradients(&out.bindings, &grads)?;
    sgd_step(&mut model.scoped_parameters_mut(scope), lr, clip)?;
    model.zero_grad();
    Ok(value)
}

/// Trains only the head of `task_index` with a one-cycle schedule; everything else, including
/// normalization statistics, stays fixed. Returns the mean training loss per epoch.
pub fn warmup_head(
    model: &mut IncrementalModel,
    task: &Task,
    task_index: usize,
    cfg: &WarmupConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if task_index >= model.num_heads() {
        return Err(Error::contract(format!("no head for task {}", task_index + 1)));
    }
    let data = &task.train;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let (mut best, mut stale) = (f64::INFINITY, 0);
    for epoch in 0..cfg.max_epochs {
        let lr = one_cycle_lr(epoch, cfg)?;
        order.shuffle(&mut seed::rng(seed::derive(seed, &[purpose::WARMUP, task_index as u64, epoch as u64])));
        let (mut sum, mut count) = (0.0, 0);
        for rows in batches(&order, batch_size) {
            let (x, labels) = data.batch(rows)?;
            let local = task.local_labels(&labels);
            sum += rows.len() as f64
                * cross_entropy_step(model, &x, &local, task_index, NormMode::Eval, ParamScope::Head(task_index), lr, None)?;
            count += rows.len();
        }
        let mean = sum / count as f64;
        trace.push(mean);
        if mean < best {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(trace)
}

/// Mutable state of one task's training besides the student.
pub struct TaskTeachers<'a> {
    pub teacher: Option<&'a mut TeacherSnapshot>,
    /// Frozen auxiliary network for ANCL, trained on the current task only.
    pub aux: Option<&'a mut IncrementalModel>,
}

/// Trains the student on one task. `task_index` is 0-based and the student must already carry
/// the task's head. A teacher must be present exactly when `task_index ≥ 1` and distillation is on.
pub fn train_task(
    model: &mut IncrementalModel,
    teachers: TaskTeachers<'_>,
    task: &Task,
    task_index: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<TaskTrace> {
    let TaskTeachers { mut teacher, mut aux } = teachers;
    if task.train.is_empty() {
        return Err(Error::Data(format!("task {} has no training data", task_index + 1)));
    }
    if model.num_heads() != task_index + 1 {
        return Err(Error::contract(format!(
            "student has {} heads while training task {}",
            model.num_heads(),
            task_index + 1
        )));
    }
    let kd = cfg.kd.filter(|_| task_index > 0);
    if kd.is_some() && teacher.is_none() {
        return Err(Error::contract(format!("task {} needs a teacher snapshot", task_index + 1)));
    }
    if task_index == 0 && teacher.is_some() {
        return Err(Error::contract("the first task has no teacher"));
    }
    let strategy = cfg.strategy;
    let mut trace = TaskTrace::default();

    if task_index > 0 && cfg.warmup.enabled {
        trace.warmup_loss = warmup_head(model, task, task_index, &cfg.warmup, cfg.train.batch_size, seed)?;
    }

    // scratch classifier through which P_*/CT_* teachers learn the new task
    let mut teacher_head: Option<Linear> = None;
    if let (Some(t), Some(_)) = (teacher.as_deref_mut(), kd) {
        if strategy.kind.is_pretrain() || strategy.kind.is_continuous() {
            let mut head = model.heads()[task_index].clone();
            if strategy.kind.is_pretrain() {
                trace.teacher_ce = teacher_auxiliary_update(
                    t,
                    &mut head,
                    &task.train,
                    task.offset,
                    &strategy,
                    cfg.train.batch_size,
                    seed::derive(seed, &[task_index as u64]),
                )?;
            }
            teacher_head = Some(head);
        }
    }
    let audit = match (&teacher, strategy.kind) {
        (Some(t), TeacherKind::Frozen | TeacherKind::FixBn) => Some(t.checksum()),
        _ => None,
    };

    let probe = if cfg.diagnostics && teacher.is_some() {
        let n = task.train.len().min(256);
        Some(task.train.inputs().slice_rows(0, n)?)
    } else {
        None
    };
    let student_mode = if strategy.kind == TeacherKind::FixBn && task_index > 0 { NormMode::Frozen } else { NormMode::Train };
    let data = &task.train;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.train.epochs {
        let lr = lr_schedule(epoch, &cfg.train)?;
        order.shuffle(&mut seed::rng(seed::derive(seed, &[purpose::SHUFFLE, task_index as u64, epoch as u64])));
        let (mut ce_sum, mut kd_sum, mut t_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for rows in batches(&order, cfg.train.batch_size) {
            let (x, labels) = data.batch(rows)?;
            let local = task.local_labels(&labels);
            let mut g = Graph::new();
            let xv = g.param(&x, false);
            let out = model.forward(&mut g, xv, student_mode, ParamScope::All)?;
            let ce = g.cross_entropy(out.heads[task_index], &local)?;
            let mut loss = ce;
            let mut kd_value = 0.0;
            if let Some(kd) = kd {
                let teacher_logits = teacher_forward(teacher.as_deref_mut(), &x, &strategy)?;
                let aux_logits = match (kd.variant, aux.as_deref_mut()) {
                    (KdVariant::Ancl, Some(a)) => Some(a.infer(&x, NormMode::Eval, false)?.heads.pop().unwrap()),
                    _ => None,
                };
                let term = kd_term(&mut g, &kd, &out.heads, &teacher_logits, aux_logits.as_ref())?;
                kd_value = term.value;
                let active = kd.lambda != 0.0 || (kd.variant == KdVariant::Ancl && kd.lambda_aux() != 0.0);
                if active {
                    loss = g.add(ce, term.weighted)?;
                }
            }
            ce_sum += g.scalar(ce) * rows.len() as f64;
            kd_sum += kd_value * rows.len() as f64;
            count += rows.len();
            let grads = g.backward(loss)?;
            model.zero_grad();
            model.accumulate_gradients(&out.bindings, &grads)?;
            sgd_step(&mut model.parameters_mut(), lr, cfg.train.grad_clip)?;
            model.zero_grad();

            if let (Some(t), Some(head)) = (teacher.as_deref_mut(), teacher_head.as_mut()) {
                if strategy.kind.is_continuous() {
                    let batch = Dataset::new(x, labels, data.num_classes())?;
                    let ce = teacher_auxiliary_update(t, head, &batch, task.offset, &strategy, rows.len(), seed)?;
                    t_sum += ce[0] * rows.len() as f64;
                }
            }
        }
        trace.ce.push(ce_sum / count as f64);
        trace.kd.push(kd_sum / count as f64);
        if strategy.kind.is_continuous() && teacher_head.is_some() {
            trace.teacher_ce.push(t_sum / count as f64);
        }
        if let (Some(sum), Some(t)) = (&audit, teacher.as_deref()) {
            if &t.checksum() != sum {
                return Err(Error::Consistency(format!("{} teacher changed during task {}", strategy.kind.name(), task_index + 1)));
            }
        }
        if let (Some(x), Some(t)) = (&probe, teacher.as_deref_mut()) {
            if model.has_batch_norm() {
                trace.bn_kld.push(metrics::bn_stats_kld(t.model(), model)?);
            }
            let tf = t.model_mut().infer(x, NormMode::Eval, true)?.features.unwrap();
            let sf = model.infer(x, NormMode::Eval, true)?.features.unwrap();
            trace.cka.push(metrics::linear_cka(&tf, &sf).ok());
        }
    }
    Ok(trace)
}

/// Runs the whole stream: add head → train → evaluate on all seen tasks → snapshot teacher.
pub fn run_stream(stream: &TaskStream, cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    run_stream_with_model(stream, cfg, seed).map(|(r, _)| r)
}

/// [`run_stream`] that also returns the final student.
pub fn run_stream_with_model(stream: &TaskStream, cfg: &RunConfig, seed: u64) -> Result<(RunResult, IncrementalModel)> {
    let start = Instant::now();
    stream.validate()?;
    cfg.validate()?;
    let mut model = IncrementalModel::build(cfg.arch, stream.sample_shape(), seed)?;
    let mut teacher: Option<TeacherSnapshot> = None;
    let mut matrix = AccuracyMatrix::new();
    let mut traces = Vec::with_capacity(stream.tasks.len());
    let mut final_bn_kld = Vec::with_capacity(stream.tasks.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        model.add_task_head(task.num_classes(), cfg.head_init, seed)?;
        let mut aux = match (&cfg.kd, t) {
            (Some(kd), 1..) if kd.variant == KdVariant::Ancl => {
                let mut a = model.clone();
                let solo = RunConfig { kd: None, strategy: TeacherStrategy::of(TeacherKind::Frozen), diagnostics: false, ..cfg.clone() };
                train_task(&mut a, TaskTeachers { teacher: None, aux: None }, task, t, &solo, seed::derive(seed, &[purpose::AUX]))?;
                Some(a)
            }
            _ => None,
        };
        let teachers = TaskTeachers { teacher: teacher.as_mut().filter(|_| cfg.kd.is_some()), aux: aux.as_mut() };
        traces.push(train_task(&mut model, teachers, task, t, cfg, seed)?);
        final_bn_kld.push(match &teacher {
            Some(tch) if model.has_batch_norm() => Some(metrics::bn_stats_kld(tch.model(), &model)?),
            _ => None,
        });
        let row = stream.tasks[..=t]
            .iter()
            .map(|seen| metrics::evaluate_task_agnostic(&mut model, &seen.test))
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;
        teacher = Some(snapshot_model(&model));
    }
    let confusion = metrics::task_confusion(&mut model, stream)?;
    let result = RunResult {
        seed,
        report: metrics::report(&matrix),
        accuracy_matrix: matrix,
        traces,
        final_bn_kld,
        confusion,
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    Ok((result, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_merge_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order[..1], 4);
        assert_eq!(b.len(), 1);
        let b = batches(&order[..8], 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 4]);
    }
}
