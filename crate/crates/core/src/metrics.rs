//! Task-agnostic evaluation and diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::nn::{IncrementalModel, NormMode};
use crate::tensor::Tensor;

/// Lower-triangular matrix: entry (k, j) is the accuracy on task j after training task k.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task; it must hold one entry per task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::dim(format!("row {} needs {} entries, got {}", self.rows.len() + 1, self.rows.len() + 1, row.len())));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::param("accuracies must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Entry (k, j), 0-based.
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.rows[k][j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_inc: f64,
    pub acc_final: f64,
    pub forg_inc: f64,
    pub forg_final: f64,
    /// Average accuracy after each task.
    pub a: Vec<f64>,
    /// Average forgetting after each task (0 after the first).
    pub f: Vec<f64>,
}

/// `(A_k, Acc_Inc, Acc_Final)` where `A_k` is the mean of row k.
pub fn accuracy_metrics(m: &AccuracyMatrix) -> (Vec<f64>, f64, f64) {
    let a: Vec<f64> = m.rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    if a.is_empty() {
        return (a, 0.0, 0.0);
    }
    let inc = a.iter().sum::<f64>() / a.len() as f64;
    let last = *a.last().unwrap();
    (a, inc, last)
}

/// `(F_k, Forg_Inc, Forg_Final)` with `f_kj = max(0, max_{l∈[j,k−1]} a_lj − a_kj)` and `F_1 = 0`.
///
/// Accuracy gains on old tasks count as zero forgetting rather than negative forgetting.
pub fn forgetting_metrics(m: &AccuracyMatrix) -> (Vec<f64>, f64, f64) {
    let n = m.n();
    let mut f = vec![0.0; n];
    for (k, fk) in f.iter_mut().enumerate().skip(1) {
        let mut total = 0.0;
        for j in 0..k {
            let best = (j..k).map(|l| m.get(l, j)).fold(f64::NEG_INFINITY, f64::max);
            total += (best - m.get(k, j)).max(0.0);
        }
        *fk = total / k as f64;
    }
    if n < 2 {
        return (f, 0.0, 0.0);
    }
    let inc = f[1..].iter().sum::<f64>() / (n - 1) as f64;
    let last = f[n - 1];
    (f, inc, last)
}

pub fn report(m: &AccuracyMatrix) -> MetricsReport {
    let (a, acc_inc, acc_final) = accuracy_metrics(m);
    let (f, forg_inc, forg_final) = forgetting_metrics(m);
    MetricsReport { acc_inc, acc_final, forg_inc, forg_final, a, f }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 512;

/// Predicted global class per sample: argmax over the concatenation of all heads (Eval mode).
pub fn predict(model: &mut IncrementalModel, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = EVAL_CHUNK.min(n - start);
        let logits = model.infer(&inputs.slice_rows(start, count)?, NormMode::Eval, false)?.logits();
        let c = logits.shape()[1];
        out.extend(logits.values().chunks(c).map(argmax));
        start += count;
    }
    Ok(out)
}

/// Fraction of samples whose task-agnostic prediction equals their global label.
pub fn evaluate_task_agnostic(model: &mut IncrementalModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    let pred = predict(model, data.inputs())?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

fn centered(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    if x.shape().len() != 2 {
        return Err(Error::dim(format!("CKA expects (n, d) features, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut v = x.values().to_vec();
    for c in 0..d {
        let mean = (0..n).map(|r| v[r * d + c]).sum::<f64>() / n as f64;
        (0..n).for_each(|r| v[r * d + c] -= mean);
    }
    Ok((n, d, v))
}

/// Squared Frobenius norm of `Aᵀ B` for row-major (n, da) and (n, db) matrices.
fn cross_frobenius_sq(n: usize, a: &[f64], da: usize, b: &[f64], db: usize) -> f64 {
    let mut m = vec![0.0; da * db];
    for r in 0..n {
        let (ra, rb) = (&a[r * da..(r + 1) * da], &b[r * db..(r + 1) * db]);
        for i in 0..da {
            let x = ra[i];
            if x != 0.0 {
                m[i * db..(i + 1) * db].iter_mut().zip(rb).for_each(|(o, y)| *o += x * y);
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between two feature matrices over the same `n` samples.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, dx, xc) = centered(x)?;
    let (ny, dy, yc) = centered(y)?;
    if n != ny {
        return Err(Error::dim(format!("CKA inputs have {n} and {ny} samples")));
    }
    if n < 2 {
        return Err(Error::Degenerate("CKA needs at least 2 samples".into()));
    }
    let xx = cross_frobenius_sq(n, &xc, dx, &xc, dx).sqrt();
    let yy = cross_frobenius_sq(n, &yc, dy, &yc, dy).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("CKA input has zero variance".into()));
    }
    Ok(cross_frobenius_sq(n, &yc, dy, &xc, dx) / (xx * yy))
}

/// `KL(N(μa, σa²) ‖ N(μb, σb²))`.
pub fn gaussian_kl(mu_a: f64, var_a: f64, mu_b: f64, var_b: f64) -> f64 {
    0.5 * (var_b / var_a).ln() + (var_a + (mu_a - mu_b).powi(2)) / (2.0 * var_b) - 0.5
}

/// Mean over all BN channels of the Gaussian KL between the two models' running statistics.
pub fn bn_stats_kld(a: &IncrementalModel, b: &IncrementalModel) -> Result<f64> {
    let la: Vec<_> = a.batch_norm_layers().collect();
    let lb: Vec<_> = b.batch_norm_layers().collect();
    if la.is_empty() || la.len() != lb.len() || la.iter().zip(&lb).any(|(x, y)| x.num_features() != y.num_features()) {
        return Err(Error::contract("BN-statistics KLD needs structurally identical models with batch norm"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (x, y) in la.iter().zip(&lb) {
        for c in 0..x.num_features() {
            let (va, vb) = (x.running_var()[c], y.running_var()[c]);
            if !(va > 0.0 && vb > 0.0) {
                return Err(Error::State(format!("non-positive running variance in channel {c}")));
            }
            total += gaussian_kl(x.running_mean()[c], va, y.running_mean()[c], vb);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `n×n` counts: row = task owning the true class, column = task owning the predicted class.
pub fn task_confusion(model: &mut IncrementalModel, stream: &TaskStream) -> Result<Vec<Vec<usize>>> {
    let n = stream.tasks.len();
    let mut m = vec![vec![0; n]; n];
    for (i, task) in stream.tasks.iter().enumerate() {
        for p in predict(model, task.test.inputs())? {
            let j = stream.task_of(p).ok_or_else(|| Error::Index(format!("prediction {p} outside the stream's classes")))?;
            m[i][j] += 1;
        }
    }
    Ok(m)
}
