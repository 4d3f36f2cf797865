//! Multi-seed orchestration: one independent run per (variant, seed).

use std::time::Instant;

use clta_core::data::{
    corrupt_every_other, load_cifar_binary, load_idx, split_classes, stream_from_datasets, synthetic_stream,
    CorruptionSpec, Dataset, TaskStream,
};
use clta_core::harness::{run_stream, RunResult};
use clta_core::seed::{self, purpose};
use clta_core::Tensor;
use rayon::prelude::*;

use crate::config::{CorruptionPattern, DatasetKind, ExperimentConfig, Variant};
use crate::results::{ResultsTable, RunRow, RunStatus};

fn concat(parts: Vec<Dataset>) -> clta_core::Result<Dataset> {
    let mut parts = parts.into_iter();
    let first = parts.next().expect("at least one part");
    let mut shape = first.inputs().shape().to_vec();
    let mut values = first.inputs().values().to_vec();
    let mut labels = first.labels().to_vec();
    let mut classes = first.num_classes();
    for p in parts {
        values.extend_from_slice(p.inputs().values());
        labels.extend_from_slice(p.labels());
        shape[0] += p.len();
        classes = classes.max(p.num_classes());
    }
    Dataset::new(Tensor::new(shape, values)?, labels, classes)
}

/// The (possibly corrupted) task stream for one seed and severity.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64, severity: u8) -> clta_core::Result<TaskStream> {
    let d = &cfg.dataset;
    let stream = match d.kind {
        DatasetKind::Synthetic => synthetic_stream(&d.synthetic_spec(seed))?,
        DatasetKind::Idx | DatasetKind::Cifar => {
            let (train, test) = if d.kind == DatasetKind::Idx {
                let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
                (
                    load_idx(&path(&d.train_images), &path(&d.train_labels))?,
                    load_idx(&path(&d.test_images), &path(&d.test_labels))?,
                )
            } else {
                let train = concat(d.train_files.iter().map(|f| load_cifar_binary(f)).collect::<Result<_, _>>()?)?;
                (train, load_cifar_binary(d.test_file.as_deref().expect("validated"))?)
            };
            let classes = train.num_classes().max(test.num_classes());
            let order = cfg.split.order_seed;
            let partition = split_classes(classes, cfg.split.scheme(), order)?;
            stream_from_datasets(&train, &test, &partition, order)?
        }
    };
    if cfg.corruption.pattern == CorruptionPattern::EveryOther && severity > 0 {
        let spec = CorruptionSpec::with_sigmas(severity, cfg.corruption.sigmas)?;
        return corrupt_every_other(&stream, &spec, seed::derive(seed, &[purpose::CORRUPT]));
    }
    Ok(stream)
}

fn run_one(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> RunRow {
    let start = Instant::now();
    let outcome = build_stream(cfg, seed, variant.severity).and_then(|s| run_stream(&s, &variant.run, seed));
    let wall_s = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
    let (status, result) = match outcome {
        Ok(mut r) => {
            if cfg.deterministic {
                r.elapsed_s = 0.0;
            }
            (RunStatus::Ok, Some(r))
        }
        Err(e) => {
            log::error!("{} seed {seed} failed: {e}", variant.config_id);
            (RunStatus::Failed(e.to_string()), None)
        }
    };
    RunRow {
        config_id: variant.config_id.clone(),
        strategy: variant.strategy,
        severity: variant.severity,
        seed,
        wall_s,
        status,
        result,
    }
}

/// Runs every (variant, seed) pair; failures become rows instead of aborting siblings.
pub fn run_experiment(cfg: &ExperimentConfig, parallel: bool) -> ResultsTable {
    let jobs: Vec<(Variant, u64)> =
        cfg.variants().into_iter().flat_map(|v| cfg.seeds.iter().map(move |&s| (v.clone(), s))).collect();
    let rows: Vec<RunRow> = if parallel {
        jobs.par_iter().map(|(v, s)| run_one(cfg, v, *s)).collect()
    } else {
        jobs.iter().map(|(v, s)| run_one(cfg, v, *s)).collect()
    };
    ResultsTable { rows }
}

/// Convenience accessor for callers that only need successful results.
pub fn ok_results(table: &ResultsTable) -> impl Iterator<Item = (&RunRow, &RunResult)> {
    table.rows.iter().filter_map(|r| r.result.as_ref().map(|res| (r, res)))
}
