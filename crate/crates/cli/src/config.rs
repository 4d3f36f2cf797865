//! Experiment configuration: a TOML document with one section per concern.

use std::path::{Path, PathBuf};

use clta_core::data::{CorruptionSpec, SampleLayout, SplitScheme, SyntheticSpec};
use clta_core::distill::{KdConfig, KdVariant, TeacherKind, TeacherStrategy};
use clta_core::harness::{RunConfig, TrainConfig, WarmupConfig};
use clta_core::nn::{AdaptNorm, ArchSpec, Family, HeadInit, NormKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("unknown key at line {line}: {msg}")]
    UnknownKey { line: usize, msg: String },

    #[error("invalid `{field}`: {msg}")]
    Invalid { field: String, msg: String },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
    Cifar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Vector,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    // synthetic
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub layout: LayoutKind,
    pub dim: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    pub shift: f64,
    pub noise: f64,
    pub proto_low: f64,
    pub proto_high: f64,
    pub sharing: f64,
    // files
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_files: Vec<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticSpec::drifting(2, 0.3, 0);
        let SampleLayout::Vector { dim } = s.layout else { unreachable!() };
        Self {
            kind: DatasetKind::Synthetic,
            n_tasks: s.n_tasks,
            classes_per_task: s.classes_per_task,
            layout: LayoutKind::Vector,
            dim,
            channels: 3,
            height: 12,
            width: 12,
            samples_per_class: s.samples_per_class,
            shift: s.shift,
            noise: s.noise,
            proto_low: s.proto_range.0,
            proto_high: s.proto_range.1,
            sharing: s.sharing,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_files: Vec::new(),
            test_file: None,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        let layout = match self.layout {
            LayoutKind::Vector => SampleLayout::Vector { dim: self.dim },
            LayoutKind::Image => SampleLayout::Image { channels: self.channels, height: self.height, width: self.width },
        };
        SyntheticSpec {
            n_tasks: self.n_tasks,
            classes_per_task: self.classes_per_task,
            layout,
            samples_per_class: self.samples_per_class,
            shift: self.shift,
            noise: self.noise,
            proto_range: (self.proto_low, self.proto_high),
            sharing: self.sharing,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Equal,
    HalfFirst,
}

/// Class split for file datasets; synthetic streams are generated already split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub scheme: SchemeKind,
    pub tasks: usize,
    pub order_seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { scheme: SchemeKind::Equal, tasks: 5, order_seed: None }
    }
}

impl SplitConfig {
    pub fn scheme(&self) -> SplitScheme {
        match self.scheme {
            SchemeKind::Equal => SplitScheme::Equal(self.tasks),
            SchemeKind::HalfFirst => SplitScheme::HalfFirst(self.tasks),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionPattern {
    None,
    EveryOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub pattern: CorruptionPattern,
    pub severity: u8,
    pub sigmas: [f64; 5],
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { pattern: CorruptionPattern::None, severity: 0, sigmas: CorruptionSpec::DEFAULT_SIGMAS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    Batch,
    None,
    Layer,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub norm: NormChoice,
    /// Group count for `norm = "group"`.
    pub groups: usize,
    pub head_init: HeadInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { family: Family::MicroMlp, norm: NormChoice::Batch, groups: 4, head_init: HeadInit::KaimingUniform }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> ArchSpec {
        let norm = match self.norm {
            NormChoice::Batch => NormKind::Batch,
            NormChoice::None => NormKind::None,
            NormChoice::Layer => NormKind::Layer,
            NormChoice::Group => NormKind::Group(self.groups),
        };
        ArchSpec { family: self.family, norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdSection {
    pub enabled: bool,
    pub variant: KdVariant,
    pub temperature: f64,
    pub lambda: f64,
    pub lambda_aux: Option<f64>,
}

impl Default for KdSection {
    fn default() -> Self {
        let d = KdConfig::default();
        Self { enabled: true, variant: d.variant, temperature: d.temperature, lambda: d.lambda, lambda_aux: d.lambda_aux }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: TeacherKind,
    pub teacher_lr: f64,
    pub pretrain_epochs: usize,
    pub adapt_norm: AdaptNorm,
}

impl Default for StrategySection {
    fn default() -> Self {
        let d = TeacherStrategy::default();
        Self { kind: d.kind, teacher_lr: d.teacher_lr, pretrain_epochs: d.pretrain_epochs, adapt_norm: d.adapt_norm }
    }
}

/// Optional grid over teacher strategies and corruption severities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<TeacherKind>,
    pub severities: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write `wall_s = 0` so reruns produce byte-identical files.
    pub deterministic: bool,
    /// Record per-epoch BN-KLD and CKA traces.
    pub diagnostics: bool,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub kd: KdSection,
    pub strategy: StrategySection,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "experiment".into(),
            seeds: Vec::new(),
            output_dir: PathBuf::from("runs"),
            deterministic: false,
            diagnostics: true,
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            corruption: CorruptionConfig::default(),
            model: ModelConfig::default(),
            kd: KdSection::default(),
            strategy: StrategySection::default(),
            train: TrainConfig::default(),
            warmup: WarmupConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub config_id: String,
    pub strategy: TeacherKind,
    pub severity: u8,
    pub run: RunConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(text, s.start));
        let msg = e.message().to_string();
        if msg.starts_with("unknown field") {
            ConfigError::UnknownKey { line, msg }
        } else {
            ConfigError::Syntax { line, msg }
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    parse_config(&text)
}

/// Fully defaulted configuration as a TOML document; parsing it yields the same configuration.
pub fn dump_config(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configuration is always representable as TOML")
}

fn core_invalid(field: &str, e: clta_core::Error) -> ConfigError {
    let msg = match e {
        clta_core::Error::Parameter(m) => m,
        other => other.to_string(),
    };
    invalid(field, msg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.id.is_empty() || self.id.contains(['/', '\\', ',']) {
            return Err(invalid("id", "must be non-empty without '/', '\\' or ','"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                for (name, v) in [
                    ("dataset.n_tasks", d.n_tasks),
                    ("dataset.classes_per_task", d.classes_per_task),
                    ("dataset.samples_per_class", d.samples_per_class),
                ] {
                    if v == 0 {
                        return Err(invalid(name, "must be at least 1"));
                    }
                }
                let dims: &[(&str, usize)] = match d.layout {
                    LayoutKind::Vector => &[("dataset.dim", d.dim)],
                    LayoutKind::Image => &[("dataset.channels", d.channels), ("dataset.height", d.height), ("dataset.width", d.width)],
                };
                if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
                    return Err(invalid(name, "must be at least 1"));
                }
                if !(d.noise > 0.0) {
                    return Err(invalid("dataset.noise", "must be positive"));
                }
                if !(d.proto_low < d.proto_high) {
                    return Err(invalid("dataset.proto_low", "must be below dataset.proto_high"));
                }
                if !(0.0..=1.0).contains(&d.sharing) {
                    return Err(invalid("dataset.sharing", "must lie in [0, 1]"));
                }
                if !d.shift.is_finite() {
                    return Err(invalid("dataset.shift", "must be finite"));
                }
            }
            DatasetKind::Idx => {
                for (name, p) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    require_file(name, p.as_deref())?;
                }
            }
            DatasetKind::Cifar => {
                if d.train_files.is_empty() {
                    return Err(invalid("dataset.train_files", "at least one file is required"));
                }
                for f in &d.train_files {
                    require_file("dataset.train_files", Some(f))?;
                }
                require_file("dataset.test_file", d.test_file.as_deref())?;
            }
        }
        if d.kind != DatasetKind::Synthetic && self.split.tasks == 0 {
            return Err(invalid("split.tasks", "must be at least 1"));
        }
        let c = &self.corruption;
        for sev in std::iter::once(c.severity).chain(self.sweep.severities.iter().copied()) {
            CorruptionSpec::with_sigmas(sev, c.sigmas).map_err(|e| core_invalid("corruption.severity", e))?;
        }
        if self.model.norm == NormChoice::Group && self.model.groups == 0 {
            return Err(invalid("model.groups", "must be at least 1"));
        }
        let kd = self.kd_config();
        if let Some(kd) = &kd {
            if !(kd.temperature > 0.0 && kd.temperature.is_finite()) {
                return Err(invalid("kd.temperature", "must be positive"));
            }
            if !(kd.lambda >= 0.0 && kd.lambda.is_finite()) {
                return Err(invalid("kd.lambda", format!("must be non-negative, got {}", kd.lambda)));
            }
            if !(kd.lambda_aux() >= 0.0) {
                return Err(invalid("kd.lambda_aux", "must be non-negative"));
            }
        }
        for kind in self.strategies() {
            let s = self.strategy_for(kind);
            if (kind.is_pretrain() || kind.is_continuous()) && !(s.teacher_lr > 0.0) {
                return Err(invalid("strategy.teacher_lr", format!("must be positive for {}", kind.name())));
            }
            if kind.is_pretrain() && s.pretrain_epochs == 0 {
                return Err(invalid("strategy.pretrain_epochs", format!("must be at least 1 for {}", kind.name())));
            }
        }
        self.validate_train()?;
        if self.warmup.enabled {
            self.warmup.validate().map_err(|e| core_invalid("warmup", e))?;
        }
        Ok(())
    }

    fn validate_train(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if !(t.base_lr > 0.0) {
            return Err(invalid("train.base_lr", "must be positive"));
        }
        if t.lr_decay_epochs.windows(2).any(|w| w[1] <= w[0]) || t.lr_decay_epochs.iter().any(|&e| e >= t.epochs) {
            return Err(invalid("train.lr_decay_epochs", "must be strictly increasing and below train.epochs"));
        }
        if t.momentum != 0.0 {
            return Err(invalid("train.momentum", "only plain SGD (0) is supported"));
        }
        if t.weight_decay != 0.0 {
            return Err(invalid("train.weight_decay", "only plain SGD (0) is supported"));
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("train.grad_clip", "must be positive"));
        }
        t.validate().map_err(|e| core_invalid("train", e))
    }

    pub fn kd_config(&self) -> Option<KdConfig> {
        self.kd.enabled.then_some(KdConfig {
            variant: self.kd.variant,
            temperature: self.kd.temperature,
            lambda: self.kd.lambda,
            lambda_aux: self.kd.lambda_aux,
        })
    }

    fn strategies(&self) -> Vec<TeacherKind> {
        if self.sweep.strategies.is_empty() {
            vec![self.strategy.kind]
        } else {
            self.sweep.strategies.clone()
        }
    }

    fn strategy_for(&self, kind: TeacherKind) -> TeacherStrategy {
        TeacherStrategy {
            kind,
            teacher_lr: self.strategy.teacher_lr,
            pretrain_epochs: self.strategy.pretrain_epochs,
            adapt_norm: self.strategy.adapt_norm,
        }
    }

    /// The sweep grid in a fixed order (strategies outer, severities inner).
    pub fn variants(&self) -> Vec<Variant> {
        let strategies = self.strategies();
        let severities = if self.sweep.severities.is_empty() { vec![self.corruption.severity] } else { self.sweep.severities.clone() };
        let mut out = Vec::new();
        for &kind in &strategies {
            for &severity in &severities {
                let mut id = self.id.clone();
                if strategies.len() > 1 {
                    id.push('-');
                    id.push_str(kind.name());
                }
                if severities.len() > 1 {
                    id.push_str(&format!("-sev{severity}"));
                }
                out.push(Variant {
                    config_id: id,
                    strategy: kind,
                    severity,
                    run: RunConfig {
                        arch: self.model.arch(),
                        head_init: self.model.head_init,
                        train: self.train.clone(),
                        warmup: self.warmup.clone(),
                        kd: self.kd_config(),
                        strategy: self.strategy_for(kind),
                        diagnostics: self.diagnostics,
                    },
                });
            }
        }
        out
    }
}

fn require_file(field: &str, path: Option<&Path>) -> Result<(), ConfigError> {
    match path {
        None => Err(invalid(field, "is required for this dataset kind")),
        Some(p) if !p.is_file() => Err(invalid(field, format!("file {} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_round_trips() {
        let cfg = parse_config("seeds = [1]\n").unwrap();
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.kd.lambda, 10.0);
        assert_eq!(cfg.train.epochs, 20);
        let dump = dump_config(&cfg);
        let again = parse_config(&dump).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(dump_config(&again), dump);
    }

    #[test]
    fn dotted_keys_and_sections_agree() {
        let a = parse_config("seeds = [1]\nkd.lambda = 3.0\ntrain.epochs = 30\n").unwrap();
        let b = parse_config("seeds = [1]\n[kd]\nlambda = 3.0\n[train]\nepochs = 30\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kd.lambda, 3.0);
    }

    #[test]
    fn validation_names_the_field() {
        let err = parse_config("seeds = [1]\nkd.lambda = -1.0\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "kd.lambda"), "{err}");
        let err = parse_config("seeds = []\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "seeds"));
        let err = parse_config("seeds = [1]\ncorruption.severity = 9\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "corruption.severity"));
        let err = parse_config("seeds = [1]\ndataset.kind = \"idx\"\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "dataset.train_images"));
    }

    #[test]
    fn typos_are_unknown_keys() {
        let err = parse_config("seeds = [1]\n[kd]\ntemparature = 2\n").unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("temparature"));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_config("seeds = [1]\n\nkd.lambda = = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }), "{err}");
    }

    #[test]
    fn sweep_expands_in_order() {
        let cfg = parse_config("id = \"x\"\nseeds = [1]\n[sweep]\nstrategies = [\"frozen\", \"ta\"]\nseverities = [1, 5]\n").unwrap();
        let ids: Vec<String> = cfg.variants().into_iter().map(|v| v.config_id).collect();
        assert_eq!(ids, ["x-FrozenTeacher-sev1", "x-FrozenTeacher-sev5", "x-TA-sev1", "x-TA-sev5"]);
        let single = parse_config("seeds = [1]\n").unwrap();
        assert_eq!(single.variants()[0].config_id, "experiment");
    }
}
