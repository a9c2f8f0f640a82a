//! Experiment configuration as flat UTF-8 text:
//!
//! ```text
//! # comment
//! [train]
//! epochs = 5
//! privacy.eps = 1, 8, 32, 1e9
//! ```
//!
//! A key inside a `[section]` is qualified by it unless it already names a
//! section of its own (`privacy.eps` above stays as written).

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::evalrecon::Distance;
use crate::rero::ThreatModel;
use crate::trainer::loss::Loss;
use crate::trainer::model::ModelSpec;
use crate::trainer::optim::OptimizerKind;
use crate::trainer::train::{EarlyStopping, TrainConfig, DEFAULT_DELTA};

pub const DEFAULT_EPSILONS: [f64; 4] = [1.0, 8.0, 32.0, 1e9];
pub const DEFAULT_SEEDS: usize = 5;

/// Every key the parser accepts.
pub const KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.samples",
    "dataset.size",
    "dataset.classes",
    "dataset.noise",
    "dataset.seed",
    "dataset.test_fraction",
    "dataset.validation_fraction",
    "model.kind",
    "model.hidden",
    "model.channels",
    "train.optimizer",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "train.patience",
    "train.clip_norm",
    "train.clip_grid",
    "train.h_flip",
    "train.v_flip",
    "train.multiplicity",
    "privacy.eps",
    "privacy.delta",
    "privacy.nonprivate",
    "privacy.kappa",
    "attack.samples",
    "attack.batch_size",
    "attack.bins",
    "attack.tau",
    "attack.clip_norm",
    "attack.distance",
    "attack.threshold",
    "run.seeds",
    "run.seed",
    "run.threats",
    "run.parallel",
    "run.out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
    UnetLite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub channels: usize,
}

impl ModelChoice {
    pub fn build(&self, input_shape: &[usize], classes: usize) -> ModelSpec {
        match self.kind {
            ModelKind::Mlp => ModelSpec::mlp(input_shape, &self.hidden, classes),
            ModelKind::Cnn => ModelSpec::cnn(input_shape, self.channels, classes),
            ModelKind::UnetLite => ModelSpec::unet_lite(input_shape, self.channels, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Training samples the client exposes to the attack.
    pub samples: usize,
    pub batch_size: usize,
    pub bins: usize,
    pub tau: Option<f64>,
    /// Client clipping norm; the training norm when absent.
    pub clip_norm: Option<f64>,
    pub distance: Distance,
    pub threshold: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            samples: 64,
            batch_size: 1,
            bins: crate::imprint::DEFAULT_BINS,
            tau: None,
            clip_norm: None,
            distance: Distance::Ssim,
            threshold: crate::evalrecon::DEFAULT_SUCCESS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub validation_fraction: f64,
    pub model: ModelChoice,
    pub train: TrainConfig,
    /// Clipping norm used under DP unless a tuning grid is given.
    pub clip_norm: f64,
    /// Candidate clipping norms tuned on the validation split per budget.
    pub clip_grid: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub nonprivate: bool,
    pub delta: f64,
    /// Prior for the bounds; `1/n_train` when absent.
    pub kappa: Option<f64>,
    pub attack: AttackConfig,
    pub seeds: usize,
    pub seed: u64,
    pub threats: Vec<ThreatModel>,
    pub parallel: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 10,
            batch_size: 64,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            dataset: DatasetSpec::binary(2000, 16, 0),
            test_fraction: 0.2,
            validation_fraction: 0.1,
            model: ModelChoice {
                kind: ModelKind::Mlp,
                hidden: vec![32],
                channels: 4,
            },
            train,
            clip_norm: 1.0,
            clip_grid: Vec::new(),
            epsilons: DEFAULT_EPSILONS.to_vec(),
            nonprivate: true,
            delta: DEFAULT_DELTA,
            kappa: None,
            attack: AttackConfig::default(),
            seeds: DEFAULT_SEEDS,
            seed: 0,
            threats: vec![ThreatModel::WorstCase, ThreatModel::Relaxed, ThreatModel::Realistic],
            parallel: 0,
            out: None,
        }
    }
}

/// `(line, key, value)` triples with section prefixes resolved.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut section: Option<String> = None;
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| is_ident(n))
                .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header {line:?}")))?;
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() || !k.split('.').all(is_ident) {
            return Err(Error::Config(format!("line {line_no}: invalid key {k:?}")));
        }
        let key = match &section {
            Some(s) if !k.contains('.') => format!("{s}.{k}"),
            _ => k.to_string(),
        };
        if out.iter().any(|(_, existing, _)| *existing == key) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key}")));
        }
        out.push((line_no, key, v.trim().to_string()));
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Comma-separated budgets. Tokens are decimal or exponent numbers, or
/// `10^k` powers; the result must be positive and strictly ascending.
pub fn parse_eps_list(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for tok in text.split(',').map(str::trim) {
        let v = if let Some(exp) = tok.strip_prefix("10^") {
            let k: i32 = exp
                .parse()
                .map_err(|_| Error::Config(format!("bad exponent in {tok:?}")))?;
            10f64.powi(k)
        } else {
            parse_f64(tok)?
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("budgets must be finite and positive, got {tok:?}")));
        }
        if out.last().is_some_and(|&last| v <= last) {
            return Err(Error::Config(format!("budgets must be strictly ascending at {tok:?}")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config("empty budget list".into()));
    }
    Ok(out)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("expected a finite number, got {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Config(format!("expected a non-negative integer, got {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected true or false, got {s:?}"))),
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| f(t.trim())).collect()
}

fn parse_optional_f64(s: &str) -> Result<Option<f64>> {
    if s.is_empty() || s == "auto" {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_threat(s: &str) -> Result<ThreatModel> {
    match s {
        "worst_case" | "worst" => Ok(ThreatModel::WorstCase),
        "relaxed" => Ok(ThreatModel::Relaxed),
        "realistic" => Ok(ThreatModel::Realistic),
        _ => Err(Error::Config(format!("unknown threat model {s:?}"))),
    }
}

fn threat_name(t: ThreatModel) -> &'static str {
    match t {
        ThreatModel::WorstCase => "worst_case",
        ThreatModel::Relaxed => "relaxed",
        ThreatModel::Realistic => "realistic",
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?}; valid keys: {}", KEYS.join(", ")))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (line, key, value) in parse_pairs(text)? {
            cfg.set(&key, &value).map_err(|e| match e {
                Error::Config(m) if !m.starts_with("unknown key") => Error::Config(format!("line {line}: {key}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one override, e.g. from a command-line flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.kind" => {
                let (n, size, seed) = (self.dataset.n_samples, self.dataset.height, self.dataset.seed);
                self.dataset = match value {
                    "binary" | "binary_imbalanced" => DatasetSpec::binary(n, size, seed),
                    "multiclass" | "multiclass_power_law" => {
                        DatasetSpec::multiclass(n, self.dataset.n_classes.max(3), size, seed)
                    }
                    "segmentation" => DatasetSpec::segmentation(n, size, seed),
                    _ => return Err(Error::Config(format!("unknown dataset kind {value:?}"))),
                };
                if self.dataset.kind == DatasetKind::Segmentation {
                    self.train.loss = Loss::weighted_segmentation();
                } else {
                    self.train.loss = Loss::CrossEntropy;
                }
            }
            "dataset.samples" => self.dataset.n_samples = parse_usize(value)?,
            "dataset.size" => {
                let s = parse_usize(value)?;
                self.dataset.height = s;
                self.dataset.width = s;
            }
            "dataset.classes" => self.dataset.n_classes = parse_usize(value)?,
            "dataset.noise" => self.dataset.noise = parse_f64(value)?,
            "dataset.seed" => self.dataset.seed = value.parse().map_err(|_| Error::Config(format!("bad seed {value:?}")))?,
            "dataset.test_fraction" => self.test_fraction = parse_f64(value)?,
            "dataset.validation_fraction" => self.validation_fraction = parse_f64(value)?,
            "model.kind" => {
                self.model.kind = match value {
                    "mlp" => ModelKind::Mlp,
                    "cnn" => ModelKind::Cnn,
                    "unet_lite" | "unet" => ModelKind::UnetLite,
                    _ => return Err(Error::Config(format!("unknown model kind {value:?}"))),
                }
            }
            "model.hidden" => self.model.hidden = parse_list(value, parse_usize)?,
            "model.channels" => self.model.channels = parse_usize(value)?,
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "nadam" => OptimizerKind::Nadam,
                    _ => return Err(Error::Config(format!("unknown optimizer {value:?}"))),
                }
            }
            "train.learning_rate" => self.train.learning_rate = parse_f64(value)?,
            "train.batch_size" => self.train.batch_size = parse_usize(value)?,
            "train.epochs" => self.train.epochs = parse_usize(value)?,
            "train.patience" => {
                let p = parse_usize(value)?;
                self.train.early_stopping = (p > 0).then(|| EarlyStopping {
                    patience: p,
                    ..EarlyStopping::default()
                });
            }
            "train.clip_norm" => self.clip_norm = parse_f64(value)?,
            "train.clip_grid" => self.clip_grid = parse_list(value, parse_f64)?,
            "train.h_flip" => self.train.augmentation.h_flip = parse_f64(value)?,
            "train.v_flip" => self.train.augmentation.v_flip = parse_f64(value)?,
            "train.multiplicity" => self.train.augmentation.multiplicity = parse_usize(value)?,
            "privacy.eps" => self.epsilons = if value.is_empty() { Vec::new() } else { parse_eps_list(value)? },
            "privacy.delta" => self.delta = parse_f64(value)?,
            "privacy.nonprivate" => self.nonprivate = parse_bool(value)?,
            "privacy.kappa" => self.kappa = parse_optional_f64(value)?,
            "attack.samples" => self.attack.samples = parse_usize(value)?,
            "attack.batch_size" => self.attack.batch_size = parse_usize(value)?,
            "attack.bins" => self.attack.bins = parse_usize(value)?,
            "attack.tau" => self.attack.tau = parse_optional_f64(value)?,
            "attack.clip_norm" => self.attack.clip_norm = parse_optional_f64(value)?,
            "attack.distance" => {
                self.attack.distance = match value {
                    "ssim" => Distance::Ssim,
                    "l2" => Distance::L2,
                    _ => return Err(Error::Config(format!("unknown distance {value:?}"))),
                }
            }
            "attack.threshold" => self.attack.threshold = parse_f64(value)?,
            "run.seeds" => self.seeds = parse_usize(value)?,
            "run.seed" => self.seed = value.parse().map_err(|_| Error::Config(format!("bad seed {value:?}")))?,
            "run.threats" => self.threats = parse_list(value, parse_threat)?,
            "run.parallel" => self.parallel = parse_usize(value)?,
            "run.out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds == 0 {
            return bad("run.seeds must be >= 1".into());
        }
        if self.epsilons.is_empty() && !self.nonprivate {
            return bad("no budgets: give privacy.eps or enable privacy.nonprivate".into());
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) || self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("privacy.eps must be positive and strictly ascending".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("privacy.delta must lie in (0, 1), got {}", self.delta));
        }
        if self.kappa.is_some_and(|k| !(k > 0.0 && k <= 1.0)) {
            return bad("privacy.kappa must lie in (0, 1]".into());
        }
        if !(self.clip_norm > 0.0) || self.clip_grid.iter().any(|c| !(*c > 0.0)) {
            return bad("clipping norms must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("split fractions must lie in [0, 1)".into());
        }
        if self.attack.samples == 0 || self.attack.batch_size == 0 || self.attack.bins == 0 {
            return bad("attack samples, batch size and bins must be >= 1".into());
        }
        if !(self.attack.threshold > 0.0 && self.attack.threshold < 1.0) {
            return bad("attack.threshold must lie in (0, 1)".into());
        }
        if self.model.kind == ModelKind::UnetLite && self.dataset.kind != DatasetKind::Segmentation {
            return bad("unet_lite needs a segmentation dataset".into());
        }
        self.train.validate()
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let kind = match self.dataset.kind {
            DatasetKind::BinaryImbalanced => "binary",
            DatasetKind::MulticlassPowerLaw => "multiclass",
            DatasetKind::Segmentation => "segmentation",
        };
        let model = match self.model.kind {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
            ModelKind::UnetLite => "unet_lite",
        };
        let optimizer = match self.train.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Nadam => "nadam",
        };
        let a = &self.train.augmentation;
        let mut s = String::new();
        let _ = writeln!(s, "[dataset]");
        let _ = writeln!(s, "kind = {kind}");
        let _ = writeln!(s, "samples = {}", self.dataset.n_samples);
        let _ = writeln!(s, "size = {}", self.dataset.height);
        let _ = writeln!(s, "classes = {}", self.dataset.n_classes);
        let _ = writeln!(s, "noise = {}", self.dataset.noise);
        let _ = writeln!(s, "seed = {}", self.dataset.seed);
        let _ = writeln!(s, "test_fraction = {}", self.test_fraction);
        let _ = writeln!(s, "validation_fraction = {}", self.validation_fraction);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "kind = {model}");
        let _ = writeln!(s, "hidden = {}", join(&self.model.hidden));
        let _ = writeln!(s, "channels = {}", self.model.channels);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "optimizer = {optimizer}");
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "patience = {}", self.train.early_stopping.map_or(0, |e| e.patience));
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "clip_grid = {}", join(&self.clip_grid));
        let _ = writeln!(s, "h_flip = {}", a.h_flip);
        let _ = writeln!(s, "v_flip = {}", a.v_flip);
        let _ = writeln!(s, "multiplicity = {}", a.multiplicity);
        let _ = writeln!(s, "\n[privacy]");
        let _ = writeln!(s, "eps = {}", join(&self.epsilons));
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "nonprivate = {}", self.nonprivate);
        let _ = writeln!(s, "kappa = {}", opt(self.kappa));
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "samples = {}", self.attack.samples);
        let _ = writeln!(s, "batch_size = {}", self.attack.batch_size);
        let _ = writeln!(s, "bins = {}", self.attack.bins);
        let _ = writeln!(s, "tau = {}", opt(self.attack.tau));
        let _ = writeln!(s, "clip_norm = {}", opt(self.attack.clip_norm));
        let _ = writeln!(s, "distance = {}", if self.attack.distance == Distance::L2 { "l2" } else { "ssim" });
        let _ = writeln!(s, "threshold = {}", self.attack.threshold);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seeds = {}", self.seeds);
        let _ = writeln!(s, "seed = {}", self.seed);
        let threats: Vec<_> = self.threats.iter().map(|t| threat_name(*t)).collect();
        let _ = writeln!(s, "threats = {}", threats.join(", "));
        let _ = writeln!(s, "parallel = {}", self.parallel);
        let _ = writeln!(s, "out = {}", self.out.as_ref().map_or(String::new(), |p| p.display().to_string()));
        s
    }
}
