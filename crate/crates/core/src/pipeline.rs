//! Budget × seed experiment grid and risk-profile assembly.
//!
//! Each cell trains one model, scores it on the test split and runs the
//! imprint attack against a fixed slice of the training data with the
//! trained model as the downstream network. Cells are independent and run
//! on a thread pool; assembly is a single-threaded reduce over cells sorted
//! by `(budget, seed)`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, PrivacyParams, PrivacySpent};
use crate::config::ExperimentConfig;
use crate::datagen::{apply_normalization, generate, normalize, stratified_split, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::evalrecon::{
    cumulative_curve, default_grid, match_reconstructions, success_rate, CumulativeCurve, MatchResult, SsimConfig,
    SuccessRate,
};
use crate::imprint::{run_campaign, AttackScenario, Campaign};
use crate::numerics::Tensor;
use crate::rero::{bound_curve, bounds_for, BoundRow, ReroParams};
use crate::trainer::metrics::{mean_sd, welch_t_test};
use crate::trainer::model::{Model, ModelSpec};
use crate::trainer::train::{evaluate, train, tune_clip_norm, DpSettings, Evaluation, TrainConfig};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

/// A privacy budget on the grid. Non-private serializes as `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Budget(#[serde(with = "crate::serde_ext")] pub f64);

impl Budget {
    pub const NONPRIVATE: Budget = Budget(f64::INFINITY);

    pub fn is_private(self) -> bool {
        self.0.is_finite()
    }

    /// Stable identifier for file names and logs.
    pub fn id(self) -> String {
        if self.is_private() {
            format!("eps{}", self.0)
        } else {
            "nonprivate".into()
        }
    }

    pub fn parse(s: &str) -> Result<Budget> {
        match s {
            "nonprivate" | "inf" => Ok(Budget::NONPRIVATE),
            _ => {
                let e = s.strip_prefix("eps").unwrap_or(s);
                crate::config::parse_eps_list(e).and_then(|v| match v.as_slice() {
                    [x] => Ok(Budget(*x)),
                    _ => Err(Error::Config(format!("expected one budget, got {s:?}"))),
                })
            }
        }
    }

    pub fn render(self) -> String {
        if self.is_private() {
            self.0.to_string()
        } else {
            crate::serde_ext::render(self.0).to_string()
        }
    }

    fn cmp_key(&self, other: &Budget) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Budgets of a configuration, ascending, non-private last.
pub fn budgets(config: &ExperimentConfig) -> Vec<Budget> {
    let mut b: Vec<Budget> = config.epsilons.iter().map(|&e| Budget(e)).collect();
    if config.nonprivate {
        b.push(Budget::NONPRIVATE);
    }
    b
}

/// Splits and normalization shared by every cell.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
    pub model_spec: ModelSpec,
    /// Normalized attack targets and their raw-range originals.
    pub attack_set: Dataset,
    pub attack_raw: Vec<Tensor>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Prepared> {
        config.validate()?;
        let raw = generate(&config.dataset)?;
        let (train_raw, test_raw) = stratified_split(&raw, config.test_fraction, config.dataset.seed ^ 0x7E57)?;
        let (train_raw, val_raw) =
            stratified_split(&train_raw, config.validation_fraction, config.dataset.seed ^ 0x7A1)?;
        let (train, stats) = normalize(&train_raw)?;
        let validation = apply_normalization(&val_raw, &stats);
        let test = apply_normalization(&test_raw, &stats);
        let k = config.attack.samples.min(train.len());
        let mut attack_set = train.clone();
        attack_set.samples.truncate(k);
        let attack_raw = train_raw.samples[..k].iter().map(|s| s.image.clone()).collect();
        let model_spec = config.model.build(&train.image_shape(), train.n_classes);
        model_spec.validate()?;
        Ok(Prepared {
            train,
            validation,
            test,
            stats,
            model_spec,
            attack_set,
            attack_raw,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn kappa(&self, config: &ExperimentConfig) -> f64 {
        config.kappa.unwrap_or(1.0 / self.n_train() as f64)
    }
}

/// Noise for one budget. Training uses the configured batch size; the
/// attack round assumes a client that trains on server-dictated batches of
/// `attack.batch_size` for the same number of epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetNoise {
    pub train: Option<PrivacyParams>,
    pub attack: Option<PrivacyParams>,
}

pub fn budget_noise(config: &ExperimentConfig, prep: &Prepared, budget: Budget, clip_norm: f64) -> Result<BudgetNoise> {
    if !budget.is_private() {
        return Ok(BudgetNoise { train: None, attack: None });
    }
    let n = prep.n_train();
    let epochs = config.train.epochs as u64;
    let q_train = (config.train.batch_size as f64 / n as f64).min(1.0);
    let t_train = epochs * n.div_ceil(config.train.batch_size) as u64;
    let q_attack = (config.attack.batch_size as f64 / n as f64).min(1.0);
    let t_attack = epochs * n.div_ceil(config.attack.batch_size) as u64;
    let params = |q: f64, t: u64, c: f64| -> Result<PrivacyParams> {
        Ok(PrivacyParams {
            noise_multiplier: calibrate_sigma(budget.0, config.delta, q, t)?,
            clip_norm: c,
            sampling_rate: q,
            steps: t,
            delta: config.delta,
        })
    };
    Ok(BudgetNoise {
        train: Some(params(q_train, t_train, clip_norm)?),
        attack: Some(params(q_attack, t_attack, config.attack.clip_norm.unwrap_or(clip_norm))?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingResult {
    pub noise: Option<PrivacyParams>,
    /// Validation scores per clip norm when tuning ran.
    pub clip_scores: Vec<(f64, f64)>,
    pub test: Evaluation,
    pub metrics: Vec<(String, f64)>,
    pub privacy: PrivacySpent,
    pub epochs_run: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub noise: Option<PrivacyParams>,
    pub tau: Vec<f64>,
    pub reconstructions: usize,
    pub skipped_bins: usize,
    pub success: SuccessRate,
    pub matches: Vec<MatchResult>,
    /// Whether the downstream network came from this cell's training.
    pub trained_downstream: bool,
}

/// Outcome of one `(budget, seed)` job; the persisted unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub schema_version: u32,
    pub budget: Budget,
    pub seed: u64,
    pub training: Option<TrainingResult>,
    pub attack: Option<AttackResult>,
    pub errors: Vec<String>,
}

impl CellRecord {
    pub fn new(budget: Budget, seed: u64) -> Self {
        CellRecord {
            schema_version: PROFILE_SCHEMA_VERSION,
            budget,
            seed,
            training: None,
            attack: None,
            errors: Vec::new(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}_seed{}.json", self.budget.id(), self.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<CellRecord> {
        let r: CellRecord = serde_json::from_str(text)?;
        if r.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported cell record schema {}", r.schema_version)));
        }
        Ok(r)
    }
}

/// Trains one cell. Returns the model alongside its record.
pub fn train_cell(config: &ExperimentConfig, prep: &Prepared, budget: Budget, seed: u64) -> Result<(TrainingResult, Model)> {
    let mut tc: TrainConfig = config.train.clone();
    tc.seed = seed;
    tc.delta = config.delta;
    let mut clip = config.clip_norm;
    let mut clip_scores = Vec::new();
    let mut noise = budget_noise(config, prep, budget, clip)?;
    if let Some(p) = noise.train {
        tc.dp = Some(DpSettings {
            clip_norm: clip,
            noise_multiplier: p.noise_multiplier,
        });
        if !config.clip_grid.is_empty() {
            let (best, scores) = tune_clip_norm(&prep.model_spec, &prep.train, &prep.validation, &tc, &config.clip_grid)?;
            clip = best;
            clip_scores = scores;
            noise = budget_noise(config, prep, budget, clip)?;
            tc.dp = Some(DpSettings {
                clip_norm: clip,
                noise_multiplier: p.noise_multiplier,
            });
        }
    }
    let out = train(&prep.model_spec, &prep.train, Some(&prep.validation), &tc)?;
    let test = evaluate(&out.model, &prep.test, &tc.loss)?;
    let metrics = test.headline();
    Ok((
        TrainingResult {
            noise: noise.train,
            clip_scores,
            test,
            metrics,
            privacy: out.privacy,
            epochs_run: out.report.epochs_run,
            steps: out.report.steps,
        },
        out.model,
    ))
}

/// Runs the attack for one cell against `downstream`, or against a freshly
/// initialized network when no trained model is at hand.
pub fn attack_cell(
    config: &ExperimentConfig,
    prep: &Prepared,
    budget: Budget,
    seed: u64,
    downstream: Option<&Model>,
    clip_norm: f64,
) -> Result<(AttackResult, Campaign)> {
    let noise = budget_noise(config, prep, budget, clip_norm)?;
    let fresh;
    let model = match downstream {
        Some(m) => m,
        None => {
            fresh = Model::init(&prep.model_spec, seed)?;
            &fresh
        }
    };
    let scenario = AttackScenario {
        batch_size: config.attack.batch_size,
        dp_on_client: noise.attack,
        rounds: 1,
        bins: config.attack.bins,
        seed,
        tau: config.attack.tau,
    };
    let campaign = run_campaign(&prep.attack_set, &prep.stats, &scenario, model)?;
    let recons: Vec<Tensor> = campaign.sets.iter().flat_map(|s| s.images.iter().cloned()).collect();
    let ssim_cfg = SsimConfig::default();
    let matches = match_reconstructions(&prep.attack_raw, &recons, &ssim_cfg, config.attack.distance)?;
    let success = success_rate(&matches, config.attack.threshold)?;
    let mut tau: Vec<f64> = campaign.sets.iter().map(|s| s.tau).collect();
    tau.dedup();
    Ok((
        AttackResult {
            noise: noise.attack,
            tau,
            reconstructions: recons.len(),
            skipped_bins: campaign.skipped_bins(),
            success,
            matches,
            trained_downstream: downstream.is_some(),
        },
        campaign,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub train: bool,
    pub attack: bool,
}

impl Stages {
    pub const ALL: Stages = Stages { train: true, attack: true };
}

/// Everything one job produced; the model and campaign stay in memory.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub record: CellRecord,
    pub model: Option<Model>,
    pub campaign: Option<Campaign>,
}

pub fn run_cell(
    config: &ExperimentConfig,
    prep: &Prepared,
    budget: Budget,
    seed: u64,
    stages: Stages,
    downstream: Option<&Model>,
) -> CellOutput {
    let mut record = CellRecord::new(budget, seed);
    let mut model = None;
    if stages.train {
        match train_cell(config, prep, budget, seed) {
            Ok((t, m)) => {
                record.training = Some(t);
                model = Some(m);
            }
            Err(e) => record.errors.push(format!("train: {e}")),
        }
    }
    let mut campaign = None;
    if stages.attack && record.errors.is_empty() {
        let clip = record
            .training
            .as_ref()
            .and_then(|t| t.noise)
            .map_or(config.clip_norm, |p| p.clip_norm);
        match attack_cell(config, prep, budget, seed, model.as_ref().or(downstream), clip) {
            Ok((a, c)) => {
                record.attack = Some(a);
                campaign = Some(c);
            }
            Err(e) => record.errors.push(format!("attack: {e}")),
        }
    }
    CellOutput { record, model, campaign }
}

/// Seeds of the grid: `seed, seed + 1, …`.
pub fn seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.seeds as u64).map(|s| config.seed + s).collect()
}

/// All cells, in `(budget, seed)` order regardless of scheduling.
pub fn run_cells(config: &ExperimentConfig, prep: &Prepared, stages: Stages) -> Result<Vec<CellOutput>> {
    let jobs: Vec<(Budget, u64)> = budgets(config)
        .into_iter()
        .flat_map(|b| seeds(config).into_iter().map(move |s| (b, s)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(b, s)| run_cell(config, prep, b, s, stages, None))
            .collect::<Vec<_>>()
    };
    if config.parallel == 0 {
        Ok(work())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(work))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    #[serde(with = "crate::serde_ext")]
    pub mean: f64,
    #[serde(with = "crate::serde_ext")]
    pub sd: f64,
    /// Welch test against the non-private row over seeds.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub epsilon: Budget,
    pub noise_multiplier: Option<f64>,
    pub attack_noise_multiplier: Option<f64>,
    pub clip_norm: Option<f64>,
    pub utility: Vec<MetricSummary>,
    pub worst_case: f64,
    pub relaxed: f64,
    /// Mean attack success over seeds; NaN when no seed produced one.
    #[serde(with = "crate::serde_ext")]
    pub realistic: f64,
    pub seeds_ok: usize,
    pub errors: Vec<String>,
}

impl RiskRow {
    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub epsilon: Budget,
    pub curve: CumulativeCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub n_train: usize,
    pub kappa: f64,
    /// How samples were matched to reconstructions.
    pub distance: String,
    pub rows: Vec<RiskRow>,
    /// Cumulative SSIM-error curves pooled over seeds.
    pub curves: Vec<BudgetCurve>,
    /// Both theoretical bounds over a dense budget grid.
    pub bound_grid: Vec<BoundRow>,
}

impl RiskProfile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RiskProfile> {
        let p: RiskProfile = serde_json::from_str(text)?;
        if p.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported profile schema {}", p.schema_version)));
        }
        Ok(p)
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(RiskRow::failed)
    }

    pub fn row(&self, budget: Budget) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.epsilon == budget)
    }
}

/// `10^{-1}, 10^{-0.5}, …, 10^{9}`.
pub fn dense_budget_grid() -> Vec<f64> {
    (-2..=18).map(|k| 10f64.powf(k as f64 / 2.0)).collect()
}

fn bounds_row(config: &ExperimentConfig, prep: &Prepared, budget: Budget, clip: f64) -> Result<(Option<PrivacyParams>, Option<PrivacyParams>, f64, f64)> {
    let noise = budget_noise(config, prep, budget, clip)?;
    match noise.train {
        None => Ok((None, None, 1.0, 1.0)),
        Some(p) => {
            let (w, r) = bounds_for(&ReroParams::new(p, prep.kappa(config)))?;
            Ok((Some(p), noise.attack, w.gamma, r.gamma))
        }
    }
}

/// Deterministic reduce over cell records. Only budgets with at least one
/// record appear.
pub fn assemble(config: &ExperimentConfig, prep: &Prepared, cells: &[CellRecord]) -> Result<RiskProfile> {
    let mut cells: Vec<&CellRecord> = cells.iter().collect();
    cells.sort_by(|a, b| a.budget.cmp_key(&b.budget).then(a.seed.cmp(&b.seed)));
    let mut grid: Vec<Budget> = Vec::new();
    for c in &cells {
        if grid.last() != Some(&c.budget) {
            grid.push(c.budget);
        }
    }
    let of = |b: Budget| cells.iter().filter(move |c| c.budget == b);
    let metric_values = |b: Budget, name: &str| -> Vec<f64> {
        of(b)
            .filter_map(|c| c.training.as_ref())
            .filter_map(|t| t.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v))
            .collect()
    };
    let mut names: Vec<String> = Vec::new();
    for c in &cells {
        if let Some(t) = &c.training {
            for (n, _) in &t.metrics {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &b in &grid {
        let mut errors: Vec<String> = of(b)
            .flat_map(|c| c.errors.iter().map(move |e| format!("seed {}: {e}", c.seed)))
            .collect();
        let clip = of(b)
            .filter_map(|c| c.training.as_ref().and_then(|t| t.noise))
            .map(|p| p.clip_norm)
            .next()
            .unwrap_or(config.clip_norm);
        let (train_p, attack_p, worst, relaxed) = match bounds_row(config, prep, b, clip) {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("bounds: {e}"));
                (None, None, f64::NAN, f64::NAN)
            }
        };
        let utility = names
            .iter()
            .map(|n| {
                let vals = metric_values(b, n);
                let (mean, sd) = mean_sd(&vals);
                let reference = metric_values(Budget::NONPRIVATE, n);
                let p_value = if b.is_private() {
                    welch_t_test(&vals, &reference).ok()
                } else {
                    None
                };
                MetricSummary {
                    name: n.clone(),
                    mean,
                    sd,
                    p_value,
                }
            })
            .collect();
        let rates: Vec<f64> = of(b)
            .filter_map(|c| c.attack.as_ref())
            .map(|a| a.success.fraction)
            .filter(|f| !f.is_nan())
            .collect();
        let realistic = mean_sd(&rates).0;
        let pooled: Vec<MatchResult> = of(b)
            .filter_map(|c| c.attack.as_ref())
            .flat_map(|a| a.matches.iter().copied())
            .collect();
        if !pooled.is_empty() {
            curves.push(BudgetCurve {
                epsilon: b,
                curve: cumulative_curve(&pooled, &default_grid())?,
            });
        }
        rows.push(RiskRow {
            epsilon: b,
            noise_multiplier: train_p.map(|p| p.noise_multiplier),
            attack_noise_multiplier: attack_p.map(|p| p.noise_multiplier),
            clip_norm: train_p.map(|p| p.clip_norm),
            utility,
            worst_case: worst,
            relaxed,
            realistic,
            seeds_ok: of(b).filter(|c| c.errors.is_empty()).count(),
            errors,
        });
    }

    let n = prep.n_train();
    let base = ReroParams::new(
        PrivacyParams {
            noise_multiplier: 1.0,
            clip_norm: config.clip_norm,
            sampling_rate: (config.train.batch_size as f64 / n as f64).min(1.0),
            steps: config.train.epochs as u64 * n.div_ceil(config.train.batch_size) as u64,
            delta: config.delta,
        },
        prep.kappa(config),
    );
    Ok(RiskProfile {
        schema_version: PROFILE_SCHEMA_VERSION,
        config: config.clone(),
        n_train: n,
        kappa: prep.kappa(config),
        distance: config.attack.distance.name().into(),
        rows,
        curves,
        bound_grid: bound_curve(&base, &dense_budget_grid())?,
    })
}

/// Full grid: every cell, then assembly.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<(RiskProfile, Vec<CellOutput>)> {
    let prep = Prepared::new(config)?;
    let outputs = run_cells(config, &prep, Stages::ALL)?;
    let records: Vec<CellRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let profile = assemble(config, &prep, &records)?;
    Ok((profile, outputs))
}
