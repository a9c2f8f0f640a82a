use serde::{Deserialize, Serialize};

use super::dp::privatize;
use super::loss::{mean_of, sample_gradient, sample_loss, Loss};
use super::metrics::{confusion_matrix, dice_counts, dice_from_counts, mcc, Dice, Mcc};
use super::model::{Model, ModelSpec, ParamSet, Task};
use super::optim::{OptimizerKind, OptimizerState};
use crate::accountant::{Epsilon, PrivacyParams, PrivacySpent};
use crate::datagen::{Dataset, DatasetSpec, Sample, Target};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-3;
pub const DEFAULT_DELTA: f64 = 8e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    /// Relative improvement of the validation loss that resets patience.
    pub min_improvement: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            patience: 5,
            min_improvement: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSettings {
    #[serde(with = "crate::serde_ext")]
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub h_flip: f64,
    pub v_flip: f64,
    /// Augmented copies per sample; their gradients are averaged before
    /// clipping.
    pub multiplicity: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            h_flip: 0.0,
            v_flip: 0.0,
            multiplicity: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    pub early_stopping: Option<EarlyStopping>,
    /// `None` trains without clipping or noise.
    pub dp: Option<DpSettings>,
    pub augmentation: Augmentation,
    pub loss: Loss,
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Nadam,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 32,
            epochs: 20,
            early_stopping: Some(EarlyStopping::default()),
            dp: None,
            augmentation: Augmentation::default(),
            loss: Loss::CrossEntropy,
            delta: DEFAULT_DELTA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::param(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("batch size and epochs must be >= 1"));
        }
        if self.augmentation.multiplicity == 0 {
            return Err(Error::param("augmentation multiplicity must be >= 1"));
        }
        for p in [self.augmentation.h_flip, self.augmentation.v_flip] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("flip probability {p} outside [0, 1]")));
            }
        }
        if let Some(dp) = self.dp {
            if !(dp.clip_norm > 0.0) {
                return Err(Error::param(format!("clip norm must be > 0, got {}", dp.clip_norm)));
            }
            if !(dp.noise_multiplier >= 0.0) || dp.noise_multiplier.is_infinite() {
                return Err(Error::param("noise multiplier must be finite and >= 0"));
            }
            if dp.noise_multiplier > 0.0 && dp.clip_norm.is_infinite() {
                return Err(Error::param("noise needs a finite clip norm"));
            }
        }
        Ok(())
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.dp.map_or(0.0, |d| d.noise_multiplier)
    }

    pub fn uses_poisson(&self) -> bool {
        self.noise_multiplier() > 0.0
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Accountant inputs for training on `n` samples for `steps` steps.
    pub fn privacy_params(&self, n: usize, steps: u64) -> Option<PrivacyParams> {
        let dp = self.dp?;
        Some(PrivacyParams {
            noise_multiplier: dp.noise_multiplier,
            clip_norm: dp.clip_norm,
            sampling_rate: (self.batch_size as f64 / n as f64).min(1.0),
            steps,
            delta: self.delta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    Poisson,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub mcc: Option<Mcc>,
    /// Per class, pooled over all pixels of the evaluated set.
    pub dice: Vec<Dice>,
}

impl Evaluation {
    /// MCC for classification, foreground-class Dice otherwise.
    pub fn headline(&self) -> Vec<(String, f64)> {
        match self.mcc {
            Some(m) => vec![("mcc".into(), m.value)],
            None => self
                .dice
                .iter()
                .enumerate()
                .skip(1)
                .map(|(c, d)| (format!("dice_{c}"), d.value))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub evaluation: Evaluation,
    pub loss_trace: Vec<f64>,
    pub val_loss_trace: Vec<f64>,
    pub epochs_run: usize,
    pub steps: u64,
    pub batching: Batching,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: MetricsReport,
    pub privacy: PrivacySpent,
}

/// Everything needed to reproduce and audit one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub config: TrainConfig,
    pub report: MetricsReport,
    pub privacy: PrivacySpent,
    pub test: Option<Evaluation>,
}

impl RunRecord {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunRecord> {
        let r: RunRecord = serde_json::from_str(text)?;
        if r.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported run record schema {}", r.schema_version)));
        }
        Ok(r)
    }
}

fn flip_w(t: &Tensor) -> Tensor {
    let w = t.shape()[t.rank() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn flip_h(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = t.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h / 2 {
            for x in 0..w {
                plane.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
    out
}

fn augment(sample: &Sample, aug: &Augmentation, rng: &mut Rng) -> (Tensor, Target) {
    let (mut x, mut t) = (sample.image.clone(), sample.target.clone());
    let flips: [(f64, fn(&Tensor) -> Tensor); 2] = [(aug.h_flip, flip_w), (aug.v_flip, flip_h)];
    for (p, f) in flips {
        if p > 0.0 && rng.bernoulli(p) && x.rank() == 3 {
            x = f(&x);
            if let Target::Mask(m) = &t {
                t = Target::Mask(f(m));
            }
        }
    }
    (x, t)
}

/// Gradient for one sample averaged over its augmented copies, plus the
/// mean loss of those copies.
fn sample_contribution(
    model: &Model,
    sample: &Sample,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(f64, ParamSet)> {
    let k = config.augmentation.multiplicity;
    let augmenting = config.augmentation.h_flip > 0.0 || config.augmentation.v_flip > 0.0;
    if k == 1 && !augmenting {
        return sample_gradient(model, &sample.image, &sample.target, &config.loss);
    }
    let mut grads = Vec::with_capacity(k);
    let mut loss = 0.0;
    for _ in 0..k {
        let (x, t) = augment(sample, &config.augmentation, rng);
        let (l, g) = sample_gradient(model, &x, &t, &config.loss)?;
        loss += l;
        grads.push(g);
    }
    let g = if k == 1 { grads.pop().expect("one copy") } else { mean_of(&grads).expect("k >= 1") };
    Ok((loss / k as f64, g))
}

fn tag_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Training { stage, message } => Error::training(format!("epoch {epoch}, {stage}"), message),
        other => other,
    }
}

/// Trains `spec` on `data`. When `validation` is given it drives early
/// stopping and the best-validation weights are returned.
pub fn train(
    spec: &ModelSpec,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if data.image_shape() != spec.input_shape {
        return Err(Error::dim(format!(
            "dataset images {:?} do not fit model input {:?}",
            data.image_shape(),
            spec.input_shape
        )));
    }
    let mut model = Model::init(spec, config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer, &model.params);
    let n = data.len();
    let steps_per_epoch = config.steps_per_epoch(n);
    let poisson = config.uses_poisson();
    let q = (config.batch_size as f64 / n as f64).min(1.0);
    let mut batch_rng = Rng::stream(config.seed, 0xBA7C);
    let mut noise_rng = Rng::stream(config.seed, 0x0015E);
    let mut aug_rng = Rng::stream(config.seed, 0xA06);

    let mut loss_trace = Vec::new();
    let mut val_trace = Vec::new();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut since_best = 0usize;
    let mut steps = 0u64;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        let batches: Vec<Vec<usize>> = if poisson {
            (0..steps_per_epoch)
                .map(|_| (0..n).filter(|_| batch_rng.bernoulli(q)).collect())
                .collect()
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            batch_rng.shuffle(&mut order);
            order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
        };
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in batches {
            let mut grads = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (l, g) = sample_contribution(&model, &data.samples[i], config, &mut aug_rng)
                    .map_err(|e| tag_epoch(e, epoch))?;
                if !l.is_finite() {
                    return Err(Error::training(format!("epoch {epoch}"), "non-finite loss"));
                }
                epoch_loss += l;
                seen += 1;
                grads.push(g);
            }
            let update = match config.dp {
                Some(dp) => {
                    let denom = if poisson { config.batch_size as f64 } else { batch.len() as f64 };
                    privatize(&grads, &model.params, dp.clip_norm, dp.noise_multiplier, denom, &mut noise_rng)?
                }
                None => match mean_of(&grads) {
                    Some(g) => g,
                    None => continue,
                },
            };
            opt.step(&mut model.params, &update, config.learning_rate)
                .map_err(|e| tag_epoch(e, epoch))?;
            steps += 1;
        }
        epochs_run = epoch + 1;
        loss_trace.push(if seen > 0 { epoch_loss / seen as f64 } else { f64::NAN });

        if let (Some(val), Some(es)) = (validation, config.early_stopping) {
            let v = mean_loss(&model, val, &config.loss).map_err(|e| tag_epoch(e, epoch))?;
            if !v.is_finite() {
                return Err(Error::training(format!("epoch {epoch}"), "non-finite validation loss"));
            }
            val_trace.push(v);
            let improved = match &best {
                None => true,
                Some((b, _)) => v < b - es.min_improvement * b.abs(),
            };
            if improved {
                best = Some((v, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }

    let evaluation = evaluate(&model, validation.unwrap_or(data), &config.loss)?;
    let privacy = match config.privacy_params(n, steps) {
        Some(p) if p.noise_multiplier > 0.0 => p.spent()?,
        _ => PrivacySpent {
            epsilon: Epsilon::Overflow,
            delta: config.delta,
            order: None,
        },
    };
    Ok(TrainOutcome {
        model,
        report: MetricsReport {
            evaluation,
            loss_trace,
            val_loss_trace: val_trace,
            epochs_run,
            steps,
            batching: if poisson { Batching::Poisson } else { Batching::Shuffled },
            stopped_early,
        },
        privacy,
    })
}

pub fn mean_loss(model: &Model, data: &Dataset, loss: &Loss) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        total += sample_loss(model, &s.image, &s.target, loss)?;
    }
    Ok(total / data.len().max(1) as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax of `[K, H, W]` logits as an `[H, W]` class map.
pub fn predict_mask(logits: &Tensor) -> Tensor {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; hw];
    let mut col = vec![0.0; k];
    for (px, o) in out.iter_mut().enumerate() {
        for (j, c) in col.iter_mut().enumerate() {
            *c = logits.data()[j * hw + px];
        }
        *o = argmax(&col) as f64;
    }
    Tensor::new(vec![h, w], out).expect("shape")
}

pub fn evaluate(model: &Model, data: &Dataset, loss: &Loss) -> Result<Evaluation> {
    let task = model.task()?;
    let mut total_loss = 0.0;
    match task {
        Task::Classification { classes } => {
            let mut truth = Vec::with_capacity(data.len());
            let mut pred = Vec::with_capacity(data.len());
            for s in &data.samples {
                let logits = model.predict(&s.image)?;
                total_loss += loss.evaluate(&logits, &s.target)?.0;
                truth.push(s.target.class().ok_or_else(|| Error::param("mask target for a classifier"))?);
                pred.push(argmax(logits.data()));
            }
            Ok(Evaluation {
                loss: total_loss / data.len().max(1) as f64,
                mcc: Some(mcc(&confusion_matrix(&truth, &pred, classes)?)?),
                dice: Vec::new(),
            })
        }
        Task::Segmentation { classes } => {
            let mut counts = vec![(0u64, 0u64, 0u64); classes];
            for s in &data.samples {
                let logits = model.predict(&s.image)?;
                total_loss += loss.evaluate(&logits, &s.target)?.0;
                let truth = s.target.mask().ok_or_else(|| Error::param("class target for a segmenter"))?;
                let pred = predict_mask(&logits);
                for (c, acc) in counts.iter_mut().enumerate() {
                    let (i, a, b) = dice_counts(&pred, truth, c)?;
                    acc.0 += i;
                    acc.1 += a;
                    acc.2 += b;
                }
            }
            Ok(Evaluation {
                loss: total_loss / data.len().max(1) as f64,
                mcc: None,
                dice: counts.into_iter().map(|(i, a, b)| dice_from_counts(i, a, b)).collect(),
            })
        }
    }
}

/// Coarse grid search over clip norms, scored by the validation headline
/// metric (MCC, or mean foreground Dice). Ties go to the smaller norm.
pub fn tune_clip_norm(
    spec: &ModelSpec,
    data: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let base = config.dp.ok_or_else(|| Error::param("clip tuning needs DP settings"))?;
    if grid.is_empty() {
        return Err(Error::param("clip grid is empty"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &c in grid {
        let mut cfg = config.clone();
        cfg.dp = Some(DpSettings { clip_norm: c, ..base });
        let out = train(spec, data, Some(validation), &cfg)?;
        let head = evaluate(&out.model, validation, &cfg.loss)?.headline();
        let score = head.iter().map(|(_, v)| v).sum::<f64>() / head.len() as f64;
        scores.push((c, score));
    }
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(c, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((c, s)),
        })
        .expect("nonempty grid");
    Ok((best.0, scores))
}
