//! Realistic-threat attack: a malicious federated server prepends an
//! imprint block to the shared model and reconstructs client inputs from
//! the gradients the client returns.
//!
//! The block is `flatten → dense(P→N) → relu → dense_add_mean(N→P) →
//! reshape`. Every row of the first weight matrix is `1/P`, so bin `i`
//! fires when an image's mean brightness exceeds threshold `t_i`. For a
//! single active sample the first-layer gradients are `δ_i·x` (weights)
//! and `δ_i` (bias), and their ratio is `x` itself.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::accountant::PrivacyParams;
use crate::container::{Container, ContainerKind};
use crate::datagen::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::trainer::dp::privatize;
use crate::trainer::loss::{per_sample_gradients, Loss};
use crate::trainer::model::{LayerSpec, Model, ModelSpec, ParamSet, Task};

pub const DEFAULT_BINS: usize = 10;
/// Threshold of the lowest bin, which every realistic input clears.
pub const CATCH_ALL_THRESHOLD: f64 = -10.0;
/// Bias-gradient cut-off when no noise is added.
pub const EXACT_TAU: f64 = 1e-12;
/// Multiple of the per-coordinate noise standard deviation below which a
/// bias gradient is treated as noise.
pub const TAU_NOISE_MULTIPLE: f64 = 10.0;
/// Amplitude of the fixed pattern in the decoder weights.
const DECODER_AMPLITUDE: f64 = 0.01;

/// Brightness thresholds, ascending. One bin sits at the median; `N ≥ 2`
/// bins get a catch-all plus the `k/N` quantiles of a standard normal.
pub fn bin_thresholds(bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::param("imprint needs at least one bin"));
    }
    if bins == 1 {
        return Ok(vec![0.0]);
    }
    let std_normal = Normal::standard();
    let mut t = vec![CATCH_ALL_THRESHOLD];
    t.extend((1..bins).map(|k| std_normal.inverse_cdf(k as f64 / bins as f64)));
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprintBlock {
    /// `[N, P]`
    pub w1: Tensor,
    /// `[N]`, the negated thresholds.
    pub b1: Tensor,
    /// `[P, N]`
    pub w2: Tensor,
}

impl ImprintBlock {
    pub fn bins(&self) -> usize {
        self.b1.len()
    }

    pub fn pixels(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// Average-brightness probes with standard-normal thresholds. The decoder
/// cannot reproduce a `P`-pixel image from `N ≪ P` bins; it adds a small
/// fixed cosine pattern per bin on top of the mean-of-bins term.
pub fn init_imprint(bins: usize, pixels: usize) -> Result<ImprintBlock> {
    if pixels == 0 {
        return Err(Error::param("imprint needs a nonempty input"));
    }
    let t = bin_thresholds(bins)?;
    let w1 = Tensor::filled(&[bins, pixels], 1.0 / pixels as f64);
    let b1 = Tensor::vector(t.iter().map(|v| -v).collect());
    let mut w2 = Tensor::zeros(&[pixels, bins]);
    for p in 0..pixels {
        for i in 0..bins {
            let phase = std::f64::consts::PI * (i + 1) as f64 * (p as f64 + 0.5) / pixels as f64;
            w2.data_mut()[p * bins + i] = DECODER_AMPLITUDE * phase.cos();
        }
    }
    Ok(ImprintBlock { w1, b1, w2 })
}

fn block_layers(input_shape: &[usize], bins: usize) -> Vec<LayerSpec> {
    let pixels = input_shape.iter().product();
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { input: pixels, output: bins },
        LayerSpec::Relu,
        LayerSpec::DenseAddMean { input: bins, output: pixels },
        LayerSpec::Reshape {
            shape: input_shape.to_vec(),
        },
    ]
}

const IMPRINT_LAYER: usize = 1;

/// The imprint block followed by the untouched original layers.
pub fn surgery_prepend(spec: &ModelSpec, bins: usize) -> Result<ModelSpec> {
    spec.validate()?;
    if bins == 0 {
        return Err(Error::param("imprint needs at least one bin"));
    }
    let mut layers = block_layers(&spec.input_shape, bins);
    layers.extend(spec.layers.iter().cloned());
    let out = ModelSpec {
        input_shape: spec.input_shape.clone(),
        layers,
    };
    out.validate()?;
    Ok(out)
}

/// Surgically modified copy of `model` carrying the imprint weights and the
/// original downstream weights.
pub fn implant(model: &Model, bins: usize) -> Result<Model> {
    let spec = surgery_prepend(&model.spec, bins)?;
    let block = init_imprint(bins, model.spec.input_shape.iter().product())?;
    let mut layers = vec![
        Vec::new(),
        vec![block.w1, block.b1],
        Vec::new(),
        vec![block.w2],
        Vec::new(),
    ];
    layers.extend(model.params.layers.iter().cloned());
    Model::from_params(&spec, ParamSet { layers }, model.seed)
}

/// Structural signature only: `flatten → dense(P→N) → relu →
/// dense-like(N→P)` with `N ≤ P/4`.
pub fn has_imprint_signature(spec: &ModelSpec) -> bool {
    let pixels: usize = spec.input_shape.iter().product();
    match spec.layers.as_slice() {
        [LayerSpec::Flatten, LayerSpec::Dense { input, output: bins }, LayerSpec::Relu, next, ..] => {
            let expands_back = match next {
                LayerSpec::Dense { input: i, output: o } | LayerSpec::DenseAddMean { input: i, output: o } => {
                    i == bins && *o == pixels
                }
                _ => false,
            };
            *input == pixels && *bins >= 1 && 4 * bins <= pixels && expands_back
        }
        _ => false,
    }
}

/// Client-side check: the signature plus a first layer whose rows are each
/// constant, i.e. brightness probes rather than learned features.
pub fn detect_imprint(model: &Model) -> bool {
    if !has_imprint_signature(&model.spec) {
        return false;
    }
    let w1 = &model.params.layers[IMPRINT_LAYER][0];
    let p = w1.shape()[1];
    w1.data().chunks(p).all(|row| {
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1e-300)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPacket {
    pub grads: ParamSet,
    pub clipped: bool,
    pub noised: bool,
    pub noise_multiplier: f64,
    #[serde(with = "crate::serde_ext")]
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl GradientPacket {
    /// Default bias-gradient cut-off: exact-zero guard without noise, ten
    /// noise standard deviations otherwise.
    pub fn default_tau(&self) -> f64 {
        if self.noised {
            TAU_NOISE_MULTIPLE * self.noise_multiplier * self.clip_norm / self.batch_size as f64
        } else {
            EXACT_TAU
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSet {
    /// De-normalized `[C, H, W]` candidates.
    #[serde(skip)]
    pub images: Vec<Tensor>,
    pub source_bins: Vec<usize>,
    pub skipped_bins: usize,
    pub tau: f64,
    pub diagnostic: Option<String>,
}

/// `x̂_i = ∇W1[i, :] ⊘ ∇b1[i]` for every bin with `|∇b1[i]| > τ`.
pub fn recover(
    packet: &GradientPacket,
    image_shape: &[usize],
    stats: &NormStats,
    tau: Option<f64>,
) -> Result<ReconstructionSet> {
    let layer = packet
        .grads
        .layers
        .get(IMPRINT_LAYER)
        .filter(|l| l.len() == 2 && l[0].rank() == 2)
        .ok_or_else(|| Error::param("packet carries no imprint-layer gradients"))?;
    let (gw, gb) = (&layer[0], &layer[1]);
    let pixels: usize = image_shape.iter().product();
    if gw.shape()[1] != pixels || gb.len() != gw.shape()[0] {
        return Err(Error::dim(format!(
            "imprint gradients {:?} do not match images {image_shape:?}",
            gw.shape()
        )));
    }
    let tau = tau.unwrap_or_else(|| packet.default_tau());
    let mut set = ReconstructionSet {
        images: Vec::new(),
        source_bins: Vec::new(),
        skipped_bins: 0,
        tau,
        diagnostic: None,
    };
    for (i, &b) in gb.data().iter().enumerate() {
        if b.abs() <= tau || !b.is_finite() {
            set.skipped_bins += 1;
            continue;
        }
        let row = &gw.data()[i * pixels..(i + 1) * pixels];
        let x = Tensor::new(image_shape.to_vec(), row.iter().map(|v| v / b).collect())?;
        set.images.push(stats.invert(&x));
        set.source_bins.push(i);
    }
    if set.images.is_empty() {
        set.diagnostic = Some(format!("all {} bins at or below tau = {tau:e}", gb.len()));
    }
    Ok(set)
}

/// Server-to-client message: the (modified) model and dictated settings.
#[derive(Debug, Clone)]
pub struct RoundRequest {
    pub model: Model,
    pub batch_size: usize,
    pub loss: Loss,
}

/// Holds private data and applies its own DP policy before answering.
#[derive(Debug, Clone)]
pub struct Client<'a> {
    data: &'a Dataset,
    dp: Option<PrivacyParams>,
    rng: Rng,
}

impl<'a> Client<'a> {
    pub fn new(data: &'a Dataset, dp: Option<PrivacyParams>, seed: u64) -> Self {
        Client {
            data,
            dp,
            rng: Rng::stream(seed, 0xC11E),
        }
    }

    /// Gradient of the requested model on the samples at `batch`, averaged
    /// over the batch and, under DP, clipped and noised first.
    pub fn respond(&mut self, request: &RoundRequest, batch: &[usize]) -> Result<GradientPacket> {
        if batch.is_empty() {
            return Err(Error::param("empty batch"));
        }
        let items: Vec<_> = batch
            .iter()
            .map(|&i| {
                let s = &self.data.samples[i];
                (&s.image, &s.target)
            })
            .collect();
        let grads = per_sample_gradients(&request.model, &items, &request.loss)?;
        let (clip, sigma) = self.dp.map_or((f64::INFINITY, 0.0), |p| (p.clip_norm, p.noise_multiplier));
        let avg = privatize(&grads, &grads[0], clip, sigma, batch.len() as f64, &mut self.rng)?;
        Ok(GradientPacket {
            grads: avg,
            clipped: clip.is_finite(),
            noised: sigma > 0.0,
            noise_multiplier: sigma,
            clip_norm: clip,
            batch_size: batch.len(),
        })
    }
}

/// Dictates hyperparameters, ships the modified model, inverts gradients.
#[derive(Debug, Clone)]
pub struct MaliciousServer {
    pub model: Model,
    pub stats: NormStats,
    pub tau: Option<f64>,
}

impl MaliciousServer {
    pub fn new(downstream: &Model, bins: usize, stats: NormStats) -> Result<Self> {
        Ok(MaliciousServer {
            model: implant(downstream, bins)?,
            stats,
            tau: None,
        })
    }

    pub fn request(&self, batch_size: usize) -> Result<RoundRequest> {
        if batch_size == 0 {
            return Err(Error::param("batch size must be >= 1"));
        }
        let loss = match self.model.task()? {
            Task::Classification { .. } => Loss::CrossEntropy,
            Task::Segmentation { .. } => Loss::weighted_segmentation(),
        };
        Ok(RoundRequest {
            model: self.model.clone(),
            batch_size,
            loss,
        })
    }

    pub fn recover(&self, packet: &GradientPacket) -> Result<ReconstructionSet> {
        recover(packet, &self.model.spec.input_shape, &self.stats, self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    /// Server-dictated batch size.
    pub batch_size: usize,
    /// The client's own DP policy; `None` sends raw gradients.
    pub dp_on_client: Option<PrivacyParams>,
    /// Passes over the client data.
    pub rounds: usize,
    pub bins: usize,
    pub seed: u64,
    /// Overrides the default bias-gradient cut-off.
    pub tau: Option<f64>,
}

impl Default for AttackScenario {
    fn default() -> Self {
        AttackScenario {
            batch_size: 1,
            dp_on_client: None,
            rounds: 1,
            bins: DEFAULT_BINS,
            seed: 0,
            tau: None,
        }
    }
}

impl AttackScenario {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rounds == 0 || self.bins == 0 {
            return Err(Error::param("batch size, rounds and bins must all be >= 1"));
        }
        if let Some(p) = &self.dp_on_client {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub scenario: AttackScenario,
    /// Client sample indices behind each packet.
    pub batches: Vec<Vec<usize>>,
    pub sets: Vec<ReconstructionSet>,
}

impl Campaign {
    pub fn reconstructions(&self) -> usize {
        self.sets.iter().map(|s| s.images.len()).sum()
    }

    pub fn skipped_bins(&self) -> usize {
        self.sets.iter().map(|s| s.skipped_bins).sum()
    }

    /// Reconstructions as one `[M, C, H, W]` entry per packet (packets with
    /// none are omitted) plus the scenario and bookkeeping as JSON.
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_string(self)?;
        let mut c = Container::new(ContainerKind::Reconstruction, meta);
        for (i, set) in self.sets.iter().enumerate() {
            if let Some(first) = set.images.first() {
                let mut shape = vec![set.images.len()];
                shape.extend_from_slice(first.shape());
                let data = set.images.iter().flat_map(|t| t.data().iter().copied()).collect();
                c.push(format!("packet{i}"), Tensor::new(shape, data)?);
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Campaign> {
        if c.kind != ContainerKind::Reconstruction {
            return Err(Error::Format(format!("expected reconstructions, found {:?}", c.kind)));
        }
        let mut campaign: Campaign = serde_json::from_str(&c.meta)?;
        for (i, set) in campaign.sets.iter_mut().enumerate() {
            let m = set.source_bins.len();
            if m == 0 {
                continue;
            }
            let t = c.entry(&format!("packet{i}"))?;
            if t.rank() < 2 || t.shape()[0] != m {
                return Err(Error::Format(format!("packet{i} holds {:?}, expected {m} images", t.shape())));
            }
            let per = t.len() / m;
            set.images = (0..m)
                .map(|j| Tensor::new(t.shape()[1..].to_vec(), t.data()[j * per..(j + 1) * per].to_vec()))
                .collect::<Result<_>>()?;
        }
        Ok(campaign)
    }
}

/// Runs the attack over `data` (normalized with `stats`) in server-dictated
/// batches, with true labels and the training loss.
pub fn run_campaign(
    data: &Dataset,
    stats: &NormStats,
    scenario: &AttackScenario,
    downstream: &Model,
) -> Result<Campaign> {
    scenario.validate()?;
    let mut server = MaliciousServer::new(downstream, scenario.bins, stats.clone())?;
    server.tau = scenario.tau;
    let request = server.request(scenario.batch_size)?;
    let mut client = Client::new(data, scenario.dp_on_client, scenario.seed);
    let mut batches = Vec::new();
    let mut sets = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for _ in 0..scenario.rounds {
        for batch in indices.chunks(scenario.batch_size) {
            let packet = client.respond(&request, batch)?;
            sets.push(server.recover(&packet)?);
            batches.push(batch.to_vec());
        }
    }
    Ok(Campaign {
        scenario: scenario.clone(),
        batches,
        sets,
    })
}
