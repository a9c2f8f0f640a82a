//! Synthetic stand-ins for three imaging regimes: a small binary task with
//! an 80:20 class ratio, a larger multi-class task with power-law class
//! frequencies, and a segmentation task whose target structure covers well
//! under one percent of each image.
//!
//! Every generator is a pure function of its [`DatasetSpec`]: labels come
//! from stream 0 of the spec seed and sample `i` is rendered from stream
//! `i + 1`.

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerKind};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    BinaryImbalanced,
    MulticlassPowerLaw,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Class proportions for the binary task.
    pub class_ratio: Vec<f64>,
    pub n_classes: usize,
    /// Frequency of the class of rank `k` is proportional to `k^-s`.
    pub zipf_exponent: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// Which real dataset's regime the generator imitates.
    pub mirrors: String,
}

impl DatasetSpec {
    pub fn binary(n_samples: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::BinaryImbalanced,
            n_samples,
            height: size,
            width: size,
            channels: 1,
            class_ratio: vec![0.8, 0.2],
            n_classes: 2,
            zipf_exponent: 0.0,
            noise: 0.1,
            seed,
            mirrors: "HAM10000 (binary, 80:20)".into(),
        }
    }

    pub fn multiclass(n_samples: usize, n_classes: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::MulticlassPowerLaw,
            n_samples,
            height: size,
            width: size,
            channels: 1,
            class_ratio: Vec::new(),
            n_classes,
            zipf_exponent: 1.5,
            noise: 0.1,
            seed,
            mirrors: "RadImageNet (many imbalanced classes)".into(),
        }
    }

    pub fn segmentation(n_samples: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Segmentation,
            n_samples,
            height: size,
            width: size,
            channels: 1,
            class_ratio: Vec::new(),
            n_classes: 3,
            zipf_exponent: 0.0,
            noise: 0.05,
            seed,
            mirrors: "MSD Liver (organ + tiny tumour)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// `[H, W]` map with 0 background, 1 organ, 2 tumour.
    Mask(Tensor),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Mask(_) => None,
        }
    }

    pub fn mask(&self) -> Option<&Tensor> {
        match self {
            Target::Mask(m) => Some(m),
            Target::Class(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`
    pub image: Tensor,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.spec.channels, self.spec.height, self.spec.width]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().filter_map(|s| s.target.class()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for c in self.labels() {
            counts[c] += 1;
        }
        counts
    }

    pub fn is_segmentation(&self) -> bool {
        self.spec.kind == DatasetKind::Segmentation
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            n_classes: self.n_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::BinaryImbalanced => gen_binary_imbalanced(spec),
        DatasetKind::MulticlassPowerLaw => gen_multiclass_powerlaw(spec),
        DatasetKind::Segmentation => gen_segmentation(spec),
    }
}

fn check_geometry(spec: &DatasetSpec, min_side: usize) -> Result<()> {
    if spec.height < min_side || spec.width < min_side {
        return Err(Error::param(format!(
            "images must be at least {min_side}x{min_side}, got {}x{}",
            spec.height, spec.width
        )));
    }
    if spec.channels == 0 {
        return Err(Error::param("images need at least one channel"));
    }
    if spec.n_samples == 0 {
        return Err(Error::param("dataset must not be empty"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::param("noise must be >= 0"));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items to the given weights.
/// Ties in the remainders go to the lower index.
pub fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn shuffled_labels(counts: &[usize], seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    Rng::stream(seed, 0).shuffle(&mut labels);
    labels
}

fn sample_rng(spec: &DatasetSpec, index: usize) -> Rng {
    Rng::stream(spec.seed, index as u64 + 1)
}

/// Binary task: class 0 shows a filled disk, class 1 a ring.
pub fn gen_binary_imbalanced(spec: &DatasetSpec) -> Result<Dataset> {
    check_geometry(spec, 8)?;
    let ratio = &spec.class_ratio;
    if ratio.len() != 2 || ratio.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::param(format!("binary ratio must be two positive shares, got {ratio:?}")));
    }
    if (ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("class ratio {ratio:?} does not sum to 1")));
    }
    let counts = apportion(ratio, spec.n_samples);
    if counts.contains(&0) {
        return Err(Error::param(format!(
            "{} samples cannot honour ratio {ratio:?}",
            spec.n_samples
        )));
    }
    let labels = shuffled_labels(&counts, spec.seed);
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = sample_rng(spec, i);
            let shape = if label == 0 { Shape::Disk } else { Shape::Ring };
            Sample {
                image: render_shape(spec, shape, 0, &mut rng),
                target: Target::Class(label),
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        n_classes: 2,
        samples,
    })
}

/// Power-law multi-class task with one parametric shape per class.
pub fn gen_multiclass_powerlaw(spec: &DatasetSpec) -> Result<Dataset> {
    check_geometry(spec, 8)?;
    let k = spec.n_classes;
    if k < 3 {
        return Err(Error::param(format!("need at least 3 classes, got {k}")));
    }
    let weights: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-spec.zipf_exponent)).collect();
    let mut counts = apportion(&weights, spec.n_samples);
    if spec.n_samples >= k {
        // Every class appears at least once; the head class donates.
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..k).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }
    let labels = shuffled_labels(&counts, spec.seed);
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = sample_rng(spec, i);
            let shape = Shape::ALL[label % Shape::ALL.len()];
            Sample {
                image: render_shape(spec, shape, label / Shape::ALL.len(), &mut rng),
                target: Target::Class(label),
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        n_classes: k,
        samples,
    })
}

pub const MASK_BACKGROUND: usize = 0;
pub const MASK_ORGAN: usize = 1;
pub const MASK_TUMOUR: usize = 2;

/// Organ disk (radius 25–40% of the width) containing one tumour dot
/// (radius 2–5%).
pub fn gen_segmentation(spec: &DatasetSpec) -> Result<Dataset> {
    check_geometry(spec, 32)?;
    let (h, w) = (spec.height, spec.width);
    let side = w.min(h) as f64;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = sample_rng(spec, i);
            let organ_r = rng.uniform_range(0.25, 0.40) * side;
            let cx = w as f64 / 2.0 + rng.uniform_range(-0.08, 0.08) * side;
            let cy = h as f64 / 2.0 + rng.uniform_range(-0.08, 0.08) * side;
            let tumour_r = rng.uniform_range(0.02, 0.05) * side;
            // Tumour centre sits on a pixel centre well inside the organ.
            let reach = (organ_r - tumour_r - 2.5).max(0.0);
            let (tx, ty) = loop {
                let ang = rng.uniform_range(0.0, std::f64::consts::TAU);
                let rad = reach * rng.uniform().sqrt();
                let px = (cx + rad * ang.cos()).floor() + 0.5;
                let py = (cy + rad * ang.sin()).floor() + 0.5;
                if ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() + tumour_r + 1.5 <= organ_r {
                    break (px, py);
                }
            };
            let background = rng.uniform_range(0.05, 0.15);
            let organ_level = rng.uniform_range(0.45, 0.6);
            let tumour_level = organ_level + rng.uniform_range(0.2, 0.3);
            let mut image = vec![0.0; spec.channels * h * w];
            let mut mask = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let d_organ = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    let d_tumour = ((fx - tx).powi(2) + (fy - ty).powi(2)).sqrt();
                    let (level, class) = if d_tumour <= tumour_r {
                        (tumour_level, MASK_TUMOUR)
                    } else if d_organ <= organ_r {
                        (organ_level, MASK_ORGAN)
                    } else {
                        (background, MASK_BACKGROUND)
                    };
                    mask[y * w + x] = class as f64;
                    for c in 0..spec.channels {
                        let v = level + spec.noise * rng.normal();
                        image[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            Sample {
                image: Tensor::new(vec![spec.channels, h, w], image).expect("shape"),
                target: Target::Mask(Tensor::new(vec![h, w], mask).expect("shape")),
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        n_classes: 3,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Ring,
    Square,
    HollowSquare,
    HBar,
    VBar,
    Cross,
    Diagonal,
    TwoDots,
    Triangle,
}

impl Shape {
    const ALL: [Shape; 10] = [
        Shape::Disk,
        Shape::Ring,
        Shape::Square,
        Shape::HollowSquare,
        Shape::HBar,
        Shape::VBar,
        Shape::Cross,
        Shape::Diagonal,
        Shape::TwoDots,
        Shape::Triangle,
    ];

    /// Whether the point `(dx, dy)`, relative to the shape centre and in
    /// units of the shape size, is covered.
    fn covers(self, dx: f64, dy: f64) -> bool {
        let r = (dx * dx + dy * dy).sqrt();
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => r <= 1.0,
            Shape::Ring => (0.55..=1.0).contains(&r),
            Shape::Square => ax.max(ay) <= 0.85,
            Shape::HollowSquare => (0.5..=0.85).contains(&ax.max(ay)),
            Shape::HBar => ax <= 1.0 && ay <= 0.3,
            Shape::VBar => ay <= 1.0 && ax <= 0.3,
            Shape::Cross => (ax <= 1.0 && ay <= 0.25) || (ay <= 1.0 && ax <= 0.25),
            Shape::Diagonal => (dx - dy).abs() <= 0.35 && ax <= 1.0 && ay <= 1.0,
            Shape::TwoDots => {
                ((dx + 0.55).powi(2) + dy * dy).sqrt() <= 0.4
                    || ((dx - 0.55).powi(2) + dy * dy).sqrt() <= 0.4
            }
            Shape::Triangle => dy <= 0.8 && dy >= -0.9 + 2.0 * ax,
        }
    }
}

/// Renders a shape on a dim noisy background. `variant > 0` overlays
/// stripes of period `variant + 1` to tell apart classes sharing a shape.
fn render_shape(spec: &DatasetSpec, shape: Shape, variant: usize, rng: &mut Rng) -> Tensor {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let side = h.min(w) as f64;
    let size = rng.uniform_range(0.22, 0.36) * side;
    let cx = w as f64 / 2.0 + rng.uniform_range(-0.12, 0.12) * side;
    let cy = h as f64 / 2.0 + rng.uniform_range(-0.12, 0.12) * side;
    let background = rng.uniform_range(0.02, 0.12);
    let level = rng.uniform_range(0.55, 0.95);
    let tints: Vec<f64> = (0..ch).map(|_| rng.uniform_range(0.85, 1.0)).collect();
    let mut data = vec![0.0; ch * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / size;
            let dy = (y as f64 + 0.5 - cy) / size;
            let mut inside = shape.covers(dx, dy);
            if inside && variant > 0 {
                inside = (x + y) % (variant + 1) == 0;
            }
            for (c, tint) in tints.iter().enumerate() {
                let base = if inside { level * tint } else { background };
                let v = base + spec.noise * rng.normal();
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![ch, h, w], data).expect("shape")
}

/// Per-channel statistics used to standardise images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Set when a constant channel had its standard deviation clamped to 1.
    pub clamped: bool,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            clamped: false,
        }
    }

    fn map_channels(&self, image: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let ch = self.mean.len();
        let per = image.len() / ch;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / per).min(ch - 1);
            *v = f(*v, self.mean[c], self.std[c]);
        }
        out
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        self.map_channels(image, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, image: &Tensor) -> Tensor {
        self.map_channels(image, |v, m, s| v * s + m)
    }
}

/// Standardises every channel with statistics of `train` alone.
pub fn normalize(train: &Dataset) -> Result<(Dataset, NormStats)> {
    if train.is_empty() {
        return Err(Error::param("cannot normalise an empty training split"));
    }
    let ch = train.spec.channels;
    let mut sum = vec![0.0; ch];
    let mut sum_sq = vec![0.0; ch];
    let mut count = vec![0usize; ch];
    for s in &train.samples {
        let per = s.image.len() / ch;
        for (i, &v) in s.image.data().iter().enumerate() {
            let c = i / per;
            sum[c] += v;
            sum_sq[c] += v * v;
            count[c] += 1;
        }
    }
    let mut stats = NormStats::identity(ch);
    for c in 0..ch {
        let n = count[c] as f64;
        let mean = sum[c] / n;
        let var = (sum_sq[c] / n - mean * mean).max(0.0);
        stats.mean[c] = mean;
        if var.sqrt() <= 1e-12 {
            stats.std[c] = 1.0;
            stats.clamped = true;
        } else {
            stats.std[c] = var.sqrt();
        }
    }
    let normalized = apply_normalization(train, &stats);
    Ok((normalized, stats))
}

pub fn apply_normalization(data: &Dataset, stats: &NormStats) -> Dataset {
    Dataset {
        spec: data.spec.clone(),
        n_classes: data.n_classes,
        samples: data
            .samples
            .iter()
            .map(|s| Sample {
                image: stats.apply(&s.image),
                target: s.target.clone(),
            })
            .collect(),
    }
}

/// Splits into `(train, test)`. Classification data is stratified: each
/// class sends `round(test_fraction · count)` samples to the test side.
pub fn stratified_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::param(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut rng = Rng::stream(seed, 0x5EED_5917);
    let groups: Vec<Vec<usize>> = if data.is_segmentation() {
        vec![(0..data.len()).collect()]
    } else {
        let mut g = vec![Vec::new(); data.n_classes];
        for (i, s) in data.samples.iter().enumerate() {
            if let Some(c) = s.target.class() {
                g[c].push(i);
            }
        }
        g
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in groups {
        rng.shuffle(&mut group);
        let n_test = (group.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

impl Dataset {
    pub fn to_container(&self) -> Result<Container> {
        let n = self.len();
        if n == 0 {
            return Err(Error::param("cannot serialise an empty dataset"));
        }
        let img_shape = self.image_shape();
        let mut images = Vec::with_capacity(n * img_shape.iter().product::<usize>());
        for s in &self.samples {
            images.extend_from_slice(s.image.data());
        }
        let mut shape = vec![n];
        shape.extend(&img_shape);
        let mut entries = vec![("images".to_string(), Tensor::new(shape, images)?)];
        if self.is_segmentation() {
            let mut masks = Vec::new();
            for s in &self.samples {
                let m = s.target.mask().ok_or_else(|| Error::param("mixed targets"))?;
                masks.extend_from_slice(m.data());
            }
            entries.push((
                "masks".into(),
                Tensor::new(vec![n, self.spec.height, self.spec.width], masks)?,
            ));
        } else {
            let labels = self.labels().into_iter().map(|c| c as f64).collect();
            entries.push(("labels".into(), Tensor::new(vec![n], labels)?));
        }
        let meta = serde_json::to_string(&DatasetMeta {
            spec: self.spec.clone(),
            n_classes: self.n_classes,
        })?;
        Ok(Container {
            kind: ContainerKind::Dataset,
            meta,
            entries,
        })
    }

    pub fn from_container(c: &Container) -> Result<Dataset> {
        if c.kind != ContainerKind::Dataset {
            return Err(Error::Format(format!("expected a dataset, found {:?}", c.kind)));
        }
        let meta: DatasetMeta = serde_json::from_str(&c.meta)?;
        let spec = meta.spec;
        let images = c.entry("images")?;
        let img_shape = [spec.channels, spec.height, spec.width];
        if images.rank() != 4 || images.shape()[1..] != img_shape {
            return Err(Error::Format(format!(
                "images have shape {:?}, spec says [n, {img_shape:?}]",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        let per: usize = img_shape.iter().product();
        let image_at = |i: usize| {
            Tensor::new(img_shape.to_vec(), images.data()[i * per..(i + 1) * per].to_vec())
        };
        let mut samples = Vec::with_capacity(n);
        if spec.kind == DatasetKind::Segmentation {
            let masks = c.entry("masks")?;
            if masks.shape() != [n, spec.height, spec.width] {
                return Err(Error::Format("mask tensor does not match images".into()));
            }
            let mper = spec.height * spec.width;
            for i in 0..n {
                let m = masks.data()[i * mper..(i + 1) * mper].to_vec();
                if m.iter().any(|&v| v != 0.0 && v != 1.0 && v != 2.0) {
                    return Err(Error::Format(format!("sample {i}: mask value outside {{0,1,2}}")));
                }
                samples.push(Sample {
                    image: image_at(i)?,
                    target: Target::Mask(Tensor::new(vec![spec.height, spec.width], m)?),
                });
            }
        } else {
            let labels = c.entry("labels")?;
            if labels.shape() != [n] {
                return Err(Error::Format("label tensor does not match images".into()));
            }
            for (i, &l) in labels.data().iter().enumerate() {
                if l < 0.0 || l.fract() != 0.0 || l as usize >= meta.n_classes {
                    return Err(Error::Format(format!("sample {i}: invalid label {l}")));
                }
                samples.push(Sample {
                    image: image_at(i)?,
                    target: Target::Class(l as usize),
                });
            }
        }
        Ok(Dataset {
            spec,
            n_classes: meta.n_classes,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: DatasetSpec,
    n_classes: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_counts_follow_ratio() {
        let d = gen_binary_imbalanced(&DatasetSpec::binary(100, 16, 1)).unwrap();
        assert_eq!(d.class_counts(), vec![80, 20]);
    }

    #[test]
    fn ham_sized_apportionment() {
        let ratio = [8061.0 / 10015.0, 1954.0 / 10015.0];
        assert_eq!(apportion(&ratio, 10015), vec![8061, 1954]);
    }

    #[test]
    fn too_few_samples_for_ratio() {
        let mut spec = DatasetSpec::binary(2, 16, 1);
        spec.class_ratio = vec![0.9, 0.1];
        assert!(matches!(gen_binary_imbalanced(&spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        for spec in [
            DatasetSpec::binary(40, 16, 9),
            DatasetSpec::multiclass(60, 10, 16, 9),
            DatasetSpec::segmentation(6, 32, 9),
        ] {
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
        let a = generate(&DatasetSpec::binary(40, 16, 9)).unwrap();
        let b = generate(&DatasetSpec::binary(40, 16, 10)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_when_exponent_is_zero() {
        let mut spec = DatasetSpec::multiclass(1003, 10, 16, 2);
        spec.zipf_exponent = 0.0;
        let counts = generate(&spec).unwrap().class_counts();
        let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn head_class_matches_zipf_normalisation() {
        let spec = DatasetSpec::multiclass(2000, 10, 16, 3);
        let counts = generate(&spec).unwrap().class_counts();
        // Oracle: plain enumeration of the harmonic-type sum.
        let mut h = 0.0;
        for k in 1..=10 {
            h += (k as f64).powf(-1.5);
        }
        let expected = 2000.0 / h;
        assert!((counts[0] as f64 - expected).abs() <= 1.0, "{} vs {expected}", counts[0]);
        assert_eq!(counts.iter().sum::<usize>(), 2000);
    }

    #[test]
    fn all_classes_present_with_enough_samples() {
        for k in [3, 10, 25] {
            let spec = DatasetSpec::multiclass(10 * k, k, 16, 4);
            assert!(generate(&spec).unwrap().class_counts().iter().all(|&c| c > 0));
        }
    }

    #[test]
    fn multiclass_needs_three_classes() {
        assert!(generate(&DatasetSpec::multiclass(100, 2, 16, 1)).is_err());
    }

    #[test]
    fn tumour_is_tiny_and_inside_organ() {
        let d = generate(&DatasetSpec::segmentation(1000, 32, 5)).unwrap();
        let mut tumour = 0usize;
        for s in &d.samples {
            let m = s.target.mask().unwrap();
            let t = m.data().iter().filter(|&&v| v == 2.0).count();
            assert!(t >= 1);
            tumour += t;
        }
        let frac = tumour as f64 / (1000.0 * 32.0 * 32.0);
        assert!(frac < 0.01, "tumour fraction {frac}");
    }

    #[test]
    fn tumour_lies_within_organ_disk() {
        // Tumour pixels overwrite organ pixels, so check that no tumour
        // pixel borders the background.
        let d = generate(&DatasetSpec::segmentation(200, 32, 6)).unwrap();
        for s in &d.samples {
            let m = s.target.mask().unwrap().data();
            for y in 0..32usize {
                for x in 0..32usize {
                    if m[y * 32 + x] != 2.0 {
                        continue;
                    }
                    for (dx, dy) in [(1i32, 0i32), (-1, 0), (0, 1), (0, -1)] {
                        let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                        assert!((0..32).contains(&nx) && (0..32).contains(&ny));
                        assert_ne!(m[ny as usize * 32 + nx as usize], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn segmentation_needs_32_pixels() {
        assert!(generate(&DatasetSpec::segmentation(4, 16, 1)).is_err());
    }

    #[test]
    fn standardised_data_is_unchanged() {
        let mut d = generate(&DatasetSpec::binary(50, 8, 3)).unwrap();
        let (once, _) = normalize(&d).unwrap();
        d = once.clone();
        let (twice, stats) = normalize(&d).unwrap();
        assert!(stats.mean[0].abs() < 1e-12 && (stats.std[0] - 1.0).abs() < 1e-12);
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!(a.image.max_abs_diff(&b.image).unwrap() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_is_clamped() {
        let mut d = generate(&DatasetSpec::binary(10, 8, 3)).unwrap();
        for s in &mut d.samples {
            s.image = Tensor::filled(s.image.shape(), 0.25);
        }
        let (n, stats) = normalize(&d).unwrap();
        assert!(stats.clamped);
        assert_eq!(stats.std[0], 1.0);
        assert!(n.samples[0].image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalisation_round_trip() {
        let mut spec = DatasetSpec::binary(30, 8, 3);
        spec.channels = 3;
        let d = generate(&spec).unwrap();
        let (n, stats) = normalize(&d).unwrap();
        for (orig, norm) in d.samples.iter().zip(&n.samples) {
            let back = stats.invert(&norm.image);
            assert!(back.max_abs_diff(&orig.image).unwrap() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let d = generate(&DatasetSpec::binary(500, 8, 7)).unwrap();
        let (train, test) = stratified_split(&d, 0.2, 11).unwrap();
        assert_eq!(train.len() + test.len(), 500);
        assert_eq!(test.class_counts(), vec![80, 20]);
        assert_eq!(train.class_counts(), vec![320, 80]);
        for t in &test.samples {
            assert!(!train.samples.contains(t));
        }
        let (train2, _) = stratified_split(&d, 0.2, 11).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        for spec in [DatasetSpec::binary(12, 8, 1), DatasetSpec::segmentation(3, 32, 1)] {
            let d = generate(&spec).unwrap();
            let bytes = d.to_container().unwrap().encode();
            let back = Dataset::from_container(&Container::decode(&bytes).unwrap()).unwrap();
            assert_eq!(back, d);
        }
    }
}
