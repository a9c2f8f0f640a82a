//! Layer stack, parameters and per-sample forward/backward passes.

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerKind};
use crate::error::{Error, Result};
use crate::numerics::{conv2d, conv2d_backward, gaussian, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    MaxPool2,
    Flatten,
    /// `y = g · x / max(‖x‖, eps)` with a learned scalar gain `g`.
    ScaleNorm { eps: f64 },
    /// `y = W x + mean(x)`: a bias-free dense layer whose every output
    /// also receives the mean of its inputs.
    DenseAddMean { input: usize, output: usize },
    Reshape { shape: Vec<usize> },
    /// conv → pool → conv → upsample → concat skip → conv → 1×1 head.
    UNetLite { in_channels: usize, channels: usize, classes: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ScaleNorm { .. } => "scale_norm",
            LayerSpec::DenseAddMean { .. } => "dense_add_mean",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::UNetLite { .. } => "unet_lite",
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |want: &str| {
            Error::dim(format!("{} expects {want}, got input {input:?}", self.name()))
        };
        Ok(match self {
            LayerSpec::Dense { input: i, output: o } | LayerSpec::DenseAddMean { input: i, output: o } => {
                if input != [*i] || *o == 0 {
                    return Err(bad(&format!("[{i}] and a nonzero output")));
                }
                vec![*o]
            }
            LayerSpec::Conv3x3 { in_channels, out_channels } => match input {
                [c, h, w] if c == in_channels && *out_channels > 0 => vec![*out_channels, *h, *w],
                _ => return Err(bad(&format!("[{in_channels}, H, W]"))),
            },
            LayerSpec::Relu => input.to_vec(),
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => vec![*c, h / 2, w / 2],
                _ => return Err(bad("[C, H>=2, W>=2]")),
            },
            LayerSpec::Flatten => vec![input.iter().product()],
            LayerSpec::ScaleNorm { eps } => {
                if !(*eps > 0.0) {
                    return Err(Error::param(format!("scale_norm eps must be > 0, got {eps}")));
                }
                input.to_vec()
            }
            LayerSpec::Reshape { shape } => {
                if shape.is_empty()
                    || shape.contains(&0)
                    || shape.iter().product::<usize>() != input.iter().product::<usize>()
                {
                    return Err(bad(&format!("{} elements for shape {shape:?}", shape.iter().product::<usize>())));
                }
                shape.clone()
            }
            LayerSpec::UNetLite { in_channels, channels, classes } => match input {
                [c, h, w] if c == in_channels && h % 2 == 0 && w % 2 == 0 && *channels > 0 && *classes >= 2 => {
                    vec![*classes, *h, *w]
                }
                _ => return Err(bad(&format!("[{in_channels}, even H, even W]"))),
            },
        })
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input, output } => vec![vec![output, input], vec![output]],
            LayerSpec::DenseAddMean { input, output } => vec![vec![output, input]],
            LayerSpec::Conv3x3 { in_channels, out_channels } => {
                vec![vec![out_channels, in_channels, 3, 3], vec![out_channels]]
            }
            LayerSpec::ScaleNorm { .. } => vec![vec![1]],
            LayerSpec::UNetLite { in_channels, channels: c, classes } => vec![
                vec![c, in_channels, 3, 3],
                vec![c],
                vec![2 * c, c, 3, 3],
                vec![2 * c],
                vec![c, 3 * c, 3, 3],
                vec![c],
                vec![classes, c, 1, 1],
                vec![classes],
            ],
            LayerSpec::Relu | LayerSpec::MaxPool2 | LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                Vec::new()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Segmentation { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// `flatten → (dense → relu)* → dense`.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        let mut width = input_shape.iter().product();
        for &h in hidden {
            layers.push(LayerSpec::Dense { input: width, output: h });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense { input: width, output: classes });
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    /// Two conv/pool stages, a flattening ScaleNorm and a dense head.
    pub fn cnn(input_shape: &[usize], channels: usize, classes: usize) -> Self {
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers: vec![
                LayerSpec::Conv3x3 { in_channels: c, out_channels: channels },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv3x3 { in_channels: channels, out_channels: channels },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::ScaleNorm { eps: 1e-6 },
                LayerSpec::Dense { input: channels * (h / 4) * (w / 4), output: classes },
            ],
        }
    }

    pub fn unet_lite(input_shape: &[usize], channels: usize, classes: usize) -> Self {
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers: vec![LayerSpec::UNetLite {
                in_channels: input_shape[0],
                channels,
                classes,
            }],
        }
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::dim(format!("invalid input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::param("model has no layers"));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("nonempty"))
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("nonempty"))
    }

    pub fn task(&self) -> Result<Task> {
        match self.output_shape()?.as_slice() {
            &[k] if k >= 2 => Ok(Task::Classification { classes: k }),
            &[k, _, _] if k >= 2 => Ok(Task::Segmentation { classes: k }),
            other => Err(Error::dim(format!(
                "output head must be [classes>=2] or [classes>=2, H, W], got {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task().map(|_| ())
    }

    pub fn param_shapes(&self) -> Vec<Vec<Vec<usize>>> {
        self.layers.iter().map(LayerSpec::param_shapes).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .flatten()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// One tensor list per layer; used for weights and for gradients alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Vec<Tensor>>,
}

impl ParamSet {
    pub fn zeros(shapes: &[Vec<Vec<usize>>]) -> Self {
        ParamSet {
            layers: shapes
                .iter()
                .map(|l| l.iter().map(|s| Tensor::zeros(s)).collect())
                .collect(),
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        ParamSet {
            layers: other
                .layers
                .iter()
                .map(|l| l.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flatten()
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors().map(Tensor::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.tensors_mut().for_each(|t| t.scale_in_place(factor));
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            if alpha == 1.0 {
                a.add_assign(b)?;
            } else {
                a.axpy(alpha, b)?;
            }
        }
        Ok(())
    }

    pub fn contains_non_finite(&self) -> bool {
        self.tensors().any(Tensor::contains_non_finite)
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_same(other)?;
        let mut m: f64 = 0.0;
        for (a, b) in self.tensors().zip(other.tensors()) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn check_same(&self, other: &ParamSet) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape()));
        if same {
            Ok(())
        } else {
            Err(Error::dim("parameter sets have different layouts"))
        }
    }
}

/// Per-layer intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<Tensor>,
    extras: Vec<LayerExtra>,
}

#[derive(Debug, Clone)]
enum LayerExtra {
    None,
    Argmax(Vec<usize>),
    UNet(Box<UNetCache>),
}

#[derive(Debug, Clone)]
struct UNetCache {
    a1: Tensor,
    e1: Tensor,
    pool_idx: Vec<usize>,
    p: Tensor,
    a2: Tensor,
    cat: Tensor,
    a3: Tensor,
    d: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub seed: u64,
}

impl Model {
    /// He-normal weights, zero biases, ScaleNorm gains at `sqrt(d)`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Model> {
        let shapes = spec.shapes()?;
        spec.validate()?;
        let mut rng = Rng::stream(seed, 0x1417);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut tensors = Vec::new();
            for shape in layer.param_shapes() {
                let t = match (layer, shape.len()) {
                    (LayerSpec::ScaleNorm { .. }, _) => {
                        let d: usize = shapes[i].iter().product();
                        Tensor::filled(&shape, (d as f64).sqrt())
                    }
                    (_, 1) => Tensor::zeros(&shape),
                    _ => {
                        let fan_in: usize = shape[1..].iter().product();
                        gaussian(&mut rng, &shape, (2.0 / fan_in as f64).sqrt())?
                    }
                };
                tensors.push(t);
            }
            layers.push(tensors);
        }
        Ok(Model {
            spec: spec.clone(),
            params: ParamSet { layers },
            seed,
        })
    }

    pub fn from_params(spec: &ModelSpec, params: ParamSet, seed: u64) -> Result<Model> {
        spec.shapes()?;
        let expected = ParamSet::zeros(&spec.param_shapes());
        expected.check_same(&params)?;
        Ok(Model {
            spec: spec.clone(),
            params,
            seed,
        })
    }

    pub fn task(&self) -> Result<Task> {
        self.spec.task()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        if x.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "input shape {:?}, model expects {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.spec.layers.len()),
            extras: Vec::with_capacity(self.spec.layers.len()),
        };
        let mut h = x.clone();
        for (i, (layer, p)) in self.spec.layers.iter().zip(&self.params.layers).enumerate() {
            let (out, extra) = layer_forward(layer, p, &h)?;
            if out.contains_non_finite() {
                return Err(Error::training(
                    format!("layer {i} ({})", layer.name()),
                    "non-finite activation",
                ));
            }
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.extras.push(extra);
        }
        Ok((h, cache))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(ParamSet, Tensor)> {
        let mut grads = Vec::with_capacity(self.spec.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.spec.layers.len()).rev() {
            let (pg, gin) = layer_backward(
                &self.spec.layers[i],
                &self.params.layers[i],
                &cache.inputs[i],
                &cache.extras[i],
                &g,
            )?;
            grads.push(pg);
            g = gin;
        }
        grads.reverse();
        Ok((ParamSet { layers: grads }, g))
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_string(&ModelMeta {
            spec: self.spec.clone(),
            seed: self.seed,
        })?;
        let mut c = Container::new(ContainerKind::Model, meta);
        for (i, layer) in self.params.layers.iter().enumerate() {
            for (j, t) in layer.iter().enumerate() {
                c.push(format!("layer{i}.{j}"), t.clone());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Model> {
        if c.kind != ContainerKind::Model {
            return Err(Error::Format(format!("expected a model, found {:?}", c.kind)));
        }
        let meta: ModelMeta = serde_json::from_str(&c.meta)?;
        let shapes = meta.spec.param_shapes();
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, layer) in shapes.iter().enumerate() {
            let mut tensors = Vec::new();
            for (j, shape) in layer.iter().enumerate() {
                let t = c.entry(&format!("layer{i}.{j}"))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "layer{i}.{j} has shape {:?}, spec needs {shape:?}",
                        t.shape()
                    )));
                }
                tensors.push(t.clone());
            }
            layers.push(tensors);
        }
        if c.entries.len() != shapes.iter().map(Vec::len).sum::<usize>() {
            return Err(Error::Format("model file has unexpected extra entries".into()));
        }
        Model::from_params(&meta.spec, ParamSet { layers }, meta.seed)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    spec: ModelSpec,
    seed: u64,
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn relu_backward(pre: &Tensor, g: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &gv)| if p > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (ch * h + 2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                out.push(d[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).expect("shape"), idx)
}

fn maxpool2_backward(input_shape: &[usize], idx: &[usize], g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&j, &gv) in idx.iter().zip(g.data()) {
        dx.data_mut()[j] += gv;
    }
    dx
}

fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, 2 * h, 2 * w], out).expect("shape")
}

fn upsample2_backward(g: &Tensor) -> Tensor {
    let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * h2 + y) * w2 + xx];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("shape")
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("shape")
}

fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let cut = first * h * w;
    (
        Tensor::new(vec![first, h, w], t.data()[..cut].to_vec()).expect("shape"),
        Tensor::new(vec![c - first, h, w], t.data()[cut..].to_vec()).expect("shape"),
    )
}

fn dense_forward(p: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let mut y = p[0].matvec(x.data())?;
    for (v, b) in y.iter_mut().zip(p[1].data()) {
        *v += b;
    }
    Ok(Tensor::vector(y))
}

fn dense_backward(p: &[Tensor], x: &Tensor, g: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    let (out, inp) = (p[0].shape()[0], p[0].shape()[1]);
    let mut dw = vec![0.0; out * inp];
    for (o, &gv) in g.data().iter().enumerate() {
        if gv != 0.0 {
            for (d, &xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(x.data()) {
                *d = gv * xv;
            }
        }
    }
    let dx = p[0].matvec_transposed(g.data())?;
    Ok((
        vec![Tensor::new(vec![out, inp], dw)?, g.clone()],
        Tensor::vector(dx),
    ))
}

fn layer_forward(layer: &LayerSpec, p: &[Tensor], x: &Tensor) -> Result<(Tensor, LayerExtra)> {
    let out = match layer {
        LayerSpec::Dense { .. } => dense_forward(p, x)?,
        LayerSpec::DenseAddMean { .. } => {
            let m = x.mean();
            Tensor::vector(p[0].matvec(x.data())?).map(|v| v + m)
        }
        LayerSpec::Conv3x3 { .. } => conv2d(x, &p[0], &p[1])?,
        LayerSpec::Relu => relu(x),
        LayerSpec::MaxPool2 => {
            let (y, idx) = maxpool2(x);
            return Ok((y, LayerExtra::Argmax(idx)));
        }
        LayerSpec::Flatten => x.clone().reshape(&[x.len()])?,
        LayerSpec::Reshape { shape } => x.clone().reshape(shape)?,
        LayerSpec::ScaleNorm { eps } => {
            let n = x.norm().max(*eps);
            x.scale(p[0].data()[0] / n)
        }
        LayerSpec::UNetLite { .. } => {
            let a1 = conv2d(x, &p[0], &p[1])?;
            let e1 = relu(&a1);
            let (pooled, pool_idx) = maxpool2(&e1);
            let a2 = conv2d(&pooled, &p[2], &p[3])?;
            let m = relu(&a2);
            let cat = concat_channels(&upsample2(&m), &e1);
            let a3 = conv2d(&cat, &p[4], &p[5])?;
            let d = relu(&a3);
            let out = conv2d(&d, &p[6], &p[7])?;
            let cache = UNetCache {
                a1,
                e1,
                pool_idx,
                p: pooled,
                a2,
                cat,
                a3,
                d,
            };
            return Ok((out, LayerExtra::UNet(Box::new(cache))));
        }
    };
    Ok((out, LayerExtra::None))
}

fn layer_backward(
    layer: &LayerSpec,
    p: &[Tensor],
    x: &Tensor,
    extra: &LayerExtra,
    g: &Tensor,
) -> Result<(Vec<Tensor>, Tensor)> {
    Ok(match (layer, extra) {
        (LayerSpec::Dense { .. }, _) => dense_backward(p, x, g)?,
        (LayerSpec::DenseAddMean { .. }, _) => {
            let (mut pg, dx) = dense_backward(p, x, g)?;
            pg.truncate(1);
            let shift = g.sum() / x.len() as f64;
            (pg, dx.map(|v| v + shift))
        }
        (LayerSpec::Conv3x3 { .. }, _) => {
            let (dx, dw, db) = conv2d_backward(x, &p[0], g)?;
            (vec![dw, db], dx)
        }
        (LayerSpec::Relu, _) => (Vec::new(), relu_backward(x, g)),
        (LayerSpec::MaxPool2, LayerExtra::Argmax(idx)) => {
            (Vec::new(), maxpool2_backward(x.shape(), idx, g))
        }
        (LayerSpec::Flatten | LayerSpec::Reshape { .. }, _) => {
            (Vec::new(), g.clone().reshape(x.shape())?)
        }
        (LayerSpec::ScaleNorm { eps }, _) => {
            let gain = p[0].data()[0];
            let raw = x.norm();
            let xg = x.dot(g)?;
            if raw > *eps {
                let dx_data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gain / raw * (gv - xv * xg / (raw * raw)))
                    .collect();
                (
                    vec![Tensor::vector(vec![xg / raw])],
                    Tensor::new(x.shape().to_vec(), dx_data)?,
                )
            } else {
                (vec![Tensor::vector(vec![xg / eps])], g.scale(gain / eps))
            }
        }
        (LayerSpec::UNetLite { channels, .. }, LayerExtra::UNet(c)) => {
            let (dd, dw4, db4) = conv2d_backward(&c.d, &p[6], g)?;
            let da3 = relu_backward(&c.a3, &dd);
            let (dcat, dw3, db3) = conv2d_backward(&c.cat, &p[4], &da3)?;
            let (du, de1_skip) = split_channels(&dcat, 2 * channels);
            let dm = upsample2_backward(&du);
            let da2 = relu_backward(&c.a2, &dm);
            let (dp, dw2, db2) = conv2d_backward(&c.p, &p[2], &da2)?;
            let mut de1 = maxpool2_backward(c.e1.shape(), &c.pool_idx, &dp);
            de1.add_assign(&de1_skip)?;
            let da1 = relu_backward(&c.a1, &de1);
            let (dx, dw1, db1) = conv2d_backward(x, &p[0], &da1)?;
            (vec![dw1, db1, dw2, db2, dw3, db3, dw4, db4], dx)
        }
        _ => unreachable!("forward cache does not match layer"),
    })
}
