//! Small differentiable image classifiers with exact input gradients.
//!
//! Activations are batch-major `(B, H·W·C)` matrices in NHWC order, so a
//! 3x3 same-padded convolution is an im2col GEMM whose output is already in
//! the next layer's layout.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{BinReader, BinWriter};
use crate::rng;

const MODEL_MAGIC: &[u8; 8] = b"ERDMODEL";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// 2 x [conv 3x3 + ReLU + 2x2 max-pool] -> dense -> K
    Conv,
    /// dense 256 -> ReLU -> dense 128 -> ReLU -> dense K
    Mlp,
    /// Any other layer stack (tests, hand-built models).
    Custom,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Conv => "conv",
            Architecture::Mlp => "mlp",
            Architecture::Custom => "custom",
        }
    }

    fn id(self) -> u8 {
        match self {
            Architecture::Conv => 1,
            Architecture::Mlp => 2,
            Architecture::Custom => 0,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Architecture::Conv),
            2 => Some(Architecture::Mlp),
            0 => Some(Architecture::Custom),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Architecture::Conv),
            "mlp" => Ok(Architecture::Mlp),
            other => Err(Error::Unknown {
                kind: "architecture",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Same-padded 3x3 convolution. `weight` is `(in_channels·9, out_channels)`
    /// with rows ordered `(ky, kx, in_channel)`.
    Conv3x3 {
        height: usize,
        width: usize,
        in_channels: usize,
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Relu,
    /// 2x2, stride 2.
    MaxPool2 {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// `weight` is `(inputs, outputs)`.
    Dense { weight: Array2<f64>, bias: Array1<f64> },
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias } => weight.len() + bias.len(),
            _ => 0,
        }
    }
}

enum Cache {
    Conv { cols: Array2<f64> },
    Relu { output: Array2<f64> },
    Pool { argmax: Vec<usize>, input_width: usize },
    Dense { input: Array2<f64> },
}

/// Gradients for one parameterized layer.
struct ParamGrad {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Softmax output together with the logits that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ProbVector {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        Self {
            probs: softmax(&logits),
            logits,
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `softmax(z)_i = exp(z_i - max z) / sum_j exp(z_j - max z)`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A scalar function of the logits whose input gradient is requested.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarSpec {
    /// `z_i`
    Logit(usize),
    /// `z_plus - z_minus`
    LogitDifference { plus: usize, minus: usize },
    /// `-log softmax(z)_label`
    CrossEntropy(usize),
    /// `sum_i w_i z_i`
    Weighted(Vec<f64>),
}

impl ScalarSpec {
    /// Value and derivative with respect to the logits.
    pub fn evaluate(&self, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
        let k = logits.len();
        let check = |i: usize| {
            if i < k {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("class {i} out of range for {k} logits")))
            }
        };
        let mut d = vec![0.0; k];
        let value = match self {
            ScalarSpec::Logit(i) => {
                check(*i)?;
                d[*i] = 1.0;
                logits[*i]
            }
            ScalarSpec::LogitDifference { plus, minus } => {
                check(*plus)?;
                check(*minus)?;
                d[*plus] += 1.0;
                d[*minus] -= 1.0;
                logits[*plus] - logits[*minus]
            }
            ScalarSpec::CrossEntropy(label) => {
                check(*label)?;
                let p = softmax(logits);
                for (di, pi) in d.iter_mut().zip(&p) {
                    *di = *pi;
                }
                d[*label] -= 1.0;
                -p[*label].max(f64::MIN_POSITIVE).ln()
            }
            ScalarSpec::Weighted(w) => {
                if w.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        actual: w.len(),
                    });
                }
                d.copy_from_slice(w);
                w.iter().zip(logits).map(|(a, b)| a * b).sum()
            }
        };
        Ok((value, d))
    }
}

/// Result of an input-gradient query.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub value: f64,
    pub logits: Vec<f64>,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    architecture: Architecture,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    layers: Vec<Layer>,
}

impl Model {
    /// Builds a model from an explicit layer stack, checking that shapes chain.
    pub fn from_layers(
        architecture: Architecture,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let (h, w, c) = input_shape;
        let mut width = h * w * c;
        for (i, layer) in layers.iter().enumerate() {
            width = match layer {
                Layer::Conv3x3 {
                    height,
                    width: lw,
                    in_channels,
                    weight,
                    bias,
                } => {
                    if height * lw * in_channels != width || weight.nrows() != in_channels * 9 {
                        return Err(layer_mismatch(i, width));
                    }
                    if bias.len() != weight.ncols() {
                        return Err(layer_mismatch(i, width));
                    }
                    height * lw * weight.ncols()
                }
                Layer::Relu => width,
                Layer::MaxPool2 {
                    height,
                    width: lw,
                    channels,
                } => {
                    if height * lw * channels != width || height % 2 != 0 || lw % 2 != 0 {
                        return Err(layer_mismatch(i, width));
                    }
                    width / 4
                }
                Layer::Dense { weight, bias } => {
                    if weight.nrows() != width || bias.len() != weight.ncols() {
                        return Err(layer_mismatch(i, width));
                    }
                    weight.ncols()
                }
            };
        }
        if width != num_classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{num_classes} logits"),
                actual: format!("{width} outputs"),
            });
        }
        Ok(Self {
            architecture,
            input_shape,
            num_classes,
            layers,
        })
    }

    /// Randomly initialized (He normal) model of a shipped architecture.
    pub fn init<R: Rng>(
        architecture: Architecture,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, w, c) = input_shape;
        let layers = match architecture {
            Architecture::Conv => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::InvalidArgument(
                        "conv architecture needs height and width divisible by 4".into(),
                    ));
                }
                let (c1, c2) = (8, 16);
                vec![
                    conv_layer(h, w, c, c1, rng),
                    Layer::Relu,
                    Layer::MaxPool2 {
                        height: h,
                        width: w,
                        channels: c1,
                    },
                    conv_layer(h / 2, w / 2, c1, c2, rng),
                    Layer::Relu,
                    Layer::MaxPool2 {
                        height: h / 2,
                        width: w / 2,
                        channels: c2,
                    },
                    dense_layer((h / 4) * (w / 4) * c2, num_classes, rng),
                ]
            }
            Architecture::Mlp => vec![
                dense_layer(h * w * c, 256, rng),
                Layer::Relu,
                dense_layer(256, 128, rng),
                Layer::Relu,
                dense_layer(128, num_classes, rng),
            ],
            Architecture::Custom => {
                return Err(Error::InvalidArgument(
                    "custom architectures are built with Model::from_layers".into(),
                ));
            }
        };
        Self::from_layers(architecture, input_shape, num_classes, layers)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias } => {
                weight.iter().chain(bias.iter()).all(|v| v.is_finite())
            }
            _ => true,
        })
    }

    /// Copy with every parameter multiplied by `factor` (0 gives a constant model).
    pub fn scaled(&self, factor: f64) -> Model {
        let mut m = self.clone();
        for l in &mut m.layers {
            if let Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias } = l {
                weight.mapv_inplace(|v| v * factor);
                bias.mapv_inplace(|v| v * factor);
            }
        }
        m
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.input_shape),
                actual: format!("{:?}", image.shape()),
            });
        }
        Ok(())
    }

    fn check_raw(&self, pixels: &[f64]) -> Result<()> {
        if pixels.len() != self.input_len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_len(),
                actual: pixels.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<ProbVector> {
        self.check_image(image)?;
        Ok(ProbVector::from_logits(self.logits_raw(image.pixels())?))
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(self.forward(image)?.argmax())
    }

    /// Batched forward pass; one `ProbVector` per image, in order.
    pub fn forward_batch(&self, images: &[&Image]) -> Result<Vec<ProbVector>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.input_len();
        let mut x = Array2::zeros((images.len(), d));
        for (mut row, img) in x.axis_iter_mut(Axis(0)).zip(images) {
            self.check_image(img)?;
            row.assign(&ndarray::ArrayView1::from(img.pixels()));
        }
        let (logits, _) = self.run(x, false);
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| ProbVector::from_logits(row.to_vec()))
            .collect())
    }

    /// Logits for a raw pixel vector (any real values; not clamped).
    pub fn logits_raw(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        self.check_raw(pixels)?;
        let x = Array2::from_shape_vec((1, pixels.len()), pixels.to_vec()).expect("row vector");
        let (logits, _) = self.run(x, false);
        Ok(logits.row(0).to_vec())
    }

    /// Exact reverse-mode gradient of `spec(logits(image))` with respect to
    /// every input scalar.
    pub fn input_gradient(&self, image: &Image, spec: &ScalarSpec) -> Result<InputGradient> {
        self.check_image(image)?;
        self.input_gradient_raw(image.pixels(), spec)
    }

    pub fn input_gradient_raw(&self, pixels: &[f64], spec: &ScalarSpec) -> Result<InputGradient> {
        self.check_raw(pixels)?;
        let x = Array2::from_shape_vec((1, pixels.len()), pixels.to_vec()).expect("row vector");
        let (logits, caches) = self.run(x, true);
        let logits = logits.row(0).to_vec();
        let (value, dlogits) = spec.evaluate(&logits)?;
        let d = Array2::from_shape_vec((1, dlogits.len()), dlogits).expect("row vector");
        let (dx, _) = self.backward(d, &caches, false);
        Ok(InputGradient {
            value,
            logits,
            gradient: dx.row(0).to_vec(),
        })
    }

    /// Logits plus the input gradient of each requested logit, sharing one
    /// forward pass.
    pub fn logit_jacobian(&self, pixels: &[f64], classes: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_raw(pixels)?;
        let x = Array2::from_shape_vec((1, pixels.len()), pixels.to_vec()).expect("row vector");
        let (logits, caches) = self.run(x, true);
        let mut rows = Vec::with_capacity(classes.len());
        for &class in classes {
            if class >= self.num_classes {
                return Err(Error::InvalidArgument(format!("class {class} out of range")));
            }
            let mut d = Array2::zeros((1, self.num_classes));
            d[[0, class]] = 1.0;
            let (dx, _) = self.backward(d, &caches, false);
            rows.push(dx.row(0).to_vec());
        }
        Ok((logits.row(0).to_vec(), rows))
    }

    /// ReLU on/off states and pool selections at `pixels`; two inputs with
    /// equal signatures lie in the same linear piece of the network.
    pub fn activation_signature(&self, pixels: &[f64]) -> Result<Vec<usize>> {
        self.check_raw(pixels)?;
        let x = Array2::from_shape_vec((1, pixels.len()), pixels.to_vec()).expect("row vector");
        let (_, caches) = self.run(x, true);
        let mut sig = Vec::new();
        for cache in &caches {
            match cache {
                Cache::Relu { output } => sig.extend(output.iter().map(|&v| usize::from(v > 0.0))),
                Cache::Pool { argmax, .. } => sig.extend(argmax.iter().copied()),
                _ => {}
            }
        }
        Ok(sig)
    }

    fn run(&self, mut x: Array2<f64>, keep_cache: bool) -> (Array2<f64>, Vec<Cache>) {
        let mut caches = Vec::with_capacity(if keep_cache { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (out, cache) = forward_layer(layer, x, keep_cache);
            if let Some(c) = cache {
                caches.push(c);
            }
            x = out;
        }
        (x, caches)
    }

    fn backward(&self, mut d: Array2<f64>, caches: &[Cache], want_params: bool) -> (Array2<f64>, Vec<Option<ParamGrad>>) {
        let mut grads: Vec<Option<ParamGrad>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (dx, g) = backward_layer(layer, cache, d, want_params);
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        (d, grads)
    }

    pub fn save(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut w = BinWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.string(provenance);
        w.u8(self.architecture.id());
        let (h, wd, c) = self.input_shape;
        w.u32(h as u32);
        w.u32(wd as u32);
        w.u32(c as u32);
        w.u32(self.num_classes as u32);
        w.u32(self.layers.len() as u32);
        for layer in &self.layers {
            match layer {
                Layer::Conv3x3 {
                    height,
                    width,
                    in_channels,
                    weight,
                    bias,
                } => {
                    w.u8(1);
                    w.u32(*height as u32);
                    w.u32(*width as u32);
                    w.u32(*in_channels as u32);
                    w.u32(weight.ncols() as u32);
                    w.f64s(weight.iter());
                    w.f64s(bias.iter());
                }
                Layer::Relu => w.u8(2),
                Layer::MaxPool2 {
                    height,
                    width,
                    channels,
                } => {
                    w.u8(3);
                    w.u32(*height as u32);
                    w.u32(*width as u32);
                    w.u32(*channels as u32);
                }
                Layer::Dense { weight, bias } => {
                    w.u8(4);
                    w.u32(weight.nrows() as u32);
                    w.u32(weight.ncols() as u32);
                    w.f64s(weight.iter());
                    w.f64s(bias.iter());
                }
            }
        }
        crate::io::write_atomic(path, &w.into_inner())
    }

    /// Loads a model file, returning it with its provenance string.
    pub fn load(path: &Path) -> Result<(Model, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = BinReader::new(&bytes, path);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let provenance = r.string()?;
        let arch_id = r.u8()?;
        let architecture =
            Architecture::from_id(arch_id).ok_or_else(|| r.malformed(format!("architecture id {arch_id}")))?;
        let h = r.u32()? as usize;
        let wd = r.u32()? as usize;
        let c = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = match r.u8()? {
                1 => {
                    let height = r.u32()? as usize;
                    let width = r.u32()? as usize;
                    let in_channels = r.u32()? as usize;
                    let out = r.u32()? as usize;
                    let weight = r.matrix(in_channels * 9, out)?;
                    let bias = r.vector(out)?;
                    Layer::Conv3x3 {
                        height,
                        width,
                        in_channels,
                        weight,
                        bias,
                    }
                }
                2 => Layer::Relu,
                3 => Layer::MaxPool2 {
                    height: r.u32()? as usize,
                    width: r.u32()? as usize,
                    channels: r.u32()? as usize,
                },
                4 => {
                    let rows = r.u32()? as usize;
                    let cols = r.u32()? as usize;
                    let weight = r.matrix(rows, cols)?;
                    let bias = r.vector(cols)?;
                    Layer::Dense { weight, bias }
                }
                tag => return Err(r.malformed(format!("unknown layer tag {tag}"))),
            };
            layers.push(layer);
        }
        r.expect_end()?;
        let model = Model::from_layers(architecture, (h, wd, c), k, layers)
            .map_err(|e| r.malformed(e.to_string()))?;
        Ok((model, provenance))
    }
}

fn layer_mismatch(index: usize, width: usize) -> Error {
    Error::ShapeMismatch {
        expected: format!("layer {index} to accept {width} inputs"),
        actual: "incompatible layer shape".into(),
    }
}

fn conv_layer<R: Rng>(h: usize, w: usize, cin: usize, cout: usize, rng: &mut R) -> Layer {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Layer::Conv3x3 {
        height: h,
        width: w,
        in_channels: cin,
        weight: Array2::from_shape_fn((cin * 9, cout), |_| normal.sample(rng)),
        bias: Array1::zeros(cout),
    }
}

fn dense_layer<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Layer {
    let std = (2.0 / inputs as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Layer::Dense {
        weight: Array2::from_shape_fn((inputs, outputs), |_| normal.sample(rng)),
        bias: Array1::zeros(outputs),
    }
}

fn forward_layer(layer: &Layer, x: Array2<f64>, keep: bool) -> (Array2<f64>, Option<Cache>) {
    let batch = x.nrows();
    match layer {
        Layer::Conv3x3 {
            height,
            width,
            in_channels,
            weight,
            bias,
        } => {
            let cols = im2col(&x, *height, *width, *in_channels);
            let mut out = cols.dot(weight);
            out += bias;
            let out = out
                .into_shape_with_order((batch, height * width * weight.ncols()))
                .expect("contiguous conv output");
            (out, keep.then_some(Cache::Conv { cols }))
        }
        Layer::Relu => {
            let out = x.mapv_into(|v| v.max(0.0));
            let cache = keep.then(|| Cache::Relu { output: out.clone() });
            (out, cache)
        }
        Layer::MaxPool2 {
            height,
            width,
            channels,
        } => {
            let (oh, ow, c) = (height / 2, width / 2, *channels);
            let mut out = Array2::zeros((batch, oh * ow * c));
            let mut argmax = Vec::with_capacity(if keep { batch * oh * ow * c } else { 0 });
            for (b, row) in x.axis_iter(Axis(0)).enumerate() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best_i = ((2 * oy) * width + 2 * ox) * c + ch;
                            let mut best = row[best_i];
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let i = ((2 * oy + dy) * width + 2 * ox + dx) * c + ch;
                                if row[i] > best {
                                    best = row[i];
                                    best_i = i;
                                }
                            }
                            out[[b, (oy * ow + ox) * c + ch]] = best;
                            if keep {
                                argmax.push(best_i);
                            }
                        }
                    }
                }
            }
            let cache = keep.then_some(Cache::Pool {
                argmax,
                input_width: height * width * c,
            });
            (out, cache)
        }
        Layer::Dense { weight, bias } => {
            let mut out = x.dot(weight);
            out += bias;
            (out, keep.then_some(Cache::Dense { input: x }))
        }
    }
}

fn backward_layer(layer: &Layer, cache: &Cache, d: Array2<f64>, want_params: bool) -> (Array2<f64>, Option<ParamGrad>) {
    let batch = d.nrows();
    match (layer, cache) {
        (
            Layer::Conv3x3 {
                height,
                width,
                in_channels,
                weight,
                ..
            },
            Cache::Conv { cols },
        ) => {
            let d2 = d
                .into_shape_with_order((batch * height * width, weight.ncols()))
                .expect("contiguous conv gradient");
            let grad = want_params.then(|| ParamGrad {
                weight: cols.t().dot(&d2),
                bias: d2.sum_axis(Axis(0)),
            });
            let dcols = d2.dot(&weight.t());
            (col2im(&dcols, batch, *height, *width, *in_channels), grad)
        }
        (Layer::Relu, Cache::Relu { output }) => {
            let mut dx = d;
            ndarray::Zip::from(&mut dx).and(output).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            (dx, None)
        }
        (Layer::MaxPool2 { .. }, Cache::Pool { argmax, input_width }) => {
            let per_row = d.ncols();
            let mut dx = Array2::zeros((batch, *input_width));
            for (b, row) in d.axis_iter(Axis(0)).enumerate() {
                for (j, &g) in row.iter().enumerate() {
                    dx[[b, argmax[b * per_row + j]]] += g;
                }
            }
            (dx, None)
        }
        (Layer::Dense { weight, .. }, Cache::Dense { input }) => {
            let grad = want_params.then(|| ParamGrad {
                weight: input.t().dot(&d),
                bias: d.sum_axis(Axis(0)),
            });
            (d.dot(&weight.t()), grad)
        }
        _ => unreachable!("cache does not match layer"),
    }
}

fn im2col(x: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let batch = x.nrows();
    let mut cols = Array2::zeros((batch * h * w, c * 9));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let row_len = c * 9;
    let img_len = h * w * c;
    for b in 0..batch {
        let img = &xs[b * img_len..(b + 1) * img_len];
        for y in 0..h {
            for xx in 0..w {
                let out_row = &mut cs[((b * h + y) * w + xx) * row_len..][..row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((sy as usize) * w + sx as usize) * c;
                        let dst = (ky * 3 + kx) * c;
                        out_row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, batch: usize, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((batch, h * w * c));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let row_len = c * 9;
    let img_len = h * w * c;
    for b in 0..batch {
        let img = &mut xs[b * img_len..(b + 1) * img_len];
        for y in 0..h {
            for xx in 0..w {
                let in_row = &ds[((b * h + y) * w + xx) * row_len..][..row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((sy as usize) * w + sx as usize) * c;
                        let src = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            img[dst + ch] += in_row[src + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mini-batch SGD with momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults tuned per architecture; the MLP needs a smaller step and more epochs.
    pub fn for_architecture(architecture: Architecture) -> Self {
        let (epochs, learning_rate) = match architecture {
            Architecture::Mlp => (100, 0.005),
            _ => (20, 0.02),
        };
        Self {
            architecture,
            epochs,
            batch_size: 32,
            learning_rate,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_architecture(Architecture::Conv)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

pub fn train_model(train: &LabeledDataset, config: &TrainConfig, test: Option<&LabeledDataset>) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    let shape = train.images[0].shape();
    let mut init_rng = rng::stream(config.seed, "model-init", 0);
    let mut model = Model::init(config.architecture, shape, train.num_classes, &mut init_rng)?;
    let mut velocity: Vec<Option<ParamGrad>> = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias } => Some(ParamGrad {
                weight: Array2::zeros(weight.raw_dim()),
                bias: Array1::zeros(bias.len()),
            }),
            _ => None,
        })
        .collect();

    let d = model.input_len();
    let k = model.num_classes;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, "model-shuffle", epoch as u64));
        // linear decay to 10% of the base rate
        let lr = config.learning_rate * (1.0 - 0.9 * epoch as f64 / config.epochs as f64);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut x = Array2::zeros((chunk.len(), d));
            for (mut row, &i) in x.axis_iter_mut(Axis(0)).zip(chunk) {
                let img = &train.images[i];
                model.check_image(img)?;
                row.assign(&ndarray::ArrayView1::from(img.pixels()));
            }
            let (logits, caches) = model.run(x, true);
            let mut dlogits = Array2::zeros((chunk.len(), k));
            let mut batch_loss = 0.0;
            for (b, &i) in chunk.iter().enumerate() {
                let p = softmax(logits.row(b).as_slice().expect("row"));
                let label = train.labels[i];
                batch_loss -= p[label].max(f64::MIN_POSITIVE).ln();
                for c in 0..k {
                    dlogits[[b, c]] = (p[c] - if c == label { 1.0 } else { 0.0 }) / chunk.len() as f64;
                }
            }
            let batch_loss = batch_loss / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            let (_, grads) = model.backward(dlogits, &caches, true);
            for ((layer, grad), vel) in model.layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                if let (Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias }, Some(g), Some(v)) =
                    (layer, grad, vel.as_mut())
                {
                    let wd = config.weight_decay;
                    let mu = config.momentum;
                    ndarray::Zip::from(&mut v.weight)
                        .and(&g.weight)
                        .and(&*weight)
                        .for_each(|v, &g, &w| *v = mu * *v - lr * (g + wd * w));
                    ndarray::Zip::from(&mut v.bias)
                        .and(&g.bias)
                        .for_each(|v, &g| *v = mu * *v - lr * g);
                    *weight += &v.weight;
                    *bias += &v.bias;
                }
            }
        }
        let epoch_loss = loss_sum / train.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.4}");
        epoch_losses.push(epoch_loss);
    }
    if !model.params_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            batch: 0,
            loss: f64::NAN,
        });
    }
    let train_accuracy = accuracy(&model, train)?;
    let test_accuracy = test.map(|t| accuracy(&model, t)).transpose()?;
    Ok(TrainReport {
        model,
        epoch_losses,
        train_accuracy,
        test_accuracy,
    })
}

/// Fraction of `data` the model classifies correctly.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (chunk_imgs, chunk_labels) in data.images.chunks(256).zip(data.labels.chunks(256)) {
        let refs: Vec<&Image> = chunk_imgs.iter().collect();
        let out = model.forward_batch(&refs)?;
        correct += out
            .iter()
            .zip(chunk_labels)
            .filter(|(p, l)| p.argmax() == **l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, shape: (usize, usize, usize)) -> Image {
        let mut s = rng::stream(seed, "img", 0);
        let (h, w, c) = shape;
        Image::new(h, w, c, (0..h * w * c).map(|_| s.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.3; 10]);
        assert!(u.iter().all(|p| (p - 0.1).abs() < 1e-12));
        let e = std::f64::consts::E;
        let mut z = vec![0.0; 10];
        z[0] = 1.0;
        assert!((softmax(&z)[0] - e / (e + 9.0)).abs() < 1e-12);
        let big = softmax(&[1e4, -1e4, 0.0]);
        assert!(big.iter().all(|p| p.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let mut r = rng::stream(1, "init", 0);
        for arch in [Architecture::Conv, Architecture::Mlp] {
            let m = Model::init(arch, (32, 32, 1), 10, &mut r).unwrap();
            let p = m.forward(&random_image(2, (32, 32, 1))).unwrap();
            assert_eq!(p.logits.len(), 10);
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(m.forward(&random_image(2, (16, 16, 1))).is_err());
        }
    }

    #[test]
    fn batch_matches_single() {
        let mut r = rng::stream(1, "init", 0);
        let m = Model::init(Architecture::Conv, (8, 8, 3), 4, &mut r).unwrap();
        let a = random_image(3, (8, 8, 3));
        let b = random_image(4, (8, 8, 3));
        let batch = m.forward_batch(&[&a, &b]).unwrap();
        let single = m.forward(&b).unwrap();
        for (x, y) in batch[1].logits.iter().zip(&single.logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_has_zero_gradient() {
        let mut r = rng::stream(1, "init", 0);
        let m = Model::init(Architecture::Conv, (8, 8, 1), 3, &mut r).unwrap().scaled(0.0);
        let g = m
            .input_gradient(&random_image(5, (8, 8, 1)), &ScalarSpec::CrossEntropy(1))
            .unwrap();
        assert!(g.gradient.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_gradient_is_weight_column() {
        let weight = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 });
        let m = Model::from_layers(
            Architecture::Custom,
            (2, 2, 1),
            2,
            vec![Layer::Dense {
                weight: weight.clone(),
                bias: Array1::zeros(2),
            }],
        )
        .unwrap();
        let img = random_image(6, (2, 2, 1));
        let g = m.input_gradient(&img, &ScalarSpec::Logit(1)).unwrap();
        assert_eq!(g.gradient, weight.column(1).to_vec());
        let g2 = m.scaled(2.0).input_gradient(&img, &ScalarSpec::Logit(1)).unwrap();
        for (a, b) in g2.gradient.iter().zip(&g.gradient) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let bad = Model::from_layers(
            Architecture::Custom,
            (2, 2, 1),
            3,
            vec![Layer::Dense {
                weight: Array2::zeros((4, 2)),
                bias: Array1::zeros(2),
            }],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn save_load_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut r = rng::stream(1, "init", 0);
        let m = Model::init(Architecture::Conv, (8, 8, 1), 3, &mut r).unwrap();
        m.save(&path, "cfg=abc").unwrap();
        let (back, prov) = Model::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(prov, "cfg=abc");

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Version { .. })));

        std::fs::write(&path, b"ERDMODEL").unwrap();
        assert!(Model::load(&path).is_err());
    }
}
