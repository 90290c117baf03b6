use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{col2im, im2col, matmul, ConvGeom};
use crate::error::{Error, Result};

/// Largest double below one; sigmoid outputs are clamped into the open unit
/// interval.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
const SIGMOID_MIN: f64 = f64::MIN_POSITIVE;

/// Flat parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Param {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.data).expect("param matrix shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Sigmoid => (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_MIN, SIGMOID_MAX),
        }
    }

    /// d(apply)/d(pre) evaluated at `pre`.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if pre > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(pre);
                s * (1.0 - s)
            }
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::LeakyRelu(a) => 2.0 / (1.0 + a * a),
            Activation::Identity | Activation::Sigmoid => 1.0,
        }
    }
}

/// Serialized layer description, as found in architecture descriptors.
/// Input channel counts are inferred from the preceding layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        out_channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Defaults to `kernel / 2`.
        #[serde(default)]
        padding: Option<usize>,
        #[serde(default)]
        activation: Activation,
    },
    ConvTranspose2d {
        name: String,
        out_channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "two")]
        stride: usize,
        #[serde(default = "one")]
        padding: usize,
        #[serde(default = "one")]
        output_padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    BatchNorm {
        name: String,
        #[serde(default = "bn_eps")]
        eps: f64,
        #[serde(default = "bn_momentum")]
        momentum: f64,
        #[serde(default)]
        activation: Activation,
    },
    GlobalAvgPool {
        name: String,
    },
    Dense {
        name: String,
        out_features: usize,
        #[serde(default)]
        activation: Activation,
    },
    CenterCrop {
        name: String,
        width: usize,
        height: usize,
    },
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn bn_eps() -> f64 {
    1e-5
}
fn bn_momentum() -> f64 {
    0.1
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::ConvTranspose2d { name, .. }
            | LayerSpec::BatchNorm { name, .. }
            | LayerSpec::GlobalAvgPool { name }
            | LayerSpec::Dense { name, .. }
            | LayerSpec::CenterCrop { name, .. } => name,
        }
    }

    /// Resolves the spec against its input shape `(c, h, w)`.
    pub fn resolve(&self, input: [usize; 3]) -> Result<(LayerKind, Activation)> {
        let [c, _, _] = input;
        let (kind, act) = match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                activation,
                ..
            } => (
                LayerKind::Conv2d {
                    in_channels: c,
                    out_channels,
                    kernel,
                    stride,
                    padding: padding.unwrap_or(kernel / 2),
                },
                activation,
            ),
            LayerSpec::ConvTranspose2d {
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                activation,
                ..
            } => (
                LayerKind::ConvTranspose2d {
                    in_channels: c,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    output_padding,
                },
                activation,
            ),
            LayerSpec::BatchNorm {
                eps,
                momentum,
                activation,
                ..
            } => (
                LayerKind::BatchNorm {
                    channels: c,
                    eps,
                    momentum,
                },
                activation,
            ),
            LayerSpec::GlobalAvgPool { .. } => (LayerKind::GlobalAvgPool, Activation::Identity),
            LayerSpec::Dense {
                out_features,
                activation,
                ..
            } => (
                LayerKind::Dense {
                    in_features: input.iter().product(),
                    out_features,
                },
                activation,
            ),
            LayerSpec::CenterCrop { width, height, .. } => {
                (LayerKind::CenterCrop { height, width }, Activation::Identity)
            }
        };
        if let Activation::LeakyRelu(slope) = act {
            if !(slope > 0.0) {
                return Err(Error::Config(format!(
                    "layer {}: leaky slope must be positive",
                    self.name()
                )));
            }
        }
        kind.output_shape(input)
            .map_err(|e| Error::Config(format!("layer {}: {e}", self.name())))?;
        Ok((kind, act))
    }
}

/// Resolved layer operation with all channel counts known.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Weight layout `(in, out, k, k)`.
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    CenterCrop {
        height: usize,
        width: usize,
    },
}

impl LayerKind {
    pub fn output_shape(&self, input: [usize; 3]) -> std::result::Result<[usize; 3], String> {
        let [c, h, w] = input;
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels != c {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                if kernel == 0 || out_channels == 0 {
                    return Err("kernel and channel counts must be positive".into());
                }
                let g = ConvGeom::conv(c, h, w, kernel, stride, padding)
                    .ok_or_else(|| format!("kernel {kernel} does not fit {h}x{w} input"))?;
                Ok([out_channels, g.out_h, g.out_w])
            }
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                if in_channels != c {
                    return Err(format!("expects {in_channels} channels, got {c}"));
                }
                if stride == 0 || kernel == 0 || out_channels == 0 {
                    return Err("stride, kernel and channel counts must be positive".into());
                }
                if output_padding >= stride {
                    return Err("output padding must be smaller than stride".into());
                }
                let grow = |n: usize| ((n - 1) * stride + kernel + output_padding).checked_sub(2 * padding);
                let (oh, ow) = match (grow(h), grow(w)) {
                    (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                    _ => return Err("padding exceeds transposed output".into()),
                };
                // The adjoint convolution must map the output back onto the input grid.
                let g = ConvGeom::conv(out_channels, oh, ow, kernel, stride, padding)
                    .ok_or("inconsistent transposed geometry")?;
                if (g.out_h, g.out_w) != (h, w) {
                    return Err("inconsistent transposed geometry".into());
                }
                Ok([out_channels, oh, ow])
            }
            LayerKind::BatchNorm { channels, eps, momentum } => {
                if channels != c {
                    return Err(format!("expects {channels} channels, got {c}"));
                }
                if !(eps > 0.0) || !(0.0..=1.0).contains(&momentum) {
                    return Err("invalid batch-norm eps/momentum".into());
                }
                Ok(input)
            }
            LayerKind::GlobalAvgPool => Ok([c, 1, 1]),
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                if in_features != c * h * w {
                    return Err(format!("expects {in_features} features, got {}", c * h * w));
                }
                if out_features == 0 {
                    return Err("dense layer needs at least one output".into());
                }
                Ok([out_features, 1, 1])
            }
            LayerKind::CenterCrop { height, width } => {
                if height == 0 || width == 0 || height > h || width > w {
                    return Err(format!("cannot crop {h}x{w} to {height}x{width}"));
                }
                Ok([c, height, width])
            }
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::CenterCrop { .. } => "center_crop",
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![in_channels, out_channels, kernel, kernel], vec![out_channels]],
            LayerKind::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            LayerKind::GlobalAvgPool | LayerKind::CenterCrop { .. } => vec![],
        }
    }

    fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => vec![],
        }
    }
}

/// A layer with its post-activation and owned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub activation: Activation,
    /// Trainable tensors: `[weight, bias]` or `[gamma, beta]`.
    pub params: Vec<Param>,
    /// Non-trainable state: batch-norm `[running_mean, running_var]`.
    pub buffers: Vec<Param>,
}

/// Serialized weights of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub name: String,
    pub params: Vec<Param>,
    #[serde(default)]
    pub buffers: Vec<Param>,
}

impl Layer {
    /// Builds a layer with seeded Kaiming-uniform weights and zero biases.
    pub fn init(
        name: String,
        kind: LayerKind,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let gain = activation.init_gain();
        let fan_in = match kind {
            LayerKind::Conv2d {
                in_channels, kernel, ..
            } => (in_channels * kernel * kernel) as f64,
            LayerKind::ConvTranspose2d {
                in_channels,
                kernel,
                stride,
                ..
            } => ((in_channels * kernel * kernel) as f64 / (stride * stride) as f64).max(1.0),
            LayerKind::Dense { in_features, .. } => in_features as f64,
            _ => 1.0,
        };
        let bound = (3.0 * gain / fan_in).sqrt();
        let params = kind
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(i, shape)| match (&kind, i) {
                (LayerKind::BatchNorm { .. }, 0) => Param::filled(shape, 1.0),
                (_, 0) => {
                    let mut p = Param::zeros(shape);
                    p.data
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..bound));
                    p
                }
                _ => Param::zeros(shape),
            })
            .collect();
        let buffers = kind
            .buffer_shapes()
            .iter()
            .enumerate()
            .map(|(i, shape)| Param::filled(shape, if i == 0 { 0.0 } else { 1.0 }))
            .collect();
        Layer {
            name,
            kind,
            activation,
            params,
            buffers,
        }
    }

    pub fn state(&self) -> LayerState {
        LayerState {
            name: self.name.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        }
    }

    pub fn load_state(&mut self, state: LayerState) -> Result<()> {
        if state.name != self.name {
            return Err(Error::Load(format!(
                "expected weights for layer {:?}, found {:?}",
                self.name, state.name
            )));
        }
        let check = |what: &str, ours: &[Param], theirs: &[Param]| -> Result<()> {
            if ours.len() != theirs.len() {
                return Err(Error::Load(format!(
                    "layer {}: expected {} {what} tensors, found {}",
                    self.name,
                    ours.len(),
                    theirs.len()
                )));
            }
            for (i, (a, b)) in ours.iter().zip(theirs).enumerate() {
                if a.shape != b.shape || b.data.len() != b.shape.iter().product::<usize>() {
                    return Err(Error::Load(format!(
                        "layer {}: {what} {i} has shape {:?} ({} values), descriptor requires {:?}",
                        self.name,
                        b.shape,
                        b.data.len(),
                        a.shape
                    )));
                }
                if b.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Load(format!(
                        "layer {}: {what} {i} contains non-finite values",
                        self.name
                    )));
                }
            }
            Ok(())
        };
        check("parameter", &self.params, &state.params)?;
        check("buffer", &self.buffers, &state.buffers)?;
        self.params = state.params;
        self.buffers = state.buffers;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Pre-activation output for one sample. Batch norm is handled at the
    /// network level and must not reach here.
    pub(crate) fn forward_sample(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeom::conv(c, h, w, kernel, stride, padding).expect("validated");
                let cols = im2col(xs, &g);
                let wm = self.params[0].matrix(out_channels, g.rows());
                let mut out = matmul(&wm, &cols.view());
                add_bias(&mut out, &self.params[1].data);
                out.into_shape_with_order((out_channels, g.out_h, g.out_w))
                    .expect("conv output")
            }
            LayerKind::ConvTranspose2d {
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                ..
            } => {
                let oh = (h - 1) * stride + kernel + output_padding - 2 * padding;
                let ow = (w - 1) * stride + kernel + output_padding - 2 * padding;
                let g = ConvGeom::conv(out_channels, oh, ow, kernel, stride, padding)
                    .expect("validated");
                let wm = self.params[0].matrix(c, g.rows());
                let xm = ArrayView2::from_shape((c, h * w), xs).expect("input matrix");
                let cols = matmul(&wm.t(), &xm);
                let mut out = vec![0.0; out_channels * oh * ow];
                col2im(&cols.view(), &g, &mut out);
                let bias = &self.params[1].data;
                for (ch, plane) in out.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[ch]);
                }
                Array3::from_shape_vec((out_channels, oh, ow), out).expect("tconv output")
            }
            LayerKind::GlobalAvgPool => {
                let n = (h * w) as f64;
                Array3::from_shape_fn((c, 1, 1), |(ch, _, _)| {
                    xs[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n
                })
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let wm = self.params[0].matrix(out_features, in_features);
                let bias = &self.params[1].data;
                Array3::from_shape_fn((out_features, 1, 1), |(o, _, _)| {
                    wm.row(o).iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + bias[o]
                })
            }
            LayerKind::CenterCrop { height, width } => {
                let top = (h - height) / 2;
                let left = (w - width) / 2;
                x.slice(ndarray::s![.., top..top + height, left..left + width])
                    .to_owned()
            }
            LayerKind::BatchNorm { .. } => unreachable!("batch norm is a batch-level op"),
        }
    }

    /// Backpropagates `dpre` (gradient w.r.t. this layer's pre-activation
    /// output) for one sample. Returns the input gradient when requested and
    /// the per-parameter gradients when requested.
    pub(crate) fn backward_sample(
        &self,
        x: &Array3<f64>,
        dpre: &Array3<f64>,
        want_input: bool,
        want_params: bool,
    ) -> (Option<Array3<f64>>, Vec<Vec<f64>>) {
        let (c, h, w) = x.dim();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let ds = dpre.as_standard_layout();
        let ds = ds.as_slice().expect("contiguous");
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeom::conv(c, h, w, kernel, stride, padding).expect("validated");
                let dm = ArrayView2::from_shape((out_channels, g.positions()), ds)
                    .expect("grad matrix");
                let wm = self.params[0].matrix(out_channels, g.rows());
                let mut grads = Vec::new();
                if want_params {
                    let cols = im2col(xs, &g);
                    let dw = matmul(&dm, &cols.t());
                    grads.push(dw.into_raw_vec_and_offset().0);
                    grads.push(dm.sum_axis(Axis(1)).to_vec());
                }
                let dx = want_input.then(|| {
                    let dcols = matmul(&wm.t(), &dm);
                    let mut dx = vec![0.0; c * h * w];
                    col2im(&dcols.view(), &g, &mut dx);
                    Array3::from_shape_vec((c, h, w), dx).expect("dx")
                });
                (dx, grads)
            }
            LayerKind::ConvTranspose2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (_, oh, ow) = dpre.dim();
                let g = ConvGeom::conv(out_channels, oh, ow, kernel, stride, padding)
                    .expect("validated");
                let dcols = im2col(ds, &g);
                let wm = self.params[0].matrix(c, g.rows());
                let mut grads = Vec::new();
                if want_params {
                    let xm = ArrayView2::from_shape((c, h * w), xs).expect("input matrix");
                    let dw = matmul(&xm, &dcols.t());
                    grads.push(dw.into_raw_vec_and_offset().0);
                    grads.push(
                        ds.chunks(oh * ow)
                            .map(|plane| plane.iter().sum::<f64>())
                            .collect(),
                    );
                }
                let dx = want_input.then(|| {
                    matmul(&wm, &dcols.view())
                        .into_shape_with_order((c, h, w))
                        .expect("dx")
                });
                (dx, grads)
            }
            LayerKind::GlobalAvgPool => {
                let n = (h * w) as f64;
                let dx = want_input
                    .then(|| Array3::from_shape_fn((c, h, w), |(ch, _, _)| ds[ch] / n));
                (dx, vec![])
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let wm = self.params[0].matrix(out_features, in_features);
                let mut grads = Vec::new();
                if want_params {
                    let mut dw = Vec::with_capacity(out_features * in_features);
                    for &d in ds {
                        dw.extend(xs.iter().map(|v| d * v));
                    }
                    grads.push(dw);
                    grads.push(ds.to_vec());
                }
                let dx = want_input.then(|| {
                    let mut dx = vec![0.0; in_features];
                    for (o, &d) in ds.iter().enumerate() {
                        for (acc, wv) in dx.iter_mut().zip(wm.row(o)) {
                            *acc += d * wv;
                        }
                    }
                    Array3::from_shape_vec((c, h, w), dx).expect("dx")
                });
                (dx, grads)
            }
            LayerKind::CenterCrop { height, width } => {
                let dx = want_input.then(|| {
                    let top = (h - height) / 2;
                    let left = (w - width) / 2;
                    let mut dx = Array3::zeros((c, h, w));
                    dx.slice_mut(ndarray::s![.., top..top + height, left..left + width])
                        .assign(dpre);
                    dx
                });
                (dx, vec![])
            }
            LayerKind::BatchNorm { .. } => unreachable!("batch norm is a batch-level op"),
        }
    }
}

fn add_bias(out: &mut Array2<f64>, bias: &[f64]) {
    for (mut row, b) in out.rows_mut().into_iter().zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}
