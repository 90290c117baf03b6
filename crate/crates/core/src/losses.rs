//! Reconstruction losses: pixel MSE, structural similarity and latent-space
//! (deep perceptual) similarity, plus their weighted composite.
//!
//! Every loss exists in two forms: a validated public function over
//! [`ImageTensor`]s, and a `*_terms` function over raw arrays that also
//! returns the gradient with respect to the reconstructions. Training uses
//! the latter.
//!
//! Two normalizations are supported. [`NormalizationMode::PaperSum`] is the
//! literal sum over batch and elements; [`NormalizationMode::Mean`] divides
//! each term by its element count (`b·w·h·3` for MSE, `3b` for SSIM,
//! `b·w̃·h̃·d` for DSIM), so that a perfect SSIM match scores `-1`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::par;
use crate::tensor::{ImageTensor, LatentTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    PaperSum,
    #[default]
    Mean,
}

const SIMPLEX_TOL: f64 = 1e-9;

/// Composite-loss weights `(α_mse, α_ssim, α_dsim)` on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct LossWeights {
    alpha_mse: f64,
    alpha_ssim: f64,
    alpha_dsim: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    alpha_mse: f64,
    alpha_ssim: f64,
    alpha_dsim: f64,
}

impl TryFrom<RawWeights> for LossWeights {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        LossWeights::new(r.alpha_mse, r.alpha_ssim, r.alpha_dsim)
    }
}

impl LossWeights {
    /// `(0.2, 0.4, 0.4)`.
    pub const REFERENCE: LossWeights = LossWeights {
        alpha_mse: 0.2,
        alpha_ssim: 0.4,
        alpha_dsim: 0.4,
    };

    pub fn new(alpha_mse: f64, alpha_ssim: f64, alpha_dsim: f64) -> Result<Self> {
        let w = LossWeights {
            alpha_mse,
            alpha_ssim,
            alpha_dsim,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha_mse, self.alpha_ssim, self.alpha_dsim];
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Argument(format!(
                "loss weights must be finite and nonnegative, got {a:?}"
            )));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Argument(format!(
                "loss weights must sum to one, got {sum}"
            )));
        }
        Ok(())
    }

    pub fn alpha_mse(&self) -> f64 {
        self.alpha_mse
    }

    pub fn alpha_ssim(&self) -> f64 {
        self.alpha_ssim
    }

    pub fn alpha_dsim(&self) -> f64 {
        self.alpha_dsim
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::REFERENCE
    }
}

/// Measured loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub ssim_loss: f64,
    pub dsim: f64,
    pub composite: f64,
    pub normalization_mode: NormalizationMode,
    pub batch_size: usize,
}

impl LossReport {
    pub fn new(
        weights: &LossWeights,
        mse: f64,
        ssim_loss: f64,
        dsim: f64,
        normalization_mode: NormalizationMode,
        batch_size: usize,
    ) -> Result<Self> {
        Ok(LossReport {
            mse,
            ssim_loss,
            dsim,
            composite: composite_loss(weights, (mse, ssim_loss, dsim))?,
            normalization_mode,
            batch_size,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.mse, self.ssim_loss, self.dsim, self.composite]
            .iter()
            .all(|v| v.is_finite())
    }

    /// One JSON training-log line.
    pub fn log_line(&self, step: usize) -> String {
        serde_json::json!({
            "step": step,
            "mse": self.mse,
            "ssim_loss": self.ssim_loss,
            "dsim": self.dsim,
            "composite": self.composite,
            "mode": self.normalization_mode,
        })
        .to_string()
    }
}

/// `α₁·mse + α₂·ssim_loss + α₃·dsim`.
pub fn composite_loss(w: &LossWeights, components: (f64, f64, f64)) -> Result<f64> {
    w.validate()?;
    let (mse, ssim, dsim) = components;
    Ok(w.alpha_mse * mse + w.alpha_ssim * ssim + w.alpha_dsim * dsim)
}

fn check_pairs(xs: &[Array3<f64>], ys: &[Array3<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Argument("loss needs a batch of at least one".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    for (x, y) in xs.iter().zip(ys) {
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

fn values(batch: &[ImageTensor]) -> Vec<Array3<f64>> {
    batch.iter().map(|t| t.values().clone()).collect()
}

/// Squared pixel error between batches `X` and `Y`.
pub fn mse_loss(xs: &[ImageTensor], ys: &[ImageTensor], mode: NormalizationMode) -> Result<f64> {
    mse_terms(&values(xs), &values(ys), mode).map(|(v, _)| v)
}

/// MSE value and its gradient w.r.t. `ys`.
pub fn mse_terms(
    xs: &[Array3<f64>],
    ys: &[Array3<f64>],
    mode: NormalizationMode,
) -> Result<(f64, Vec<Array3<f64>>)> {
    check_pairs(xs, ys)?;
    let norm = match mode {
        NormalizationMode::PaperSum => 1.0,
        NormalizationMode::Mean => xs.iter().map(|x| x.len()).sum::<usize>() as f64,
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(ys) {
        let diff = y - x;
        total += diff.iter().map(|d| d * d).sum::<f64>();
        grads.push(diff.mapv(|d| 2.0 * d / norm));
    }
    Ok((total / norm, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Local SSIM settings: Gaussian window, stability constants for data range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    /// 11×11 Gaussian window, σ = 1.5, K₁ = 0.01, K₂ = 0.03, range 1.
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Same constants with a smaller window, for images below 11 pixels.
    pub fn with_window(window: usize) -> Self {
        SsimConfig {
            window,
            ..SsimConfig::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-d Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || !(self.sigma > 0.0) || !(self.data_range > 0.0) {
            return Err(Error::Argument("invalid SSIM window parameters".into()));
        }
        if h < self.window || w < self.window {
            return Err(Error::Argument(format!(
                "{h}x{w} image is smaller than the {0}x{0} SSIM window",
                self.window
            )));
        }
        Ok(())
    }
}

/// Separable 'valid' correlation with `taps` along both axes.
fn filter_valid(img: &ArrayView2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = Array2::zeros((h, ow));
    for i in 0..h {
        let row = img.row(i);
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[j + k];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for (k, t) in taps.iter().enumerate() {
        out.scaled_add(*t, &tmp.slice(ndarray::s![k..k + oh, ..]));
    }
    out
}

/// Adjoint of [`filter_valid`], mapping a `(h-n+1, w-n+1)` map back to `(h, w)`.
fn filter_adjoint(map: &Array2<f64>, taps: &[f64], h: usize, w: usize) -> Array2<f64> {
    let n = taps.len();
    let (oh, ow) = map.dim();
    let mut tmp = Array2::zeros((h, ow));
    for (k, t) in taps.iter().enumerate() {
        tmp.slice_mut(ndarray::s![k..k + oh, ..]).scaled_add(*t, map);
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..ow {
            let v = tmp[[i, j]];
            for (k, t) in taps.iter().enumerate().take(n) {
                out[[i, j + k]] += t * v;
            }
        }
    }
    out
}

/// Mean local SSIM of one channel pair and, on request, its gradient w.r.t. `y`.
fn ssim_plane(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    cfg: &SsimConfig,
    want_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    let taps = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mx = filter_valid(x, &taps);
    let my = filter_valid(y, &taps);
    let exx = filter_valid(&(x * x).view(), &taps);
    let eyy = filter_valid(&(y * y).view(), &taps);
    let exy = filter_valid(&(x * y).view(), &taps);
    let positions = mx.len() as f64;
    let dim = mx.raw_dim();
    let mut total = 0.0;
    let (mut g_my, mut g_yy, mut g_xy) = if want_grad {
        (
            Array2::zeros(dim.clone()),
            Array2::zeros(dim.clone()),
            Array2::zeros(dim),
        )
    } else {
        (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
    };
    for (idx, &mxv) in mx.indexed_iter() {
        let myv = my[idx];
        let sxx = exx[idx] - mxv * mxv;
        let syy = eyy[idx] - myv * myv;
        let sxy = exy[idx] - mxv * myv;
        let a1 = 2.0 * mxv * myv + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = mxv * mxv + myv * myv + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let inv = 1.0 / (b1 * b2);
            g_yy[idx] = -s / b2 / positions;
            g_xy[idx] = 2.0 * a1 * inv / positions;
            g_my[idx] = (2.0 * mxv * a2 * inv - 2.0 * mxv * a1 * inv - 2.0 * myv * s / b1
                + 2.0 * myv * s / b2)
                / positions;
        }
    }
    let grad = want_grad.then(|| {
        let (h, w) = y.dim();
        let a_my = filter_adjoint(&g_my, &taps, h, w);
        let a_yy = filter_adjoint(&g_yy, &taps, h, w);
        let a_xy = filter_adjoint(&g_xy, &taps, h, w);
        let mut g = a_my;
        ndarray::Zip::from(&mut g)
            .and(&a_yy)
            .and(&a_xy)
            .and(y)
            .and(x)
            .for_each(|gv, &ayy, &axy, &yv, &xv| *gv += 2.0 * yv * ayy + xv * axy);
        g
    });
    (total / positions, grad)
}

/// Mean local SSIM of one color channel; lies in `[-1, 1]`.
pub fn ssim_index(x: &ImageTensor, y: &ImageTensor, channel: Channel, cfg: &SsimConfig) -> Result<f64> {
    check_pairs(std::slice::from_ref(x.values()), std::slice::from_ref(y.values()))?;
    let (_, h, w) = x.values().dim();
    cfg.check(h, w)?;
    let c = channel.index();
    let xv = x.values().index_axis(Axis(0), c);
    let yv = y.values().index_axis(Axis(0), c);
    Ok(ssim_plane(&xv, &yv, cfg, false).0)
}

/// Mean SSIM over the three channels of one image pair.
pub fn ssim_rgb(x: &Array3<f64>, y: &Array3<f64>, cfg: &SsimConfig) -> Result<f64> {
    check_pairs(std::slice::from_ref(x), std::slice::from_ref(y))?;
    let (_, h, w) = x.dim();
    cfg.check(h, w)?;
    Ok(Channel::ALL
        .iter()
        .map(|c| {
            let i = c.index();
            ssim_plane(&x.index_axis(Axis(0), i), &y.index_axis(Axis(0), i), cfg, false).0
        })
        .sum::<f64>()
        / 3.0)
}

/// `-Σ_i Σ_c SSIM_c(x_i, y_i)`, divided by `3b` in mean mode.
pub fn ssim_loss(
    xs: &[ImageTensor],
    ys: &[ImageTensor],
    mode: NormalizationMode,
    cfg: &SsimConfig,
) -> Result<f64> {
    ssim_loss_raw(&values(xs), &values(ys), mode, cfg)
}

/// [`ssim_loss`] over raw arrays.
pub fn ssim_loss_raw(
    xs: &[Array3<f64>],
    ys: &[Array3<f64>],
    mode: NormalizationMode,
    cfg: &SsimConfig,
) -> Result<f64> {
    check_pairs(xs, ys)?;
    let (_, h, w) = xs[0].dim();
    cfg.check(h, w)?;
    let pairs: Vec<(&Array3<f64>, &Array3<f64>)> = xs.iter().zip(ys).collect();
    let per_image = par::map(&pairs, |(x, y)| {
        Channel::ALL
            .iter()
            .map(|c| {
                let i = c.index();
                ssim_plane(&x.index_axis(Axis(0), i), &y.index_axis(Axis(0), i), cfg, false).0
            })
            .sum::<f64>()
    });
    Ok(-per_image.iter().sum::<f64>() / ssim_norm(mode, xs.len()))
}

fn ssim_norm(mode: NormalizationMode, b: usize) -> f64 {
    match mode {
        NormalizationMode::PaperSum => 1.0,
        NormalizationMode::Mean => 3.0 * b as f64,
    }
}

/// SSIM loss value and its gradient w.r.t. `ys`.
pub fn ssim_terms(
    xs: &[Array3<f64>],
    ys: &[Array3<f64>],
    mode: NormalizationMode,
    cfg: &SsimConfig,
) -> Result<(f64, Vec<Array3<f64>>)> {
    check_pairs(xs, ys)?;
    let (_, h, w) = xs[0].dim();
    cfg.check(h, w)?;
    let norm = ssim_norm(mode, xs.len());
    let pairs: Vec<(&Array3<f64>, &Array3<f64>)> = xs.iter().zip(ys).collect();
    let per_image = par::map(&pairs, |(x, y)| {
        let mut grad = Array3::zeros(y.raw_dim());
        let mut sum = 0.0;
        for c in Channel::ALL {
            let i = c.index();
            let (s, g) = ssim_plane(&x.index_axis(Axis(0), i), &y.index_axis(Axis(0), i), cfg, true);
            sum += s;
            grad.index_axis_mut(Axis(0), i)
                .assign(&g.expect("gradient").mapv(|v| -v / norm));
        }
        (sum, grad)
    });
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(per_image.len());
    for (s, g) in per_image {
        total += s;
        grads.push(g);
    }
    Ok((-total / norm, grads))
}

/// `Σ_i ‖E(y_i) − z_i‖²` (element mean in mean mode).
pub fn dsim_loss(
    enc: &Encoder,
    ys: &[ImageTensor],
    zs: &[LatentTensor],
    mode: NormalizationMode,
) -> Result<f64> {
    for z in zs {
        enc.check_latent(z)?;
    }
    let _session = enc.gradient_session();
    let zs: Vec<Array3<f64>> = zs.iter().map(|z| z.values.clone()).collect();
    let ys = values(ys);
    if ys.len() != zs.len() {
        return Err(Error::Shape("image and latent batches differ in size".into()));
    }
    let encoded = enc.encode_raw(&ys)?;
    Ok(latent_sq_error(&encoded, &zs, mode))
}

fn latent_sq_error(encoded: &[Array3<f64>], zs: &[Array3<f64>], mode: NormalizationMode) -> f64 {
    let total: f64 = encoded
        .iter()
        .zip(zs)
        .map(|(e, z)| e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    total / dsim_norm(mode, zs)
}

fn dsim_norm(mode: NormalizationMode, zs: &[Array3<f64>]) -> f64 {
    match mode {
        NormalizationMode::PaperSum => 1.0,
        NormalizationMode::Mean => zs.iter().map(|z| z.len()).sum::<usize>() as f64,
    }
}

/// DSIM value and its gradient w.r.t. `ys`, backpropagated through the
/// frozen encoder. `zs` must come from `enc`; callers check provenance and
/// hold the encoder's gradient session.
pub fn dsim_terms(
    enc: &Encoder,
    ys: &[Array3<f64>],
    zs: &[Array3<f64>],
    mode: NormalizationMode,
) -> Result<(f64, Vec<Array3<f64>>)> {
    if ys.is_empty() || ys.len() != zs.len() {
        return Err(Error::Shape("image and latent batches differ in size".into()));
    }
    let (encoded, trace) = enc.encode_traced(ys)?;
    for (e, z) in encoded.iter().zip(zs) {
        if e.shape() != z.shape() {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match encoder output {:?}",
                z.shape(),
                e.shape()
            )));
        }
    }
    let value = latent_sq_error(&encoded, zs, mode);
    let norm = dsim_norm(mode, zs);
    let upstream: Vec<Array3<f64>> = encoded
        .iter()
        .zip(zs)
        .map(|(e, z)| (e - z).mapv(|d| 2.0 * d / norm))
        .collect();
    let grads = enc.backward_to_input(&trace, upstream)?;
    Ok((value, grads))
}
