//! Class-discriminative saliency maps. Grad-CAM is the shipped backend.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::{BackwardOptions, Mode};
use crate::tensor::{array2_digest, ImageSize, ImageTensor};
use crate::digest::Digest;

/// Which scalar the saliency gradient was taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    /// Class score before the output activation.
    PreActivation,
    /// The posterior itself.
    Posterior,
}

/// Per-pixel relevance in `[0, 1]`, shape `(h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub class_index: usize,
    pub backend: String,
    pub target: ScoreTarget,
}

impl SaliencyMap {
    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.values.ncols(), self.values.nrows())
    }

    pub fn digest(&self) -> Digest {
        array2_digest(&self.values)
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// A saliency algorithm.
pub trait SaliencyBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn saliency(&self, bundle: &ModelBundle, x: &ImageTensor, class: usize) -> Result<SaliencyMap>;
}

/// Gradient-weighted class activation mapping at the bundle's latent layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCam;

impl SaliencyBackend for GradCam {
    fn name(&self) -> &'static str {
        "grad_cam"
    }

    fn saliency(&self, bundle: &ModelBundle, x: &ImageTensor, class: usize) -> Result<SaliencyMap> {
        grad_cam(bundle, x, class)
    }
}

/// Grad-CAM map for class `c`: channel weights are the spatial means of
/// ∂score_c/∂A_k, the raw map is `ReLU(Σ_k w_k A_k)`, which is then
/// upsampled to the input size and divided by its maximum.
pub fn grad_cam(bundle: &ModelBundle, x: &ImageTensor, c: usize) -> Result<SaliencyMap> {
    if c >= bundle.num_classes() {
        return Err(Error::Argument(format!(
            "class index {c} out of range for {} classes",
            bundle.num_classes()
        )));
    }
    x.expect_size(bundle.input_size())?;
    let _session = bundle.gradient_session();
    let net = bundle.network();
    let cut = bundle.latent_index();
    if cut + 1 >= net.len() {
        return Err(Error::Backend("latent layer has no differentiable head".into()));
    }
    let activations = net.forward_range(0..cut + 1, std::slice::from_ref(x.values()), Mode::Eval)?;
    let (_, trace) = net.forward_traced(cut + 1..net.len(), &activations, Mode::Eval)?;
    let pre = &trace.last_pre()[0];
    let mut seed = Array3::zeros(pre.raw_dim());
    seed.as_slice_mut().expect("contiguous")[c] = 1.0;
    let grads = net.backward(
        &trace,
        vec![seed],
        BackwardOptions {
            from_pre_activation: true,
            param_grads: None,
        },
    )?;
    if grads[0].iter().any(|g| !g.is_finite()) {
        return Err(Error::Backend("non-finite saliency gradient".into()));
    }
    let raw = cam_from_parts(&activations[0], &grads[0]);
    let size = bundle.input_size();
    let up = upsample_map(&raw, (size.height, size.width))?;
    Ok(SaliencyMap {
        values: normalize_map(&up)?,
        class_index: c,
        backend: GradCam.name().to_string(),
        target: ScoreTarget::PreActivation,
    })
}

/// `ReLU(Σ_k mean(∂score/∂A_k) · A_k)` for activations and gradients of
/// shape `(d, h̃, w̃)`.
pub fn cam_from_parts(activations: &Array3<f64>, gradients: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = activations.dim();
    let weights = gradients
        .mean_axis(Axis(1))
        .and_then(|m| m.mean_axis(Axis(1)))
        .expect("non-empty feature maps");
    let mut raw = Array2::zeros((h, w));
    for (a, wk) in activations.outer_iter().zip(weights.iter()) {
        raw.scaled_add(*wk, &a);
    }
    raw.mapv_inplace(|v| v.max(0.0));
    raw
}

/// Divides a nonnegative map by its maximum; an all-zero map stays zero.
pub fn normalize_map(raw: &Array2<f64>) -> Result<Array2<f64>> {
    if raw.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("saliency map contains NaN".into()));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(
            "saliency map must be finite and nonnegative".into(),
        ));
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        Ok(raw.mapv(|v| v / max))
    } else {
        Ok(Array2::zeros(raw.raw_dim()))
    }
}

/// Bilinear upsampling to `(rows, cols)` with half-pixel centers and edge
/// clamping.
pub fn upsample_map(map: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = map.dim();
    let (th, tw) = target;
    if th < h || tw < w || h == 0 || w == 0 {
        return Err(Error::Argument(format!(
            "cannot upsample {h}x{w} map to {th}x{tw}"
        )));
    }
    let axis = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_src - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(h, th);
    let cols = axis(w, tw);
    Ok(Array2::from_shape_fn((th, tw), |(i, j)| {
        let (r0, r1, fr) = rows[i];
        let (c0, c1, fc) = cols[j];
        let top = map[[r0, c0]] * (1.0 - fc) + map[[r0, c1]] * fc;
        let bottom = map[[r1, c0]] * (1.0 - fc) + map[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_divides_by_max() {
        let m = normalize_map(&array![[0.0, 2.0], [4.0, 1.0]]).unwrap();
        assert_eq!(m, array![[0.0, 0.5], [1.0, 0.25]]);
    }

    #[test]
    fn normalize_zero_map_stays_zero() {
        let m = normalize_map(&Array2::zeros((3, 3))).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_max() {
        let m = array![[0.2, 1.0], [0.0, 0.7]];
        assert_eq!(normalize_map(&m).unwrap(), m);
    }

    #[test]
    fn normalize_rejects_nan() {
        let m = array![[f64::NAN, 1.0]];
        assert!(matches!(normalize_map(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = upsample_map(&Array2::from_elem((3, 2), 0.25), (7, 5)).unwrap();
        assert!(c.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let one = upsample_map(&array![[0.6]], (4, 3)).unwrap();
        assert!(one.iter().all(|&v| v == 0.6));
    }

    /// Direct per-pixel oracle: weights from distances to the four nearest
    /// source centers, computed without the separable axis tables.
    fn bilinear_oracle(map: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
        let (h, w) = map.dim();
        Array2::from_shape_fn((th, tw), |(i, j)| {
            let y = ((i as f64 + 0.5) * h as f64 / th as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let x = ((j as f64 + 0.5) * w as f64 / tw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let mut acc = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let wy = (1.0 - (y - r as f64).abs()).max(0.0);
                    let wx = (1.0 - (x - c as f64).abs()).max(0.0);
                    acc += wy * wx * map[[r, c]];
                }
            }
            acc
        })
    }

    #[test]
    fn upsample_rows_interpolate_monotonically() {
        let m = array![[0.0, 1.0], [0.0, 1.0]];
        let up = upsample_map(&m, (2, 4)).unwrap();
        let oracle = bilinear_oracle(&m, 2, 4);
        for row in up.rows() {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[3], 1.0);
            assert!(row.windows(2).into_iter().all(|w| w[0] <= w[1]));
        }
        for (a, b) in up.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Closed form for a 2 → 4 half-pixel resize: 0, 1/4, 3/4, 1.
        assert_eq!(up.row(0).to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_rejects_downsampling() {
        assert!(upsample_map(&Array2::zeros((4, 4)), (2, 8)).is_err());
    }

    #[test]
    fn cam_weights_are_gradient_means() {
        let a = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, -1.0]).unwrap();
        let g = Array3::from_shape_vec((2, 1, 2), vec![1.0, 3.0, -1.0, -1.0]).unwrap();
        // weights (2, -1): raw = relu([2 - 3, 4 + 1]) = [0, 5]
        assert_eq!(cam_from_parts(&a, &g), array![[0.0, 5.0]]);
    }
}
