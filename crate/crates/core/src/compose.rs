//! Perception visualization: the reconstruction shown only where the
//! saliency map says the classifier looked, on a white background.

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{classify_outcome, Outcome};
use crate::decoder::{Decoder, Reconstruction};
use crate::digest::Digest;
use crate::error::{Error, Result, StageExt};
use crate::model::{validate_threshold, ClassScores, Encoder, ModelBundle};
use crate::render::{draw_text, overlay, quantize, to_rgb, GLYPH_H};
use crate::saliency::{grad_cam, SaliencyMap};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PvExplanation {
    pub values: ImageTensor,
    pub class_index: usize,
    pub saliency_ref: Digest,
    pub reconstruction_ref: Digest,
    pub sample_id: String,
}

impl PvExplanation {
    pub fn digest(&self) -> Digest {
        self.values.digest()
    }
}

/// `p(i,j,k) = (1 − m(i,j)) + m(i,j)·y(i,j,k)` over a `(3, h, w)` image.
pub fn compose_values(m: &Array2<f64>, y: &Array3<f64>) -> Result<Array3<f64>> {
    let (_, h, w) = y.dim();
    if m.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "saliency map is {:?} but reconstruction is {h}x{w}",
            m.dim()
        )));
    }
    Ok(Array3::from_shape_fn(y.raw_dim(), |(c, i, j)| {
        let mv = m[[i, j]];
        (1.0 - mv) + mv * y[[c, i, j]]
    }))
}

pub fn compose_pv(m: &SaliencyMap, y: &Reconstruction, sample_id: &str) -> Result<PvExplanation> {
    let values = compose_values(&m.values, y.values.values())?;
    Ok(PvExplanation {
        values: ImageTensor::new(values)?,
        class_index: m.class_index,
        saliency_ref: m.digest(),
        reconstruction_ref: y.digest(),
        sample_id: sample_id.to_string(),
    })
}

/// Everything produced while explaining one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationRecord {
    pub sample_id: String,
    pub input: ImageTensor,
    pub scores: ClassScores,
    pub top_class: usize,
    pub class_index: usize,
    pub class_name: String,
    pub threshold: f64,
    pub prediction_set: BTreeSet<usize>,
    pub targets: Option<BTreeSet<usize>>,
    pub outcome: Option<Outcome>,
    pub latent_digest: Digest,
    pub saliency: SaliencyMap,
    pub reconstruction: Reconstruction,
    pub pv: PvExplanation,
}

/// Per-call context for [`explain`].
#[derive(Clone, Debug, Default)]
pub struct ExplainRequest {
    pub sample_id: String,
    /// Defaults to the top predicted class.
    pub class_index: Option<usize>,
    pub targets: Option<BTreeSet<usize>>,
    /// Defaults to [`crate::model::DEFAULT_THRESHOLD`].
    pub threshold: Option<f64>,
}

pub fn explain(
    bundle: &ModelBundle,
    enc: &Encoder,
    dec: &Decoder,
    x: &ImageTensor,
    req: &ExplainRequest,
) -> Result<ExplanationRecord> {
    if !enc.shares_weights_with(bundle) {
        return Err(Error::Provenance(
            "encoder was not truncated from this classifier".into(),
        ));
    }
    let threshold = validate_threshold(req.threshold.unwrap_or(crate::model::DEFAULT_THRESHOLD))?;
    let scores = bundle.predict(x).stage("predict")?;
    let top_class = scores.top_class();
    let class_index = req.class_index.unwrap_or(top_class);
    if let Some(targets) = &req.targets {
        if let Some(bad) = targets.iter().find(|&&t| t >= bundle.num_classes()) {
            return Err(Error::Argument(format!("target label {bad} out of range")));
        }
    }
    let saliency = grad_cam(bundle, x, class_index).stage("saliency")?;
    let z = enc.encode(x).stage("encode")?;
    let reconstruction = dec.decode(&z).stage("decode")?;
    let pv = compose_pv(&saliency, &reconstruction, &req.sample_id).stage("compose")?;
    let prediction_set = scores.prediction_set(threshold);
    let outcome = req
        .targets
        .as_ref()
        .map(|t| classify_outcome(t, &prediction_set));
    Ok(ExplanationRecord {
        sample_id: req.sample_id.clone(),
        input: x.clone(),
        top_class,
        class_index,
        class_name: bundle.class_names()[class_index].clone(),
        threshold,
        prediction_set,
        targets: req.targets.clone(),
        outcome,
        latent_digest: z.content_digest(),
        saliency,
        reconstruction,
        pv,
        scores,
    })
}

/// Serializable view of a record: names, scores and content digests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSummary {
    pub sample_id: String,
    pub class_index: usize,
    pub class_name: String,
    pub top_class: usize,
    pub top_class_name: String,
    pub posteriors: Vec<f64>,
    pub threshold: f64,
    pub prediction_set: Vec<String>,
    pub targets: Option<Vec<String>>,
    pub outcome: Option<Outcome>,
    pub input_digest: Digest,
    pub latent_digest: Digest,
    pub saliency_digest: Digest,
    pub reconstruction_digest: Digest,
    pub pv_digest: Digest,
    pub decoder_digest: Digest,
    pub saliency_backend: String,
}

impl ExplanationRecord {
    pub fn summary(&self, class_names: &[String]) -> ExplanationSummary {
        let names = |s: &BTreeSet<usize>| s.iter().map(|&i| class_names[i].clone()).collect();
        ExplanationSummary {
            sample_id: self.sample_id.clone(),
            class_index: self.class_index,
            class_name: self.class_name.clone(),
            top_class: self.top_class,
            top_class_name: class_names[self.top_class].clone(),
            posteriors: self.scores.posteriors.clone(),
            threshold: self.threshold,
            prediction_set: names(&self.prediction_set),
            targets: self.targets.as_ref().map(names),
            outcome: self.outcome,
            input_digest: self.input.digest(),
            latent_digest: self.latent_digest,
            saliency_digest: self.saliency.digest(),
            reconstruction_digest: self.reconstruction.digest(),
            pv_digest: self.pv.digest(),
            decoder_digest: self.reconstruction.decoder_digest,
            saliency_backend: self.saliency.backend.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelLayout {
    /// The PV alone, no caption.
    Pv,
    /// input | saliency overlay | PV
    Triple,
    /// input | saliency overlay | reconstruction | PV
    Quad,
}

impl PanelLayout {
    pub fn panes(self) -> usize {
        match self {
            PanelLayout::Pv => 1,
            PanelLayout::Triple => 3,
            PanelLayout::Quad => 4,
        }
    }
}

/// Caption glyph scale for a pane of the given width.
pub fn caption_scale(pane_width: usize) -> u32 {
    (pane_width / 112).max(1) as u32
}

/// Height of the caption strip under multi-pane layouts.
pub fn caption_height(pane_width: usize) -> u32 {
    (GLYPH_H + 4) * caption_scale(pane_width)
}

/// Explanation shown to quiz takers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Explainer {
    #[serde(rename = "pv")]
    Pv,
    #[serde(rename = "grad-cam")]
    GradCam,
}

impl Explainer {
    pub const ALL: [Explainer; 2] = [Explainer::Pv, Explainer::GradCam];

    pub fn as_str(self) -> &'static str {
        match self {
            Explainer::Pv => "pv",
            Explainer::GradCam => "grad-cam",
        }
    }
}

/// `input | explanation` side by side with a white gutter and no caption,
/// since a class label would give the quiz answer away.
pub fn quiz_panel(record: &ExplanationRecord, explainer: Explainer) -> RgbImage {
    let x = record.input.values();
    let (_, h, w) = x.dim();
    let right = match explainer {
        Explainer::Pv => record.pv.values.values().clone(),
        Explainer::GradCam => overlay(x, &record.saliency.values),
    };
    let gutter = (w / 16).max(1);
    let mut img = RgbImage::from_pixel((2 * w + gutter) as u32, h as u32, Rgb([255, 255, 255]));
    for (x0, values) in [(0, x), (w + gutter, &right)] {
        for i in 0..h {
            for j in 0..w {
                img.put_pixel(
                    (x0 + j) as u32,
                    i as u32,
                    Rgb([
                        quantize(values[[0, i, j]]),
                        quantize(values[[1, i, j]]),
                        quantize(values[[2, i, j]]),
                    ]),
                );
            }
        }
    }
    img
}

pub fn render_panel(record: &ExplanationRecord, layout: PanelLayout) -> RgbImage {
    let x = record.input.values();
    let (_, h, w) = x.dim();
    if layout == PanelLayout::Pv {
        return to_rgb(record.pv.values.values());
    }
    let overlaid = overlay(x, &record.saliency.values);
    let mut panes: Vec<(&str, Array3<f64>)> = vec![("input", x.clone()), ("grad-cam", overlaid)];
    if layout == PanelLayout::Quad {
        panes.push(("recon", record.reconstruction.values.values().clone()));
    }
    panes.push(("pv", record.pv.values.values().clone()));
    let strip = caption_height(w);
    let scale = caption_scale(w);
    let mut img = RgbImage::from_pixel(
        (w * panes.len()) as u32,
        h as u32 + strip,
        Rgb([255, 255, 255]),
    );
    for (k, (label, values)) in panes.iter().enumerate() {
        let x0 = (k * w) as u32;
        for i in 0..h {
            for j in 0..w {
                img.put_pixel(
                    x0 + j as u32,
                    i as u32,
                    Rgb([
                        quantize(values[[0, i, j]]),
                        quantize(values[[1, i, j]]),
                        quantize(values[[2, i, j]]),
                    ]),
                );
            }
        }
        let text = if *label == "pv" {
            format!("pv {}", record.class_name)
        } else {
            label.to_string()
        };
        draw_text(
            &mut img,
            &text,
            x0 + scale,
            h as u32 + 2 * scale,
            scale,
            x0 + w as u32,
            Rgb([0, 0, 0]),
        );
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_examples() {
        let y = Array3::from_elem((3, 2, 2), 0.4);
        let zero = compose_values(&Array2::zeros((2, 2)), &y).unwrap();
        assert!(zero.iter().all(|&v| v == 1.0));
        let one = compose_values(&Array2::ones((2, 2)), &y).unwrap();
        assert_eq!(one, y);
        let half = compose_values(&Array2::from_elem((2, 2), 0.5), &y).unwrap();
        assert!(half.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn compose_shape_mismatch() {
        let err = compose_values(&Array2::zeros((3, 2)), &Array3::zeros((3, 2, 2)));
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
