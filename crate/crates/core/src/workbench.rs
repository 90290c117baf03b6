//! A loaded classifier, decoder and dataset with precomputed outcomes: the
//! state behind both the HTTP service and the batch commands.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::{
    explain, quiz_panel, render_panel, ExplainRequest, Explainer, ExplanationRecord, ExplanationSummary,
    PanelLayout,
};
use crate::config::AppConfig;
use crate::data::{
    evaluate_samples, load_manifest, DatasetManifest, Outcome, OutcomePartition, Sample, SampleOutcome, Split,
};
use crate::decoder::{build_decoder, Decoder, DecoderCheckpoint};
use crate::digest::Digest;
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{build_quiz, decoder_invariance, InvarianceReport, QuizCandidate, QuizConfig, QuizExport, QuizQuestion};
use crate::losses::{LossReport, LossWeights, SsimConfig};
use crate::model::{load_classifier, validate_threshold, ArchDescriptor, Encoder, ModelBundle};
use crate::render::{overlay, png_bytes_gray, png_bytes_rgb, to_gray, to_rgb};
use crate::tensor::ImageTensor;
use crate::trainer::{evaluate_reconstruction, MeanImageBaseline, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Input,
    Saliency,
    Overlay,
    Reconstruction,
    Pv,
    Panel,
}

impl AssetKind {
    pub const ALL: [AssetKind; 6] = [
        AssetKind::Input,
        AssetKind::Saliency,
        AssetKind::Overlay,
        AssetKind::Reconstruction,
        AssetKind::Pv,
        AssetKind::Panel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::Input => "input",
            AssetKind::Saliency => "saliency",
            AssetKind::Overlay => "overlay",
            AssetKind::Reconstruction => "reconstruction",
            AssetKind::Pv => "pv",
            AssetKind::Panel => "panel",
        }
    }
}

/// PNG bytes addressed by their SHA-256.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Asset {
    pub digest: Digest,
    pub bytes: Vec<u8>,
}

impl Asset {
    pub fn new(bytes: Vec<u8>) -> Self {
        Asset {
            digest: Digest::of_bytes(&bytes),
            bytes,
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.digest)
    }
}

/// Encodes every raster of a record. The panel uses the three-pane layout.
pub fn record_assets(record: &ExplanationRecord) -> Result<BTreeMap<AssetKind, Asset>> {
    let x = record.input.values();
    let rasters = [
        (AssetKind::Input, png_bytes_rgb(&to_rgb(x))?),
        (AssetKind::Saliency, png_bytes_gray(&to_gray(&record.saliency.values))?),
        (AssetKind::Overlay, png_bytes_rgb(&to_rgb(&overlay(x, &record.saliency.values)))?),
        (
            AssetKind::Reconstruction,
            png_bytes_rgb(&to_rgb(record.reconstruction.values.values()))?,
        ),
        (AssetKind::Pv, png_bytes_rgb(&to_rgb(record.pv.values.values()))?),
        (
            AssetKind::Panel,
            png_bytes_rgb(&render_panel(record, PanelLayout::Triple))?,
        ),
    ];
    Ok(rasters
        .into_iter()
        .map(|(k, b)| (k, Asset::new(b)))
        .collect())
}

#[derive(Clone, Debug)]
pub struct ExplanationArtifacts {
    pub record: ExplanationRecord,
    pub summary: ExplanationSummary,
    pub assets: BTreeMap<AssetKind, Asset>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleQuery {
    pub outcome: Option<Outcome>,
    /// Matches samples whose targets or prediction set contain this class.
    pub class_index: Option<usize>,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
}

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub sample_id: String,
    pub outcome: Outcome,
    pub targets: Vec<String>,
    pub prediction_set: Vec<String>,
    pub top_class: String,
    pub top_posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub items: Vec<SampleSummary>,
}

pub struct Workbench {
    bundle: ModelBundle,
    encoder: Encoder,
    decoder: Decoder,
    manifest: DatasetManifest,
    threshold: f64,
    outcomes: Vec<SampleOutcome>,
    index: HashMap<String, usize>,
    partition: OutcomePartition,
}

impl Workbench {
    /// Classifies every sample of `manifest` once up front.
    pub fn new(
        bundle: ModelBundle,
        decoder: Decoder,
        manifest: DatasetManifest,
        threshold: f64,
    ) -> Result<Self> {
        validate_threshold(threshold)?;
        if manifest.class_names != bundle.class_names() {
            return Err(Error::Config(
                "dataset classes differ from the classifier's class list".into(),
            ));
        }
        let encoder = bundle.truncate_encoder();
        if decoder.config().latent_shape != encoder.latent_shape() {
            return Err(Error::Config(format!(
                "decoder latent {:?} does not match encoder latent {:?}",
                decoder.config().latent_shape,
                encoder.latent_shape()
            )));
        }
        let all: Vec<&Sample> = manifest.samples.iter().collect();
        let outcomes = evaluate_samples(&bundle, &manifest, &all, threshold).stage("predict")?;
        let index = outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| (o.sample_id.clone(), i))
            .collect();
        let partition = OutcomePartition::from_outcomes(&outcomes, threshold);
        Ok(Workbench {
            bundle,
            encoder,
            decoder,
            manifest,
            threshold,
            outcomes,
            index,
            partition,
        })
    }

    /// Loads descriptor, weights, decoder checkpoint and dataset from `cfg`.
    pub fn open(cfg: &AppConfig) -> Result<Self> {
        let desc = ArchDescriptor::from_path(cfg.require("descriptor", &cfg.descriptor)?)
            .stage("load descriptor")?;
        let bundle = load_classifier(cfg.require("weights", &cfg.weights)?, &desc)
            .stage("load classifier")?;
        let decoder = load_decoder(cfg.require("decoder", &cfg.decoder)?)?;
        let manifest =
            load_manifest(cfg.require("dataset", &cfg.dataset)?).stage("load dataset")?;
        Workbench::new(bundle, decoder, manifest, cfg.threshold)
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn class_names(&self) -> &[String] {
        self.bundle.class_names()
    }

    pub fn partition(&self) -> &OutcomePartition {
        &self.partition
    }

    pub fn outcomes(&self) -> &[SampleOutcome] {
        &self.outcomes
    }

    pub fn outcome(&self, sample_id: &str) -> Option<&SampleOutcome> {
        self.index.get(sample_id).map(|&i| &self.outcomes[i])
    }

    /// Parses a class given by name or by index.
    pub fn parse_class(&self, s: &str) -> Option<usize> {
        self.bundle
            .class_index(s)
            .or_else(|| s.parse::<usize>().ok().filter(|&i| i < self.bundle.num_classes()))
    }

    fn names(&self, set: &BTreeSet<usize>) -> Vec<String> {
        set.iter().map(|&i| self.class_names()[i].clone()).collect()
    }

    pub fn summarize(&self, o: &SampleOutcome) -> SampleSummary {
        let targets = &self.manifest.get(&o.sample_id).expect("evaluated sample").labels;
        SampleSummary {
            sample_id: o.sample_id.clone(),
            outcome: o.outcome,
            targets: self.names(targets),
            prediction_set: self.names(&o.prediction_set),
            top_class: self.class_names()[o.top_class].clone(),
            top_posterior: o.posteriors[o.top_class],
        }
    }

    /// Filtered, id-ordered page of evaluated samples.
    pub fn list_samples(&self, q: &SampleQuery) -> Result<SamplePage> {
        if q.page == 0 {
            return Err(Error::Argument("page numbers start at 1".into()));
        }
        if q.page_size == 0 || q.page_size > MAX_PAGE_SIZE {
            return Err(Error::Argument(format!(
                "page_size must be in 1..={MAX_PAGE_SIZE}"
            )));
        }
        if let Some(c) = q.class_index {
            if c >= self.bundle.num_classes() {
                return Err(Error::Argument(format!("class index {c} out of range")));
            }
        }
        let matching: Vec<&SampleOutcome> = self
            .outcomes
            .iter()
            .filter(|o| q.outcome.map_or(true, |want| o.outcome == want))
            .filter(|o| {
                q.class_index.map_or(true, |c| {
                    o.prediction_set.contains(&c)
                        || self.manifest.get(&o.sample_id).is_some_and(|s| s.labels.contains(&c))
                })
            })
            .collect();
        let start = (q.page - 1).saturating_mul(q.page_size);
        let items = matching
            .iter()
            .skip(start)
            .take(q.page_size)
            .map(|o| self.summarize(o))
            .collect();
        Ok(SamplePage {
            total: matching.len(),
            page: q.page,
            page_size: q.page_size,
            items,
        })
    }

    /// The explained class: `class` if given, else the top prediction.
    pub fn resolve_class(&self, sample_id: &str, class: Option<usize>) -> Result<usize> {
        let o = self
            .outcome(sample_id)
            .ok_or_else(|| Error::NotFound(format!("unknown sample {sample_id:?}")))?;
        match class {
            None => Ok(o.top_class),
            Some(c) if c < self.bundle.num_classes() => Ok(c),
            Some(c) => Err(Error::Argument(format!(
                "class index {c} out of range for {} classes",
                self.bundle.num_classes()
            ))),
        }
    }

    pub fn explain_sample(&self, sample_id: &str, class: Option<usize>) -> Result<ExplanationArtifacts> {
        let class_index = self.resolve_class(sample_id, class)?;
        let sample = self.manifest.get(sample_id).expect("resolved sample");
        let x = self
            .manifest
            .load_image(sample, self.bundle.input_size())
            .stage("load image")?;
        let record = explain(
            &self.bundle,
            &self.encoder,
            &self.decoder,
            &x,
            &ExplainRequest {
                sample_id: sample_id.to_string(),
                class_index: Some(class_index),
                targets: Some(sample.labels.clone()),
                threshold: Some(self.threshold),
            },
        )?;
        let assets = record_assets(&record).stage("render")?;
        Ok(ExplanationArtifacts {
            summary: record.summary(self.class_names()),
            record,
            assets,
        })
    }
}

/// A quiz with one export and one set of panels per explainer.
#[derive(Clone, Debug)]
pub struct QuizBundle {
    pub questions: Vec<QuizQuestion>,
    pub exports: BTreeMap<Explainer, QuizExport>,
    /// Panel images keyed by digest.
    pub panels: BTreeMap<Digest, Asset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub split: String,
    pub samples: usize,
    pub decoder_digest: Digest,
    pub encoder_digest: Digest,
    pub decoder: LossReport,
    /// Per-pixel mean of the training images, scored the same way.
    pub mean_image: LossReport,
    pub mean_image_fit_samples: usize,
}

/// Loads and encodes one split. A dataset without split tags counts as one
/// split holding everything.
pub fn encode_split(encoder: &Encoder, manifest: &DatasetManifest, split: Split) -> Result<TrainingSet> {
    let mut samples = manifest.split(split);
    if samples.is_empty() && manifest.samples.iter().all(|s| s.split.is_none()) {
        samples = manifest.samples.iter().collect();
    }
    if samples.is_empty() {
        return Err(Error::Argument(format!("the dataset has no {split:?} samples")));
    }
    let size = encoder.input_size();
    let images: Vec<ImageTensor> = samples
        .iter()
        .map(|s| manifest.load_image(s, size))
        .collect::<Result<_>>()
        .stage("load image")?;
    let ids = samples.iter().map(|s| s.sample_id.clone()).collect();
    TrainingSet::encode(encoder, ids, &images).stage("encode")
}

impl Workbench {
    pub fn training_set(&self, split: Split) -> Result<TrainingSet> {
        encode_split(&self.encoder, &self.manifest, split)
    }

    pub fn quiz_candidates(&self) -> BTreeMap<String, QuizCandidate> {
        self.outcomes
            .iter()
            .map(|o| {
                let s = self.manifest.get(&o.sample_id).expect("evaluated sample");
                let cand = QuizCandidate {
                    sample_id: o.sample_id.clone(),
                    model_prediction: self.class_names()[o.top_class].clone(),
                    truth_labels: self.names(&s.labels),
                };
                (o.sample_id.clone(), cand)
            })
            .collect()
    }

    /// Builds the quiz once and renders every question's panel for each
    /// explainer. Panels explain the model's top class.
    pub fn quiz(&self, cfg: &QuizConfig) -> Result<QuizBundle> {
        let questions = build_quiz(&self.partition, &self.quiz_candidates(), self.class_names(), cfg)?;
        let mut by_explainer: BTreeMap<Explainer, BTreeMap<String, Digest>> = BTreeMap::new();
        let mut panels = BTreeMap::new();
        for q in &questions {
            let art = self.explain_sample(&q.sample_id, None)?;
            for e in Explainer::ALL {
                let asset = Asset::new(png_bytes_rgb(&quiz_panel(&art.record, e)).stage("render")?);
                by_explainer
                    .entry(e)
                    .or_default()
                    .insert(q.sample_id.clone(), asset.digest);
                panels.insert(asset.digest, asset);
            }
        }
        let exports = by_explainer
            .iter()
            .map(|(e, digests)| Ok((*e, QuizExport::for_explainer(&questions, e.as_str(), cfg.seed, digests)?)))
            .collect::<Result<_>>()?;
        Ok(QuizBundle {
            questions,
            exports,
            panels,
        })
    }

    /// Losses of the decoder on the Eval split next to a mean-image
    /// predictor fit on the Train split.
    pub fn reconstruction_metrics(&self, weights: &LossWeights, ssim: &SsimConfig) -> Result<ReconstructionMetrics> {
        let eval = self.training_set(Split::Eval)?;
        let train = self.training_set(Split::Train)?;
        let baseline = MeanImageBaseline::fit(&train)?;
        Ok(ReconstructionMetrics {
            split: "eval".into(),
            samples: eval.len(),
            decoder_digest: self.decoder.digest(),
            encoder_digest: self.encoder.digest(),
            decoder: evaluate_reconstruction(&self.encoder, &self.decoder, &eval, weights, ssim)?,
            mean_image: evaluate_reconstruction(&self.encoder, &baseline, &eval, weights, ssim)?,
            mean_image_fit_samples: train.len(),
        })
    }

    /// Compares this decoder with `other` on the Eval split, with a freshly
    /// initialized decoder of the same shape as the reference.
    pub fn invariance(&self, other: &Decoder, untrained_seed: u64, ssim: &SsimConfig) -> Result<InvarianceReport> {
        let eval = self.training_set(Split::Eval)?;
        let untrained = build_decoder(self.decoder.config(), untrained_seed)?;
        decoder_invariance(&self.decoder, other, &untrained, &eval.ids, &eval.latents, ssim)
    }
}

pub fn load_decoder(path: &Path) -> Result<Decoder> {
    let ckpt = DecoderCheckpoint::load(path).stage("load decoder")?;
    Decoder::from_checkpoint(&ckpt).stage("load decoder")
}
