//! Decoder training against a frozen encoder.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderCheckpoint};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::losses::{
    dsim_terms, mse_terms, ssim_terms, LossReport, LossWeights, NormalizationMode, SsimConfig,
};
use crate::model::Encoder;
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{BackwardOptions, Gradients, Mode};
use crate::par;
use crate::tensor::{ImageSize, ImageTensor};

/// A training checkpoint is a decoder checkpoint carrying its training record.
pub type Checkpoint = DecoderCheckpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub normalization_mode: NormalizationMode,
    #[serde(default)]
    pub dataset_id: String,
    #[serde(default)]
    pub ssim: SsimConfig,
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    1e-4
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            loss_weights: LossWeights::REFERENCE,
            batch_size: default_batch(),
            epochs,
            learning_rate: default_lr(),
            seed,
            normalization_mode: NormalizationMode::Mean,
            dataset_id: String::new(),
            ssim: SsimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Loss summary for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Sample-weighted mean of the per-step reports.
    pub train: LossReport,
    pub eval: Option<LossReport>,
}

/// Provenance of a trained decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: TrainConfig,
    pub encoder_digest: Digest,
    pub init_seed: u64,
    pub train_samples: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub command: Vec<String>,
}

/// Images paired with their precomputed latents.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub images: Vec<Array3<f64>>,
    pub latents: Vec<Array3<f64>>,
    pub encoder_digest: Digest,
}

impl TrainingSet {
    /// Encodes `images` once with the frozen encoder.
    pub fn encode(enc: &Encoder, ids: Vec<String>, images: &[ImageTensor]) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::Argument("ids and images differ in length".into()));
        }
        let size = enc.input_size();
        for (id, x) in ids.iter().zip(images) {
            if x.size() != size {
                return Err(Error::Ingestion(format!(
                    "sample {id:?} is {}x{}, encoder expects {}x{}",
                    x.size().width,
                    x.size().height,
                    size.width,
                    size.height
                )));
            }
        }
        let raw: Vec<Array3<f64>> = images.iter().map(|x| x.values().clone()).collect();
        let mut latents = Vec::with_capacity(raw.len());
        for chunk in raw.chunks(64) {
            latents.extend(enc.encode_raw(chunk)?);
        }
        Ok(TrainingSet {
            ids,
            images: raw,
            latents,
            encoder_digest: enc.digest(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<ImageSize> {
        self.images
            .first()
            .map(|x| ImageSize::new(x.dim().2, x.dim().1))
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            latents: indices.iter().map(|&i| self.latents[i].clone()).collect(),
            encoder_digest: self.encoder_digest,
        }
    }

    fn check(&self, enc: &Encoder) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Argument("dataset is empty".into()));
        }
        if self.encoder_digest != enc.digest() {
            return Err(Error::Provenance(format!(
                "latents were produced by encoder {}, not {}",
                self.encoder_digest.short(12),
                enc.digest().short(12)
            )));
        }
        Ok(())
    }
}

/// Anything mapping (image, latent) pairs to reconstructions.
pub trait Reconstruct {
    fn reconstruct(
        &self,
        images: &[Array3<f64>],
        latents: &[Array3<f64>],
    ) -> Result<Vec<Array3<f64>>>;
}

impl Reconstruct for Decoder {
    fn reconstruct(&self, _images: &[Array3<f64>], latents: &[Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        self.decode_raw(latents)
    }
}

/// Predicts the same image for every input.
#[derive(Clone, Debug)]
pub struct MeanImageBaseline {
    pub mean: Array3<f64>,
}

impl MeanImageBaseline {
    pub fn fit(data: &TrainingSet) -> Result<Self> {
        let first = data
            .images
            .first()
            .ok_or_else(|| Error::Argument("cannot fit a baseline on an empty set".into()))?;
        let mut mean = Array3::zeros(first.raw_dim());
        for x in &data.images {
            mean += x;
        }
        mean /= data.len() as f64;
        Ok(MeanImageBaseline { mean })
    }
}

impl Reconstruct for MeanImageBaseline {
    fn reconstruct(&self, images: &[Array3<f64>], _latents: &[Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        Ok(vec![self.mean.clone(); images.len()])
    }
}

const EVAL_CHUNK: usize = 32;

/// Mean-mode losses of `model` over `data`, aggregated over the whole set.
pub fn evaluate_reconstruction(
    enc: &Encoder,
    model: &dyn Reconstruct,
    data: &TrainingSet,
    weights: &LossWeights,
    ssim: &SsimConfig,
) -> Result<LossReport> {
    data.check(enc)?;
    let _session = enc.gradient_session();
    evaluate_unlocked(enc, model, data, weights, ssim)
}

fn evaluate_unlocked(
    enc: &Encoder,
    model: &dyn Reconstruct,
    data: &TrainingSet,
    weights: &LossWeights,
    ssim: &SsimConfig,
) -> Result<LossReport> {
    let sum = NormalizationMode::PaperSum;
    let (mut mse, mut ssim_sum, mut dsim) = (0.0, 0.0, 0.0);
    for (xs, zs) in data.images.chunks(EVAL_CHUNK).zip(data.latents.chunks(EVAL_CHUNK)) {
        let ys = model.reconstruct(xs, zs)?;
        mse += mse_terms(xs, &ys, sum)?.0;
        ssim_sum += crate::losses::ssim_loss_raw(xs, &ys, sum, ssim)?;
        let encoded = enc.encode_raw(&ys)?;
        dsim += encoded
            .iter()
            .zip(zs)
            .map(|(e, z)| e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>();
    }
    let n = data.len() as f64;
    LossReport::new(
        weights,
        mse / (n * data.images[0].len() as f64),
        ssim_sum / (3.0 * n),
        dsim / (n * data.latents[0].len() as f64),
        NormalizationMode::Mean,
        data.len(),
    )
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Decoder after the last epoch.
    pub decoder: Decoder,
    /// Lowest eval-loss decoder, when a validation set was given.
    pub best: Option<Decoder>,
    pub record: TrainingRecord,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.decoder.to_checkpoint(Some(self.record.clone()))
    }
}

/// Training run builder.
pub struct Trainer<'a> {
    enc: &'a Encoder,
    cfg: TrainConfig,
    init_seed: u64,
    log: Option<&'a mut dyn Write>,
    checkpoint_dir: Option<PathBuf>,
    validation: Option<&'a TrainingSet>,
    command: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(enc: &'a Encoder, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            enc,
            cfg,
            init_seed: 0,
            log: None,
            checkpoint_dir: None,
            validation: None,
            command: Vec::new(),
        })
    }

    /// JSON-lines sink for per-step loss reports.
    pub fn log_to(mut self, sink: &'a mut dyn Write) -> Self {
        self.log = Some(sink);
        self
    }

    /// Writes `epoch_NNN.json` after each epoch and `best.json` under the
    /// keep-best policy.
    pub fn checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn validation(mut self, data: &'a TrainingSet) -> Self {
        self.validation = Some(data);
        self
    }

    /// Seed the decoder was initialized with, for the provenance record.
    pub fn init_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn command(mut self, argv: Vec<String>) -> Self {
        self.command = argv;
        self
    }

    pub fn run(mut self, mut dec: Decoder, data: &TrainingSet) -> Result<TrainOutcome> {
        let enc = self.enc;
        data.check(enc)?;
        if let Some(v) = self.validation {
            v.check(enc)?;
        }
        let latent = enc.latent_shape();
        if dec.config().latent_shape != latent {
            return Err(Error::Shape(format!(
                "decoder expects latent {:?}, encoder produces {:?}",
                dec.config().latent_shape,
                latent
            )));
        }
        if data.image_size() != Some(dec.config().output_size) {
            return Err(Error::Ingestion(format!(
                "dataset images are {:?}, decoder outputs {:?}",
                data.image_size(),
                dec.config().output_size
            )));
        }
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }

        let _session = enc.gradient_session();
        let encoder_before = enc.current_digest();
        let started = Instant::now();
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let cfg = self.cfg.clone();
        let mut record = TrainingRecord {
            config: cfg.clone(),
            encoder_digest: enc.digest(),
            init_seed: self.init_seed,
            train_samples: data.len(),
            history: Vec::new(),
            best_epoch: None,
            started_unix,
            wall_clock_secs: 0.0,
            command: std::mem::take(&mut self.command),
        };
        let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), dec.network());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut best: Option<(f64, Decoder)> = None;
        let mut step = 0usize;

        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut acc = [0.0f64; 3];
            let mut seen = 0usize;
            let mut epoch_steps = 0usize;
            for batch in batches(&order, cfg.batch_size) {
                let xs: Vec<Array3<f64>> = batch.iter().map(|&i| data.images[i].clone()).collect();
                let zs: Vec<Array3<f64>> = batch.iter().map(|&i| data.latents[i].clone()).collect();
                let (report, grads) = match train_step(enc, &dec, &xs, &zs, &cfg) {
                    Ok(ok) => ok,
                    Err(Error::Numeric(reason)) => {
                        record.wall_clock_secs = started.elapsed().as_secs_f64();
                        return Err(Error::Diverged {
                            epoch,
                            step,
                            reason,
                            checkpoint: Box::new(dec.to_checkpoint(Some(record))),
                        });
                    }
                    Err(e) => return Err(e),
                };
                if let Some(log) = self.log.as_mut() {
                    writeln!(log, "{}", report.log_line(step))
                        .map_err(|e| Error::io("training log", e))?;
                }
                let (trace, param_grads) = grads;
                let net = dec.network_mut();
                net.update_running_stats(&trace);
                adam.step(net, &param_grads);
                let b = xs.len() as f64;
                acc[0] += report.mse * b;
                acc[1] += report.ssim_loss * b;
                acc[2] += report.dsim * b;
                seen += xs.len();
                epoch_steps += 1;
                step += 1;
            }
            let n = seen as f64;
            let train = LossReport::new(
                &cfg.loss_weights,
                acc[0] / n,
                acc[1] / n,
                acc[2] / n,
                cfg.normalization_mode,
                seen,
            )?;
            let eval = match self.validation {
                Some(v) => Some(evaluate_unlocked(enc, &dec, v, &cfg.loss_weights, &cfg.ssim)?),
                None => None,
            };
            if let Some(e) = &eval {
                if best.as_ref().map_or(true, |(b, _)| e.composite < *b) {
                    best = Some((e.composite, dec.clone()));
                    record.best_epoch = Some(epoch);
                }
            }
            record.history.push(EpochRecord {
                epoch,
                steps: epoch_steps,
                train,
                eval,
            });
            record.wall_clock_secs = started.elapsed().as_secs_f64();
            if let Some(dir) = &self.checkpoint_dir {
                dec.to_checkpoint(Some(record.clone()))
                    .save(dir.join(format!("epoch_{epoch:03}.json")))?;
                if record.best_epoch == Some(epoch) {
                    dec.to_checkpoint(Some(record.clone()))
                        .save(dir.join("best.json"))?;
                }
            }
        }

        if enc.current_digest() != encoder_before {
            return Err(Error::Validation(
                "encoder weights changed during decoder training".into(),
            ));
        }
        Ok(TrainOutcome {
            decoder: dec,
            best: best.map(|(_, d)| d),
            record,
        })
    }
}

/// Trains with default run options.
pub fn train_decoder(
    cfg: &TrainConfig,
    enc: &Encoder,
    dec: Decoder,
    data: &TrainingSet,
) -> Result<TrainOutcome> {
    Trainer::new(enc, cfg.clone())?.run(dec, data)
}

/// Consecutive batches of `order`; a trailing singleton joins the previous
/// batch so batch norm always sees more than one sample.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

type StepGrads = (crate::nn::Trace, Gradients);

fn train_step(
    enc: &Encoder,
    dec: &Decoder,
    xs: &[Array3<f64>],
    zs: &[Array3<f64>],
    cfg: &TrainConfig,
) -> Result<(LossReport, StepGrads)> {
    let net = dec.network();
    let (ys, trace) = net.forward_traced(0..net.len(), zs, Mode::Train)?;
    let mode = cfg.normalization_mode;
    let (mse, g_mse) = mse_terms(xs, &ys, mode)?;
    let (ssim, g_ssim) = ssim_terms(xs, &ys, mode, &cfg.ssim)?;
    let (dsim, g_dsim) = dsim_terms(enc, &ys, zs, mode)?;
    let report = LossReport::new(&cfg.loss_weights, mse, ssim, dsim, mode, xs.len())?;
    if !report.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: mse={mse} ssim_loss={ssim} dsim={dsim}"
        )));
    }
    let w = cfg.loss_weights;
    let upstream: Vec<Array3<f64>> = par::map_range(ys.len(), |i| {
        let mut g = g_mse[i].mapv(|v| v * w.alpha_mse());
        g.scaled_add(w.alpha_ssim(), &g_ssim[i]);
        g.scaled_add(w.alpha_dsim(), &g_dsim[i]);
        g
    });
    let mut grads = Gradients::zeros_like(net);
    net.backward(
        &trace,
        upstream,
        BackwardOptions {
            from_pre_activation: false,
            param_grads: Some(&mut grads),
        },
    )?;
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite decoder gradient".into()));
    }
    Ok((report, (trace, grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    Mse,
    Ssim,
    Dsim,
    Composite,
}

/// One training-mode objective evaluation on a fixed batch, with the
/// gradient w.r.t. every decoder parameter when `with_grad` is set.
pub fn decoder_objective(
    enc: &Encoder,
    dec: &Decoder,
    xs: &[Array3<f64>],
    zs: &[Array3<f64>],
    cfg: &TrainConfig,
    component: LossComponent,
    with_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let _session = enc.gradient_session();
    let net = dec.network();
    let (ys, trace) = net.forward_traced(0..net.len(), zs, Mode::Train)?;
    let mode = cfg.normalization_mode;
    let w = cfg.loss_weights;
    let mut value = 0.0;
    let mut upstream: Vec<Array3<f64>> = ys.iter().map(|y| Array3::zeros(y.dim())).collect();
    let mut add = |scale: f64, (v, g): (f64, Vec<Array3<f64>>)| {
        value += scale * v;
        for (u, g) in upstream.iter_mut().zip(&g) {
            u.scaled_add(scale, g);
        }
    };
    use LossComponent::*;
    if matches!(component, Mse | Composite) {
        let s = if component == Mse { 1.0 } else { w.alpha_mse() };
        add(s, mse_terms(xs, &ys, mode)?);
    }
    if matches!(component, Ssim | Composite) {
        let s = if component == Ssim { 1.0 } else { w.alpha_ssim() };
        add(s, ssim_terms(xs, &ys, mode, &cfg.ssim)?);
    }
    if matches!(component, Dsim | Composite) {
        let s = if component == Dsim { 1.0 } else { w.alpha_dsim() };
        add(s, dsim_terms(enc, &ys, zs, mode)?);
    }
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = Gradients::zeros_like(net);
    net.backward(
        &trace,
        upstream,
        BackwardOptions {
            from_pre_activation: false,
            param_grads: Some(&mut grads),
        },
    )?;
    Ok((value, Some(grads)))
}

/// Reads the checkpoint and training record at `path`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Decoder, Option<TrainingRecord>)> {
    let ckpt = DecoderCheckpoint::load(path)?;
    Ok((Decoder::from_checkpoint(&ckpt)?, ckpt.training))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_fold_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[4, 5, 6, 7, 8]);
        let b = batches(&order, 3);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn config_rejects_zero_epochs() {
        assert!(matches!(TrainConfig::new(0, 1).validate(), Err(Error::Config(_))));
        assert!(TrainConfig::new(1, 1).validate().is_ok());
        let mut c = TrainConfig::new(1, 1);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c.learning_rate = 1e-3;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.normalization_mode, NormalizationMode::Mean);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
    }
}
