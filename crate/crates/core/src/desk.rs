//! Small reference setup that runs on a laptop: a synthetic multi-label
//! shape dataset, a six-convolution classifier with a `(4, 4, 64)` latent,
//! and a matching decoder configuration.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::data::{write_dataset, NewSample, Split};
use crate::decoder::{build_decoder, DecoderConfig, StageSpec};
use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, ModelBundle, WeightsFile};
use crate::render::write_bytes;
use crate::trainer::{TrainConfig, Trainer, TrainingSet};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Activation, BackwardOptions, Gradients, LayerSpec, Mode, Network};
use crate::tensor::{ImageSize, ImageTensor, LatentShape};

pub const DESK_SIDE: usize = 32;

pub const DESK_CLASSES: [&str; 10] = [
    "disc", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar", "cross", "checker",
];

/// One generated image with its ground-truth label set.
#[derive(Clone, Debug)]
pub struct DeskSample {
    pub id: String,
    pub image: ImageTensor,
    pub labels: BTreeSet<usize>,
}

fn conv(name: &str, out: usize, stride: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Conv2d {
        name: name.into(),
        out_channels: out,
        kernel: 3,
        stride,
        padding: None,
        activation,
    }
}

fn bn(name: &str) -> LayerSpec {
    LayerSpec::BatchNorm {
        name: name.into(),
        eps: 1e-5,
        momentum: 0.1,
        activation: Activation::Relu,
    }
}

/// Six 3×3 convolutions (three with stride 2), each followed by batch norm
/// and ReLU, then global pooling and a sigmoid head. The latent layer is
/// `bn6`, so latent activations stay on a unit scale.
pub fn desk_descriptor() -> ArchDescriptor {
    let id = Activation::Identity;
    let mut layers = Vec::new();
    for (k, (out, stride)) in [(8, 1), (16, 2), (16, 1), (32, 2), (32, 1), (64, 2)]
        .into_iter()
        .enumerate()
    {
        layers.push(conv(&format!("conv{}", k + 1), out, stride, id));
        layers.push(bn(&format!("bn{}", k + 1)));
    }
    layers.push(LayerSpec::GlobalAvgPool { name: "pool".into() });
    layers.push(LayerSpec::Dense {
        name: "logits".into(),
        out_features: DESK_CLASSES.len(),
        activation: Activation::Sigmoid,
    });
    ArchDescriptor {
        name: "desk-cnn".into(),
        input_shape: ImageSize::square(DESK_SIDE),
        class_names: DESK_CLASSES.iter().map(|s| s.to_string()).collect(),
        latent_layer_id: "bn6".into(),
        layers,
    }
}

/// Shape-only stand-in for a 224×224 residual backbone whose last block
/// yields a `(7, 7, 2048)` latent. Too large to instantiate casually.
pub fn wide_descriptor(class_names: Vec<String>) -> ArchDescriptor {
    let relu = Activation::Relu;
    ArchDescriptor {
        name: "wide-224".into(),
        input_shape: ImageSize::square(224),
        class_names,
        latent_layer_id: "block5".into(),
        layers: vec![
            conv("block1", 64, 2, relu),
            conv("block2", 256, 2, relu),
            conv("block3", 512, 2, relu),
            conv("block4", 1024, 2, relu),
            conv("block5", 2048, 2, relu),
            LayerSpec::GlobalAvgPool { name: "pool".into() },
            LayerSpec::Dense {
                name: "logits".into(),
                out_features: 20,
                activation: Activation::Sigmoid,
            },
        ],
    }
}

/// Decoder used with the desk classifier: three doubling stages 4 → 32.
pub fn desk_decoder_config() -> DecoderConfig {
    DecoderConfig {
        latent_shape: LatentShape::new(4, 4, 64),
        output_size: ImageSize::square(DESK_SIDE),
        stages: vec![
            StageSpec::new(32, 2),
            StageSpec::new(16, 2),
            StageSpec::new(8, 2),
        ],
        leaky_slope: 0.2,
        kernel: [3, 3],
    }
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let t = (r * 0.3).max(1.5);
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r && ax <= (dy + r) * 0.6,
        3 => (ax <= t / 2.0 && ay <= r) || (ay <= t / 2.0 && ax <= r),
        4 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r - t
        }
        5 => ax + ay <= r,
        6 => ay <= t / 2.0 + 0.5 && ax <= r * 1.2,
        7 => ax <= t / 2.0 + 0.5 && ay <= r * 1.2,
        8 => ax <= r && ay <= r && (ax - ay).abs() <= t / 2.0 + 0.3,
        9 => {
            ax <= r * 0.8
                && ay <= r * 0.8
                && (((dx + 32.0) / 2.0).floor() as i64 + ((dy + 32.0) / 2.0).floor() as i64) % 2
                    == 0
        }
        _ => false,
    }
}

/// Fully saturated hue `h ∈ [0, 1)` at value `v`.
fn hue(h: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * 0.8 * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Each class has its own hue; shapes get that hue with a little jitter.
pub fn class_color(class: usize) -> [f64; 3] {
    hue(class as f64 / DESK_CLASSES.len() as f64, 0.9)
}

/// Deterministic synthetic dataset: each image shows one to three distinct
/// shapes on a flat gray background.
pub fn generate(n: usize, seed: u64) -> Vec<DeskSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = (0..DESK_CLASSES.len()).collect();
    (0..n)
        .map(|i| {
            let shade: f64 = rng.random_range(0.35..0.65);
            let mut img = Array3::from_elem((3, DESK_SIDE, DESK_SIDE), shade);
            let k = rng.random_range(1..=3);
            let chosen: Vec<usize> = classes.choose_multiple(&mut rng, k).copied().collect();
            for &class in &chosen {
                let r: f64 = rng.random_range(5.0..8.0);
                let cx: f64 = rng.random_range(r..DESK_SIDE as f64 - r);
                let cy: f64 = rng.random_range(r..DESK_SIDE as f64 - r);
                let color = class_color(class)
                    .map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
                for y in 0..DESK_SIDE {
                    for x in 0..DESK_SIDE {
                        if inside(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                            for (c, v) in color.iter().enumerate() {
                                img[[c, y, x]] = *v;
                            }
                        }
                    }
                }
            }
            DeskSample {
                id: format!("desk-{i:05}"),
                image: ImageTensor::new(img).expect("values in range"),
                labels: chosen.into_iter().collect(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 7,
        }
    }
}

/// Per-epoch mean binary cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistory {
    pub epoch_bce: Vec<f64>,
}

fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

const CALIBRATION_SAMPLES: usize = 1000;

/// Trains the classifier from scratch with sigmoid cross-entropy, then
/// recomputes batch-norm statistics exactly over (up to) the first 1000
/// samples.
pub fn train_classifier(
    desc: &ArchDescriptor,
    samples: &[DeskSample],
    cfg: &ClassifierConfig,
) -> Result<(ModelBundle, ClassifierHistory)> {
    if samples.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Argument("classifier training needs data, epochs and a batch size".into()));
    }
    let n_classes = desc.class_names.len();
    let mut net: Network = desc.init_network(cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = ClassifierHistory { epoch_bce: Vec::new() };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Array3<f64>> = batch.iter().map(|&i| samples[i].image.values().clone()).collect();
            let (out, trace) = net.forward_traced(0..net.len(), &xs, Mode::Train)?;
            let b = batch.len() as f64;
            let mut seeds = Vec::with_capacity(batch.len());
            for (&i, p) in batch.iter().zip(&out) {
                let mut g = p.clone();
                for (c, v) in g.iter_mut().enumerate() {
                    let t = if samples[i].labels.contains(&c) { 1.0 } else { 0.0 };
                    total += bce(*v, t);
                    *v = (*v - t) / (b * n_classes as f64);
                }
                seeds.push(g);
            }
            let mut grads = Gradients::zeros_like(&net);
            net.backward(
                &trace,
                seeds,
                BackwardOptions {
                    from_pre_activation: true,
                    param_grads: Some(&mut grads),
                },
            )?;
            net.update_running_stats(&trace);
            adam.step(&mut net, &grads);
        }
        history
            .epoch_bce
            .push(total / (samples.len() * n_classes) as f64);
    }
    let calibration: Vec<Array3<f64>> = samples
        .iter()
        .take(CALIBRATION_SAMPLES)
        .map(|s| s.image.values().clone())
        .collect();
    net.calibrate_batch_norm(&calibration)?;
    Ok((ModelBundle::from_network(desc, net)?, history))
}

/// Fraction of samples whose thresholded prediction set equals the labels.
pub fn exact_match_rate(bundle: &ModelBundle, samples: &[DeskSample], threshold: f64) -> Result<f64> {
    let mut hits = 0usize;
    for chunk in samples.chunks(64) {
        let xs: Vec<ImageTensor> = chunk.iter().map(|s| s.image.clone()).collect();
        for (scores, s) in bundle.predict_batch(&xs)?.iter().zip(chunk) {
            if scores.prediction_set(threshold) == s.labels {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// What [`build_workspace`] generates and trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskPlan {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
    /// `None` keeps the freshly initialized classifier.
    pub classifier: Option<ClassifierConfig>,
    /// `None` keeps the freshly initialized decoder.
    pub decoder: Option<TrainConfig>,
}

impl Default for DeskPlan {
    fn default() -> Self {
        let mut decoder = TrainConfig::new(30, 5);
        decoder.learning_rate = 1e-3;
        DeskPlan {
            train_samples: 2000,
            eval_samples: 500,
            seed: 1,
            classifier: Some(ClassifierConfig {
                epochs: 15,
                ..Default::default()
            }),
            decoder: Some(decoder),
        }
    }
}

pub const WORKSPACE_CONFIG: &str = "config.json";

/// Writes a dataset, a classifier and a decoder under `root`, plus a
/// `config.json` pointing at them with relative paths.
pub fn build_workspace(root: &Path, plan: &DeskPlan, log: &mut dyn Write) -> Result<AppConfig> {
    let train = generate(plan.train_samples, plan.seed);
    let held_out: Vec<DeskSample> = generate(plan.eval_samples, plan.seed.wrapping_add(1))
        .into_iter()
        .map(|mut s| {
            s.id = s.id.replace("desk-", "desk-eval-");
            s
        })
        .collect();
    let desc = desk_descriptor();
    let bundle = match &plan.classifier {
        Some(cfg) => {
            let (bundle, history) = train_classifier(&desc, &train, cfg)?;
            for (e, v) in history.epoch_bce.iter().enumerate() {
                let _ = writeln!(log, "classifier epoch {} bce {v:.5}", e + 1);
            }
            bundle
        }
        None => ModelBundle::from_network(&desc, desc.init_network(plan.seed)?)?,
    };
    let enc = bundle.truncate_encoder();
    let dec = build_decoder(&desk_decoder_config(), plan.seed.wrapping_add(2))?;
    let (dec, record) = match &plan.decoder {
        Some(cfg) => {
            let images: Vec<ImageTensor> = train.iter().map(|s| s.image.clone()).collect();
            let set = TrainingSet::encode(&enc, train.iter().map(|s| s.id.clone()).collect(), &images)?;
            let out = Trainer::new(&enc, cfg.clone())?.log_to(log).run(dec, &set)?;
            (out.decoder, Some(out.record))
        }
        None => (dec, None),
    };

    let names: Vec<String> = DESK_CLASSES.iter().map(|s| s.to_string()).collect();
    let samples: Vec<NewSample> = train
        .iter()
        .map(|s| (s, Split::Train))
        .chain(held_out.iter().map(|s| (s, Split::Eval)))
        .map(|(s, split)| NewSample {
            id: &s.id,
            image: &s.image,
            labels: &s.labels,
            split: Some(split),
        })
        .collect();
    write_dataset(&root.join("dataset"), &names, &samples)?;
    desc.save(root.join("descriptor.json"))?;
    WeightsFile::from_network(bundle.network()).save(root.join("weights.json"))?;
    dec.to_checkpoint(record).save(root.join("decoder.json"))?;
    let relative = AppConfig {
        descriptor: Some("descriptor.json".into()),
        weights: Some("weights.json".into()),
        decoder: Some("decoder.json".into()),
        dataset: Some("dataset".into()),
        ..AppConfig::default()
    };
    let cfg_path = root.join(WORKSPACE_CONFIG);
    write_bytes(&cfg_path, serde_json::to_string_pretty(&relative)?.as_bytes())?;
    AppConfig::load(&cfg_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(5, 3);
        let b = generate(5, 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
            assert!((1..=3).contains(&x.labels.len()));
        }
        assert_ne!(generate(1, 4)[0].image, a[0].image);
    }

    #[test]
    fn desk_shapes() {
        let d = desk_descriptor();
        d.validate().unwrap();
        assert_eq!(d.latent_shape().unwrap(), LatentShape::new(4, 4, 64));
        let w = wide_descriptor((0..20).map(|i| format!("c{i}")).collect());
        w.validate().unwrap();
        assert_eq!(w.latent_shape().unwrap(), LatentShape::new(7, 7, 2048));
        desk_decoder_config().validate().unwrap();
    }
}
