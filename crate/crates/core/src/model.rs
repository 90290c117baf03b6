//! Frozen classifier wrapper: prediction, encoder truncation and latent
//! extraction.
//!
//! A [`ModelBundle`] owns its network behind an `Arc` and never hands out
//! mutable access, so the weight digest recorded at load time stays valid
//! for the lifetime of the bundle. The [`Encoder`] shares the same `Arc` and
//! simply stops the forward pass at the latent layer.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::nn::{BackwardOptions, LayerSpec, LayerState, Mode, Network, Trace};
use crate::tensor::{ImageSize, ImageTensor, LatentShape, LatentTensor};

pub const WEIGHTS_FORMAT: &str = "perceptvis-weights/1";

/// Default multi-label decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Architecture descriptor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    #[serde(default)]
    pub name: String,
    pub input_shape: ImageSize,
    pub class_names: Vec<String>,
    pub latent_layer_id: String,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let desc: ArchDescriptor = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    fn input_chw(&self) -> [usize; 3] {
        [3, self.input_shape.height, self.input_shape.width]
    }

    /// Structural checks that need no weights.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let unique: BTreeSet<&String> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(Error::Config("class names must be unique".into()));
        }
        let matches = self
            .layers
            .iter()
            .filter(|l| l.name() == self.latent_layer_id)
            .count();
        if matches != 1 {
            return Err(Error::Config(format!(
                "latent layer {:?} matches {matches} layers, expected exactly one",
                self.latent_layer_id
            )));
        }
        let shapes = self.layer_shapes()?;
        let out = *shapes.last().expect("shapes");
        if out != [self.class_names.len(), 1, 1] {
            return Err(Error::Config(format!(
                "classifier output {:?} does not match {} classes",
                out,
                self.class_names.len()
            )));
        }
        let idx = self.latent_index();
        if idx + 1 == self.layers.len() {
            return Err(Error::Config("latent layer cannot be the output layer".into()));
        }
        Ok(())
    }

    /// Output shapes of each layer, from shape arithmetic alone.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut current = self.input_chw();
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let (kind, _) = spec.resolve(current)?;
            current = kind.output_shape(current).map_err(Error::Config)?;
            out.push(current);
        }
        Ok(out)
    }

    fn latent_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.name() == self.latent_layer_id)
            .expect("validated latent layer")
    }

    /// Shape of the latent tensor `(w̃, h̃, d)` at `latent_layer_id`.
    pub fn latent_shape(&self) -> Result<LatentShape> {
        self.validate()?;
        let shapes = self.layer_shapes()?;
        Ok(LatentShape::from_chw(shapes[self.latent_index()]))
    }

    /// Freshly initialized network for this descriptor.
    pub fn init_network(&self, seed: u64) -> Result<Network> {
        self.validate()?;
        Network::from_specs(self.input_chw(), &self.layers, seed)
    }
}

/// On-disk weights for a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub format: String,
    pub layers: Vec<LayerState>,
}

impl WeightsFile {
    pub fn from_network(net: &Network) -> Self {
        WeightsFile {
            format: WEIGHTS_FORMAT.to_string(),
            layers: net.state(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if file.format != WEIGHTS_FORMAT {
            return Err(Error::Load(format!(
                "{}: unsupported weights format {:?}",
                path.display(),
                file.format
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Posterior probabilities for each class, independent per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub posteriors: Vec<f64>,
}

impl ClassScores {
    /// Argmax posterior; ties resolve to the lowest class index.
    pub fn top_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.posteriors.iter().enumerate() {
            if p > self.posteriors[best] {
                best = i;
            }
        }
        best
    }

    pub fn prediction_set(&self, threshold: f64) -> BTreeSet<usize> {
        prediction_set(self, threshold)
    }
}

/// Classes whose posterior is at least `threshold`. Requires
/// `0 < threshold < 1`.
pub fn prediction_set(scores: &ClassScores, threshold: f64) -> BTreeSet<usize> {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    scores
        .posteriors
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect()
}

pub fn validate_threshold(threshold: f64) -> Result<f64> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(threshold)
    } else {
        Err(Error::Argument(format!(
            "threshold must lie in (0,1), got {threshold}"
        )))
    }
}

/// Guard for operations that record gradients through a model instance.
pub struct GradientSession<'a> {
    _guard: MutexGuard<'a, ()>,
}

/// A loaded, frozen classifier.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    network: Arc<Network>,
    class_names: Vec<String>,
    latent_layer_id: String,
    latent_index: usize,
    input_size: ImageSize,
    digest: Digest,
    gradient_lock: Arc<Mutex<()>>,
}

/// Loads classifier weights and checks them against the descriptor.
pub fn load_classifier(
    weights_source: impl AsRef<Path>,
    descriptor: &ArchDescriptor,
) -> Result<ModelBundle> {
    descriptor.validate()?;
    let weights = WeightsFile::load(weights_source)?;
    let mut net = Network::from_specs(descriptor.input_chw(), &descriptor.layers, 0)?;
    net.load_state(weights.layers)?;
    ModelBundle::from_network(descriptor, net)
}

impl ModelBundle {
    /// Wraps an in-memory network matching `descriptor`.
    pub fn from_network(descriptor: &ArchDescriptor, network: Network) -> Result<Self> {
        descriptor.validate()?;
        if network.input_shape() != descriptor.input_chw() {
            return Err(Error::Load(format!(
                "network input {:?} does not match descriptor {:?}",
                network.input_shape(),
                descriptor.input_chw()
            )));
        }
        let names_match = network.len() == descriptor.layers.len()
            && network
                .layers()
                .iter()
                .zip(&descriptor.layers)
                .all(|(l, s)| l.name == s.name());
        if !names_match {
            return Err(Error::Load("network layers do not match descriptor".into()));
        }
        let latent_index = network
            .layer_index(&descriptor.latent_layer_id)
            .ok_or_else(|| Error::Config("unknown latent layer".into()))?;
        let digest = network.digest();
        Ok(ModelBundle {
            network: Arc::new(network),
            class_names: descriptor.class_names.clone(),
            latent_layer_id: descriptor.latent_layer_id.clone(),
            latent_index,
            input_size: descriptor.input_shape,
            digest,
            gradient_lock: Arc::new(Mutex::new(())),
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn latent_layer_id(&self) -> &str {
        &self.latent_layer_id
    }

    pub fn input_size(&self) -> ImageSize {
        self.input_size
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::from_chw(self.network.shape_after(self.latent_index))
    }

    /// Weight digest recorded at load time.
    pub fn weights_digest(&self) -> Digest {
        self.digest
    }

    /// Recomputes the digest from the live weights.
    pub fn current_digest(&self) -> Digest {
        self.network.digest()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Exclusive access for gradient-recording work on this instance.
    pub fn gradient_session(&self) -> GradientSession<'_> {
        GradientSession {
            _guard: self
                .gradient_lock
                .lock()
                .unwrap_or_else(|poisoned| poisoned.into_inner()),
        }
    }

    pub fn predict(&self, x: &ImageTensor) -> Result<ClassScores> {
        Ok(self.predict_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn predict_batch(&self, xs: &[ImageTensor]) -> Result<Vec<ClassScores>> {
        for x in xs {
            x.expect_size(self.input_size)?;
        }
        let inputs: Vec<Array3<f64>> = xs.iter().map(|x| x.values().clone()).collect();
        let out = self.network.forward(&inputs, Mode::Eval)?;
        Ok(out.into_iter().map(scores_from).collect())
    }

    pub fn truncate_encoder(&self) -> Encoder {
        Encoder {
            network: Arc::clone(&self.network),
            cut: self.latent_index,
            digest: self.digest,
            input_size: self.input_size,
            gradient_lock: Arc::clone(&self.gradient_lock),
        }
    }

    pub(crate) fn latent_index(&self) -> usize {
        self.latent_index
    }
}

fn scores_from(out: Array3<f64>) -> ClassScores {
    ClassScores {
        posteriors: out.into_raw_vec_and_offset().0,
    }
}

/// The classifier truncated at its latent layer. Shares weights with the
/// bundle it came from.
#[derive(Clone, Debug)]
pub struct Encoder {
    network: Arc<Network>,
    cut: usize,
    digest: Digest,
    input_size: ImageSize,
    gradient_lock: Arc<Mutex<()>>,
}

impl Encoder {
    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn current_digest(&self) -> Digest {
        self.network.digest()
    }

    pub fn input_size(&self) -> ImageSize {
        self.input_size
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::from_chw(self.network.shape_after(self.cut))
    }

    pub fn gradient_session(&self) -> GradientSession<'_> {
        GradientSession {
            _guard: self
                .gradient_lock
                .lock()
                .unwrap_or_else(|poisoned| poisoned.into_inner()),
        }
    }

    /// Shares the underlying network with `bundle`.
    pub fn shares_weights_with(&self, bundle: &ModelBundle) -> bool {
        Arc::ptr_eq(&self.network, &bundle.network)
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        Ok(self.encode_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[ImageTensor]) -> Result<Vec<LatentTensor>> {
        for x in xs {
            x.expect_size(self.input_size)?;
        }
        let inputs: Vec<Array3<f64>> = xs.iter().map(|x| x.values().clone()).collect();
        self.encode_raw(&inputs)?
            .into_iter()
            .map(|z| LatentTensor::new(z, self.digest))
            .collect()
    }

    /// Encodes raw `(3, h, w)` arrays without range validation.
    pub fn encode_raw(&self, xs: &[Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        self.network.forward_range(0..self.cut + 1, xs, Mode::Eval)
    }

    /// Traced encoder pass for backpropagating into the input.
    pub fn encode_traced(&self, xs: &[Array3<f64>]) -> Result<(Vec<Array3<f64>>, Trace)> {
        self.network.forward_traced(0..self.cut + 1, xs, Mode::Eval)
    }

    /// Gradient w.r.t. the encoder input; encoder weights receive nothing.
    pub fn backward_to_input(
        &self,
        trace: &Trace,
        grad: Vec<Array3<f64>>,
    ) -> Result<Vec<Array3<f64>>> {
        self.network.backward(trace, grad, BackwardOptions::default())
    }

    /// Runs the classifier layers after the latent layer.
    pub fn finish(&self, z: &LatentTensor) -> Result<ClassScores> {
        self.check_latent(z)?;
        let out = self.network.forward_range(
            self.cut + 1..self.network.len(),
            std::slice::from_ref(&z.values),
            Mode::Eval,
        )?;
        Ok(scores_from(out.into_iter().next().expect("one output")))
    }

    pub fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.source_digest != self.digest {
            return Err(Error::Provenance(format!(
                "latent produced by encoder {} but this encoder is {}",
                z.source_digest.short(12),
                self.digest.short(12)
            )));
        }
        if z.shape() != self.latent_shape() {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match encoder output {:?}",
                z.shape(),
                self.latent_shape()
            )));
        }
        Ok(())
    }
}
