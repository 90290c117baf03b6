//! The inversion decoder `D: latent → image`.
//!
//! Each upsampling stage is a linearly activated 3×3 transposed convolution
//! (stride 2), batch norm, then `conv_layers` 3×3 convolutions with leaky
//! ReLU. A final 3×3 convolution with sigmoid produces RGB. The graph is a
//! single chain: there are no skip connections.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::model::write_json;
use crate::nn::{Activation, LayerKind, LayerSpec, LayerState, Mode, Network};
use crate::tensor::{array_digest, ImageSize, ImageTensor, LatentShape, LatentTensor};
use crate::trainer::TrainingRecord;

pub const CHECKPOINT_FORMAT: &str = "perceptvis-decoder/1";
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels_out: usize,
    #[serde(default = "default_convs")]
    pub conv_layers: usize,
    /// Always rejected by validation; present so configs that ask for one
    /// fail loudly instead of being silently ignored.
    #[serde(default)]
    pub skip_connection: bool,
}

fn default_convs() -> usize {
    2
}

impl StageSpec {
    pub fn new(channels_out: usize, conv_layers: usize) -> Self {
        StageSpec {
            channels_out,
            conv_layers,
            skip_connection: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_shape: LatentShape,
    pub output_size: ImageSize,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

fn default_kernel() -> [usize; 2] {
    [KERNEL, KERNEL]
}

impl DecoderConfig {
    /// Smallest number of ×2 stages reaching `output` from `latent` in both
    /// dimensions.
    pub fn required_stages(latent: LatentShape, output: ImageSize) -> usize {
        let mut n = 0;
        while (latent.width << n) < output.width || (latent.height << n) < output.height {
            n += 1;
        }
        n
    }

    /// Default layout: the forced stage count, channels starting at a
    /// quarter of the latent depth and halving per stage (floor 16), two
    /// convolutions per stage.
    pub fn with_default_stages(latent: LatentShape, output: ImageSize) -> Self {
        let n = Self::required_stages(latent, output);
        let stages = (0..n)
            .map(|i| StageSpec::new((latent.depth >> (i + 2)).max(16), 2))
            .collect();
        DecoderConfig {
            latent_shape: latent,
            output_size: output,
            stages,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            kernel: default_kernel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let LatentShape {
            width,
            height,
            depth,
        } = self.latent_shape;
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::Config("latent shape has a zero extent".into()));
        }
        if self.output_size.width == 0 || self.output_size.height == 0 {
            return Err(Error::Config("output size has a zero extent".into()));
        }
        if self.kernel != [KERNEL, KERNEL] {
            return Err(Error::Config(format!(
                "decoder kernels are fixed at 3x3, got {:?}",
                self.kernel
            )));
        }
        if !(self.leaky_slope > 0.0) {
            return Err(Error::Config("leaky slope must be positive".into()));
        }
        let n = self.stages.len();
        if n >= usize::BITS as usize
            || (width << n) < self.output_size.width
            || (height << n) < self.output_size.height
        {
            return Err(Error::Config(format!(
                "{n} upsampling stages cannot reach {}x{} from {width}x{height}",
                self.output_size.width, self.output_size.height
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.skip_connection {
                return Err(Error::Config(format!(
                    "stage {i} declares a skip connection; decoders must stay a single chain"
                )));
            }
            if s.channels_out == 0 {
                return Err(Error::Config(format!("stage {i} has zero channels")));
            }
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let leaky = Activation::LeakyRelu(self.leaky_slope);
        let mut specs = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            specs.push(LayerSpec::ConvTranspose2d {
                name: format!("stage{i}_up"),
                out_channels: stage.channels_out,
                kernel: KERNEL,
                stride: 2,
                padding: 1,
                output_padding: 1,
                activation: Activation::Identity,
            });
            specs.push(LayerSpec::BatchNorm {
                name: format!("stage{i}_bn"),
                eps: 1e-5,
                momentum: 0.1,
                activation: Activation::Identity,
            });
            for j in 0..stage.conv_layers {
                specs.push(LayerSpec::Conv2d {
                    name: format!("stage{i}_conv{j}"),
                    out_channels: stage.channels_out,
                    kernel: KERNEL,
                    stride: 1,
                    padding: Some(1),
                    activation: leaky,
                });
            }
        }
        specs.push(LayerSpec::Conv2d {
            name: "output".into(),
            out_channels: 3,
            kernel: KERNEL,
            stride: 1,
            padding: Some(1),
            activation: Activation::Sigmoid,
        });
        let n = self.stages.len();
        let (w, h) = (self.latent_shape.width << n, self.latent_shape.height << n);
        if (w, h) != (self.output_size.width, self.output_size.height) {
            specs.push(LayerSpec::CenterCrop {
                name: "crop".into(),
                width: self.output_size.width,
                height: self.output_size.height,
            });
        }
        specs
    }
}

/// A decoded image with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub values: ImageTensor,
    pub source_latent_digest: Digest,
    pub decoder_digest: Digest,
}

impl Reconstruction {
    pub fn digest(&self) -> Digest {
        self.values.digest()
    }
}

/// One node of the decoder's computation graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GraphNode {
    pub name: String,
    pub op: &'static str,
    pub upsampling: bool,
}

/// Decoder computation graph; node 0 is the latent input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    network: Network,
}

pub fn build_decoder(cfg: &DecoderConfig, seed: u64) -> Result<Decoder> {
    cfg.validate()?;
    let l = cfg.latent_shape;
    let network = Network::from_specs([l.depth, l.height, l.width], &cfg.layer_specs(), seed)?;
    debug_assert_eq!(
        network.output_shape(),
        [3, cfg.output_size.height, cfg.output_size.width]
    );
    Ok(Decoder {
        config: cfg.clone(),
        network,
    })
}

impl Decoder {
    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn digest(&self) -> Digest {
        self.network.digest()
    }

    /// Trainable tensors in the order of [`crate::nn::Gradients`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.network.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<Reconstruction> {
        Ok(self.decode_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[LatentTensor]) -> Result<Vec<Reconstruction>> {
        for z in zs {
            self.check_latent_shape(z.shape())?;
        }
        let raw: Vec<Array3<f64>> = zs.iter().map(|z| z.values.clone()).collect();
        let out = self.decode_raw(&raw)?;
        let decoder_digest = self.digest();
        out.into_iter()
            .zip(zs)
            .map(|(y, z)| {
                Ok(Reconstruction {
                    values: ImageTensor::new(y)?,
                    source_latent_digest: array_digest(&z.values),
                    decoder_digest,
                })
            })
            .collect()
    }

    /// Evaluation-mode decode of raw latent arrays.
    pub fn decode_raw(&self, zs: &[Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        self.network.forward(zs, Mode::Eval)
    }

    fn check_latent_shape(&self, shape: LatentShape) -> Result<()> {
        if shape != self.config.latent_shape {
            return Err(Error::Shape(format!(
                "decoder expects latent {:?}, got {:?}",
                self.config.latent_shape, shape
            )));
        }
        Ok(())
    }

    pub fn graph(&self) -> LayerGraph {
        let mut nodes = vec![GraphNode {
            name: "latent".into(),
            op: "input",
            upsampling: false,
        }];
        nodes.extend(self.network.layers().iter().map(|l| GraphNode {
            name: l.name.clone(),
            op: l.kind.type_name(),
            upsampling: matches!(l.kind, LayerKind::ConvTranspose2d { .. }),
        }));
        let edges = (1..nodes.len()).map(|i| (i - 1, i)).collect();
        LayerGraph { nodes, edges }
    }

    pub fn to_checkpoint(&self, training: Option<TrainingRecord>) -> DecoderCheckpoint {
        DecoderCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            layers: self.network.state(),
            decoder_digest: self.digest(),
            training,
        }
    }

    pub fn from_checkpoint(ckpt: &DecoderCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Load(format!(
                "unsupported decoder checkpoint format {:?}",
                ckpt.format
            )));
        }
        let mut dec = build_decoder(&ckpt.config, 0)?;
        dec.network.load_state(ckpt.layers.clone())?;
        if dec.digest() != ckpt.decoder_digest {
            return Err(Error::Load(format!(
                "decoder weights digest {} does not match recorded {}",
                dec.digest().short(12),
                ckpt.decoder_digest.short(12)
            )));
        }
        Ok(dec)
    }
}

/// Decoder checkpoint file: config, weights and optional training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderCheckpoint {
    pub format: String,
    pub config: DecoderConfig,
    pub layers: Vec<LayerState>,
    pub decoder_digest: Digest,
    #[serde(default)]
    pub training: Option<TrainingRecord>,
}

impl DecoderCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> DecoderConfig {
        DecoderConfig {
            latent_shape: LatentShape::new(4, 4, 8),
            output_size: ImageSize::square(32),
            stages: vec![StageSpec::new(8, 1), StageSpec::new(6, 1), StageSpec::new(4, 1)],
            leaky_slope: 0.2,
            kernel: [3, 3],
        }
    }

    #[test]
    fn stage_counts_forced_by_shape() {
        let full = DecoderConfig::with_default_stages(
            LatentShape::new(7, 7, 2048),
            ImageSize::square(224),
        );
        assert_eq!(full.stages.len(), 5);
        let channels: Vec<usize> = full.stages.iter().map(|s| s.channels_out).collect();
        assert_eq!(channels, vec![512, 256, 128, 64, 32]);
        assert_eq!(
            DecoderConfig::required_stages(LatentShape::new(4, 4, 64), ImageSize::square(32)),
            3
        );
    }

    #[test]
    fn full_scale_spatial_path() {
        let full = DecoderConfig::with_default_stages(
            LatentShape::new(7, 7, 2048),
            ImageSize::square(224),
        );
        let mut side = 7;
        let mut sides = vec![side];
        for _ in &full.stages {
            side *= 2;
            sides.push(side);
        }
        assert_eq!(sides, vec![7, 14, 28, 56, 112, 224]);
        // No crop layer when doubling lands exactly.
        assert!(!full
            .layer_specs()
            .iter()
            .any(|s| matches!(s, LayerSpec::CenterCrop { .. })));
    }

    #[test]
    fn overshoot_is_center_cropped() {
        let mut cfg = desk();
        cfg.output_size = ImageSize::new(30, 28);
        let dec = build_decoder(&cfg, 1).unwrap();
        assert_eq!(dec.network().output_shape(), [3, 28, 30]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = desk();
        cfg.stages.pop();
        assert!(matches!(build_decoder(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = desk();
        cfg.stages[1].skip_connection = true;
        assert!(matches!(build_decoder(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = desk();
        cfg.leaky_slope = 0.0;
        assert!(build_decoder(&cfg, 0).is_err());
        let mut cfg = desk();
        cfg.kernel = [5, 5];
        assert!(build_decoder(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_decoder(&desk(), 9).unwrap();
        let b = build_decoder(&desk(), 9).unwrap();
        let c = build_decoder(&desk(), 10).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn layer_roles_follow_architecture() {
        let dec = build_decoder(&desk(), 1).unwrap();
        let layers = dec.network().layers();
        for (i, l) in layers.iter().enumerate() {
            match l.kind {
                LayerKind::ConvTranspose2d { kernel, .. } => {
                    assert_eq!(kernel, 3);
                    assert_eq!(l.activation, Activation::Identity);
                    assert!(matches!(layers[i + 1].kind, LayerKind::BatchNorm { .. }));
                }
                LayerKind::Conv2d { kernel, .. } => {
                    assert_eq!(kernel, 3);
                    let expected = if l.name == "output" {
                        Activation::Sigmoid
                    } else {
                        Activation::LeakyRelu(0.2)
                    };
                    assert_eq!(l.activation, expected);
                }
                _ => {}
            }
        }
        assert_eq!(layers.last().unwrap().name, "output");
    }

    #[test]
    fn graph_is_a_single_chain() {
        let dec = build_decoder(&desk(), 1).unwrap();
        let g = dec.graph();
        assert_eq!(g.edges.len(), g.nodes.len() - 1);
        assert!(g.edges.iter().enumerate().all(|(i, &(a, b))| a == i && b == i + 1));
        assert_eq!(g.nodes.iter().filter(|n| n.upsampling).count(), 3);
    }

    #[test]
    fn decode_validates_shape_and_range() {
        let dec = build_decoder(&desk(), 1).unwrap();
        let d = Digest::of_bytes(b"enc");
        let z = LatentTensor::new(Array3::zeros((8, 4, 4)), d).unwrap();
        let y = dec.decode(&z).unwrap();
        assert!(y.values.values().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = LatentTensor::new(Array3::zeros((8, 2, 2)), d).unwrap();
        assert!(matches!(dec.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dec = build_decoder(&desk(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dec.json");
        dec.to_checkpoint(None).save(&path).unwrap();
        let back = Decoder::from_checkpoint(&DecoderCheckpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.digest(), dec.digest());
    }
}
