use std::ops::Range;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Activation, Layer, LayerKind, LayerSpec, LayerState};
use crate::digest::{Digest, DigestBuilder};
use crate::error::{Error, Result};
use crate::par;

/// Normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses stored running statistics. Deterministic per sample.
    Eval,
    /// Batch norm uses the statistics of the current batch.
    Train,
}

/// Sequential network of named layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[i]` is the `(c, h, w)` input of layer `i`; the last entry is
    /// the network output.
    shapes: Vec<[usize; 3]>,
}

#[derive(Clone, Debug)]
struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Step {
    input: Vec<Array3<f64>>,
    pre: Vec<Array3<f64>>,
    batch_stats: Option<BatchStats>,
}

/// Activations recorded by a forward pass over a layer range.
#[derive(Clone, Debug)]
pub struct Trace {
    range: Range<usize>,
    mode: Mode,
    steps: Vec<Step>,
}

impl Trace {
    /// Pre-activation outputs of the last layer in the range.
    pub fn last_pre(&self) -> &[Array3<f64>] {
        &self.steps.last().expect("non-empty trace").pre
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }
}

/// Per-parameter gradient buffers mirroring a network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Default)]
pub struct BackwardOptions<'a> {
    /// The incoming gradient is w.r.t. the last layer's pre-activation
    /// output rather than its activated output.
    pub from_pre_activation: bool,
    /// Accumulate parameter gradients here; `None` keeps parameters frozen.
    pub param_grads: Option<&'a mut Gradients>,
}

impl Network {
    /// Builds a network from layer specs with seeded initialization.
    pub fn from_specs(input: [usize; 3], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {input:?} has a zero extent")));
        }
        if specs.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = vec![input];
        let mut layers = Vec::with_capacity(specs.len());
        let mut seen = std::collections::HashSet::new();
        for spec in specs {
            if !seen.insert(spec.name().to_string()) {
                return Err(Error::Config(format!("duplicate layer name {:?}", spec.name())));
            }
            let current = *shapes.last().expect("shapes");
            let (kind, act) = spec.resolve(current)?;
            let next = kind.output_shape(current).map_err(Error::Config)?;
            layers.push(Layer::init(spec.name().to_string(), kind, act, &mut rng));
            shapes.push(next);
        }
        Ok(Network { layers, shapes })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        *self.shapes.last().expect("shapes")
    }

    /// Output shape of layer `index`.
    pub fn shape_after(&self, index: usize) -> [usize; 3] {
        self.shapes[index + 1]
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Digest of every parameter and buffer together with layer names.
    pub fn digest(&self) -> Digest {
        let mut b = DigestBuilder::new();
        for layer in &self.layers {
            b.str(&layer.name);
            for p in layer.params.iter().chain(&layer.buffers) {
                b.usize(p.shape.len());
                for &d in &p.shape {
                    b.usize(d);
                }
                b.f64s(&p.data);
            }
        }
        b.finish()
    }

    pub fn state(&self) -> Vec<LayerState> {
        self.layers.iter().map(Layer::state).collect()
    }

    pub fn load_state(&mut self, states: Vec<LayerState>) -> Result<()> {
        if states.len() != self.layers.len() {
            return Err(Error::Load(format!(
                "expected weights for {} layers, found {}",
                self.layers.len(),
                states.len()
            )));
        }
        for (layer, state) in self.layers.iter_mut().zip(states) {
            layer.load_state(state)?;
        }
        Ok(())
    }

    /// Mutable access to all trainable tensors, in gradient order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut().map(|p| &mut p.data))
    }

    pub fn params(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(|p| &p.data))
    }

    pub fn forward(&self, xs: &[Array3<f64>], mode: Mode) -> Result<Vec<Array3<f64>>> {
        self.run(0..self.len(), xs, mode, false).map(|(out, _)| out)
    }

    /// Forward over `range`, recording activations for [`Network::backward`].
    pub fn forward_traced(
        &self,
        range: Range<usize>,
        xs: &[Array3<f64>],
        mode: Mode,
    ) -> Result<(Vec<Array3<f64>>, Trace)> {
        self.run(range, xs, mode, true)
            .map(|(out, trace)| (out, trace.expect("recorded")))
    }

    pub fn forward_range(
        &self,
        range: Range<usize>,
        xs: &[Array3<f64>],
        mode: Mode,
    ) -> Result<Vec<Array3<f64>>> {
        self.run(range, xs, mode, false).map(|(out, _)| out)
    }

    fn run(
        &self,
        range: Range<usize>,
        xs: &[Array3<f64>],
        mode: Mode,
        record: bool,
    ) -> Result<(Vec<Array3<f64>>, Option<Trace>)> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Argument(format!(
                "invalid layer range {range:?} for {}-layer network",
                self.len()
            )));
        }
        if xs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let expected = self.shapes[range.start];
        for x in xs {
            if x.shape() != expected {
                return Err(Error::Shape(format!(
                    "layer {:?} expects input {:?}, got {:?}",
                    self.layers[range.start].name,
                    expected,
                    x.shape()
                )));
            }
        }
        if mode == Mode::Train && self.min_norm_count(range.clone(), xs.len()) < 2 {
            return Err(Error::Argument(
                "training-mode batch norm needs at least 2 values per channel".into(),
            ));
        }
        let mut steps = Vec::new();
        let mut current: Vec<Array3<f64>> = xs.to_vec();
        for layer in &self.layers[range.clone()] {
            let (pre, stats) = match layer.kind {
                LayerKind::BatchNorm { .. } => batch_norm_forward(layer, &current, mode),
                _ => (par::map(&current, |x| layer.forward_sample(x)), None),
            };
            let act = layer.activation;
            let out: Vec<Array3<f64>> = if act == Activation::Identity {
                pre.clone()
            } else {
                par::map(&pre, |p| p.mapv(|v| act.apply(v)))
            };
            if record {
                steps.push(Step {
                    input: std::mem::replace(&mut current, out),
                    pre,
                    batch_stats: stats,
                });
            } else {
                current = out;
            }
        }
        let trace = record.then(|| Trace { range, mode, steps });
        Ok((current, trace))
    }

    /// Smallest per-channel sample count over the batch-norm layers in `range`.
    fn min_norm_count(&self, range: Range<usize>, batch: usize) -> usize {
        range
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::BatchNorm { .. }))
            .map(|i| batch * self.shapes[i][1] * self.shapes[i][2])
            .min()
            .unwrap_or(usize::MAX)
    }

    /// Reverse pass through a recorded trace. Returns the gradient w.r.t.
    /// the trace's input batch.
    pub fn backward(
        &self,
        trace: &Trace,
        grad: Vec<Array3<f64>>,
        mut opts: BackwardOptions<'_>,
    ) -> Result<Vec<Array3<f64>>> {
        let last = trace.steps.last().expect("non-empty trace");
        if grad.len() != last.pre.len() {
            return Err(Error::Shape(format!(
                "gradient batch {} does not match trace batch {}",
                grad.len(),
                last.pre.len()
            )));
        }
        for (g, p) in grad.iter().zip(&last.pre) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match output {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let mut upstream = grad;
        let n_steps = trace.steps.len();
        for (offset, step) in trace.steps.iter().enumerate().rev() {
            let index = trace.range.start + offset;
            let layer = &self.layers[index];
            let skip_activation = opts.from_pre_activation && offset + 1 == n_steps;
            let dpre: Vec<Array3<f64>> = if skip_activation || layer.activation == Activation::Identity {
                upstream
            } else {
                let act = layer.activation;
                let pairs: Vec<(Array3<f64>, &Array3<f64>)> =
                    upstream.into_iter().zip(&step.pre).collect();
                par::map(&pairs, |(g, p)| {
                    let mut d = g.clone();
                    d.zip_mut_with(p, |dv, &pv| *dv *= act.derivative(pv));
                    d
                })
            };
            let want_params = opts.param_grads.is_some() && !layer.params.is_empty();
            let (dx, pgrads) = match layer.kind {
                LayerKind::BatchNorm { .. } => {
                    batch_norm_backward(layer, step, trace.mode, &dpre, want_params)
                }
                _ => {
                    let pairs: Vec<(&Array3<f64>, &Array3<f64>)> =
                        step.input.iter().zip(&dpre).collect();
                    let per_sample =
                        par::map(&pairs, |(x, d)| layer.backward_sample(x, d, true, want_params));
                    let mut sums: Vec<Vec<f64>> = Vec::new();
                    let mut dx = Vec::with_capacity(per_sample.len());
                    for (sample_dx, g) in per_sample {
                        dx.push(sample_dx.expect("input gradient"));
                        if sums.is_empty() {
                            sums = g;
                        } else {
                            for (acc, v) in sums.iter_mut().zip(g) {
                                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    (dx, sums)
                }
            };
            if want_params {
                let target = &mut opts.param_grads.as_mut().expect("grads").layers[index];
                for (acc, g) in target.iter_mut().zip(pgrads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            upstream = dx;
        }
        Ok(upstream)
    }

    /// Folds the batch statistics recorded in a training-mode trace into the
    /// running statistics of each batch-norm layer.
    /// Replaces every batch-norm running mean and variance with the exact
    /// statistics of `xs` under frozen weights, layer by layer.
    pub fn calibrate_batch_norm(&mut self, xs: &[Array3<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Argument("calibration needs at least one input".into()));
        }
        let mut current: Vec<Array3<f64>> = xs.to_vec();
        for i in 0..self.len() {
            if let LayerKind::BatchNorm { .. } = self.layers[i].kind {
                let (c, h, w) = current[0].dim();
                let m = (current.len() * h * w) as f64;
                let mut mean = vec![0.0; c];
                for x in &current {
                    for (ch, plane) in x.outer_iter().enumerate() {
                        mean[ch] += plane.sum();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0; c];
                for x in &current {
                    for (ch, plane) in x.outer_iter().enumerate() {
                        var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let denom = if m > 1.0 { m - 1.0 } else { 1.0 };
                var.iter_mut().for_each(|v| *v /= denom);
                let layer = &mut self.layers[i];
                layer.buffers[0].data = mean;
                layer.buffers[1].data = var;
            }
            current = self.forward_range(i..i + 1, &current, Mode::Eval)?;
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, trace: &Trace) {
        if trace.mode != Mode::Train {
            return;
        }
        for (offset, step) in trace.steps.iter().enumerate() {
            let layer = &mut self.layers[trace.range.start + offset];
            if let (LayerKind::BatchNorm { momentum, .. }, Some(stats)) =
                (&layer.kind, &step.batch_stats)
            {
                let (_, h, w) = step.input[0].dim();
                let m = (step.input.len() * h * w) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let momentum = *momentum;
                let (means, vars) = layer.buffers.split_at_mut(1);
                for (r, &b) in means[0].data.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                for (r, &b) in vars[0].data.iter_mut().zip(&stats.var) {
                    *r = (1.0 - momentum) * *r + momentum * b * unbias;
                }
            }
        }
    }
}

fn batch_norm_params(layer: &Layer) -> (f64, &[f64], &[f64]) {
    let LayerKind::BatchNorm { eps, .. } = layer.kind else {
        unreachable!()
    };
    (eps, &layer.params[0].data, &layer.params[1].data)
}

fn batch_norm_forward(
    layer: &Layer,
    xs: &[Array3<f64>],
    mode: Mode,
) -> (Vec<Array3<f64>>, Option<BatchStats>) {
    let (eps, gamma, beta) = batch_norm_params(layer);
    let (c, h, w) = xs[0].dim();
    let stats = match mode {
        Mode::Train => {
            let m = (xs.len() * h * w) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for x in xs {
                for (ch, plane) in x.outer_iter().enumerate() {
                    mean[ch] += plane.sum();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for x in xs {
                for (ch, plane) in x.outer_iter().enumerate() {
                    var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            BatchStats { mean, var }
        }
        Mode::Eval => BatchStats {
            mean: layer.buffers[0].data.clone(),
            var: layer.buffers[1].data.clone(),
        },
    };
    let out = par::map(xs, |x| {
        let mut y = x.clone();
        for (ch, mut plane) in y.outer_iter_mut().enumerate() {
            let inv = 1.0 / (stats.var[ch] + eps).sqrt();
            let (m, g, b) = (stats.mean[ch], gamma[ch], beta[ch]);
            plane.mapv_inplace(|v| g * (v - m) * inv + b);
        }
        y
    });
    (out, (mode == Mode::Train).then_some(stats))
}

fn batch_norm_backward(
    layer: &Layer,
    step: &Step,
    mode: Mode,
    dpre: &[Array3<f64>],
    want_params: bool,
) -> (Vec<Array3<f64>>, Vec<Vec<f64>>) {
    let (eps, gamma, _) = batch_norm_params(layer);
    let (c, h, w) = step.input[0].dim();
    let (mean, var) = match (&step.batch_stats, mode) {
        (Some(s), Mode::Train) => (s.mean.clone(), s.var.clone()),
        _ => (layer.buffers[0].data.clone(), layer.buffers[1].data.clone()),
    };
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let m = (step.input.len() * h * w) as f64;
    // Σ dy and Σ dy·x̂ per channel.
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (x, d) in step.input.iter().zip(dpre) {
        for ch in 0..c {
            let xp = x.index_axis(ndarray::Axis(0), ch);
            let dp = d.index_axis(ndarray::Axis(0), ch);
            for (xv, dv) in xp.iter().zip(dp.iter()) {
                sum_dy[ch] += dv;
                sum_dy_xhat[ch] += dv * (xv - mean[ch]) * inv[ch];
            }
        }
    }
    let pairs: Vec<(&Array3<f64>, &Array3<f64>)> = step.input.iter().zip(dpre).collect();
    let dx = par::map(&pairs, |(x, d)| {
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let xp = x.index_axis(ndarray::Axis(0), ch);
            let dp = d.index_axis(ndarray::Axis(0), ch);
            let mut op = out.index_axis_mut(ndarray::Axis(0), ch);
            for ((o, xv), dv) in op.iter_mut().zip(xp.iter()).zip(dp.iter()) {
                *o = match mode {
                    Mode::Train => {
                        let xhat = (xv - mean[ch]) * inv[ch];
                        gamma[ch] * inv[ch] / m * (m * dv - sum_dy[ch] - xhat * sum_dy_xhat[ch])
                    }
                    Mode::Eval => gamma[ch] * inv[ch] * dv,
                };
            }
        }
        out
    });
    let grads = if want_params {
        vec![sum_dy_xhat, sum_dy]
    } else {
        vec![]
    };
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn tiny_specs() -> Vec<LayerSpec> {
        serde_json::from_str(
            r#"[
            {"type":"conv2d","name":"c1","out_channels":3,"activation":{"leaky_relu":0.2}},
            {"type":"conv_transpose2d","name":"up","out_channels":2},
            {"type":"batch_norm","name":"bn"},
            {"type":"conv2d","name":"c2","out_channels":2,"stride":2,"activation":"relu"},
            {"type":"global_avg_pool","name":"gap"},
            {"type":"dense","name":"fc","out_features":2,"activation":"sigmoid"}
        ]"#,
        )
        .unwrap()
    }

    fn sample(seed: u64, shape: [usize; 3]) -> Array3<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.random_range(-1.0..1.0))
    }

    /// Loss = Σ r ⊙ out for a fixed random r; its gradient w.r.t. out is r.
    fn probe_loss(net: &Network, xs: &[Array3<f64>], r: &[Array3<f64>], mode: Mode) -> f64 {
        let out = net.forward(xs, mode).unwrap();
        out.iter().zip(r).map(|(o, r)| (o * r).sum()).sum()
    }

    #[test]
    fn shapes_are_inferred() {
        let net = Network::from_specs([2, 4, 4], &tiny_specs(), 1).unwrap();
        assert_eq!(net.shape_after(1), [2, 8, 8]);
        assert_eq!(net.output_shape(), [2, 1, 1]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut specs = tiny_specs();
        specs.push(specs[0].clone());
        assert!(matches!(
            Network::from_specs([2, 4, 4], &specs, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = Network::from_specs([2, 4, 4], &tiny_specs(), 3).unwrap();
        let xs: Vec<_> = (0..3).map(|i| sample(10 + i, [2, 4, 4])).collect();
        let r: Vec<_> = (0..3).map(|i| sample(20 + i, [2, 1, 1])).collect();
        for mode in [Mode::Train, Mode::Eval] {
            let (_, trace) = net.forward_traced(0..net.len(), &xs, mode).unwrap();
            let mut grads = Gradients::zeros_like(&net);
            let dx = net
                .backward(
                    &trace,
                    r.clone(),
                    BackwardOptions {
                        param_grads: Some(&mut grads),
                        ..Default::default()
                    },
                )
                .unwrap();
            let h = 1e-6;
            for (li, layer_grads) in grads.layers.clone().iter().enumerate() {
                for (pi, g) in layer_grads.iter().enumerate() {
                    for k in (0..g.len()).step_by(5) {
                        let orig = net.layers[li].params[pi].data[k];
                        net.layers[li].params[pi].data[k] = orig + h;
                        let up = probe_loss(&net, &xs, &r, mode);
                        net.layers[li].params[pi].data[k] = orig - h;
                        let down = probe_loss(&net, &xs, &r, mode);
                        net.layers[li].params[pi].data[k] = orig;
                        let fd = (up - down) / (2.0 * h);
                        assert!(
                            (fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                            "{mode:?} layer {li} param {pi}[{k}]: fd {fd} vs {}",
                            g[k]
                        );
                    }
                }
            }
            let mut xp = xs.clone();
            for k in [0, 7, 19, 31] {
                let idx = [k / 16, (k / 4) % 4, k % 4];
                let orig = xp[1][idx];
                xp[1][idx] = orig + h;
                let up = probe_loss(&net, &xp, &r, mode);
                xp[1][idx] = orig - h;
                let down = probe_loss(&net, &xp, &r, mode);
                xp[1][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - dx[1][idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn eval_mode_is_per_sample() {
        let net = Network::from_specs([2, 4, 4], &tiny_specs(), 5).unwrap();
        let xs: Vec<_> = (0..3).map(|i| sample(i, [2, 4, 4])).collect();
        let batch = net.forward(&xs, Mode::Eval).unwrap();
        let single = net.forward(&xs[1..2], Mode::Eval).unwrap();
        assert_eq!(batch[1], single[0]);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut net = Network::from_specs([2, 4, 4], &tiny_specs(), 5).unwrap();
        let xs: Vec<_> = (0..4).map(|i| sample(i, [2, 4, 4])).collect();
        let before = net.digest();
        let (_, trace) = net.forward_traced(0..net.len(), &xs, Mode::Train).unwrap();
        net.update_running_stats(&trace);
        assert_ne!(net.digest(), before);
    }

    #[test]
    fn calibration_standardizes_eval_outputs() {
        let mut net = Network::from_specs([2, 4, 4], &tiny_specs(), 5).unwrap();
        let xs: Vec<_> = (0..6).map(|i| sample(10 + i, [2, 4, 4])).collect();
        net.calibrate_batch_norm(&xs).unwrap();
        // Fresh affine parameters are (1, 0), so calibrated outputs are standardized.
        let out = net.forward_range(0..3, &xs, Mode::Eval).unwrap();
        let m = (xs.len() * 8 * 8) as f64;
        for ch in 0..2 {
            let vals: Vec<f64> = out
                .iter()
                .flat_map(|o| o.index_axis(ndarray::Axis(0), ch).to_owned().into_raw_vec_and_offset().0)
                .collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert!(net.calibrate_batch_norm(&[]).is_err());
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let net = Network::from_specs([2, 4, 4], &tiny_specs(), 5).unwrap();
        let err = net.forward(&[Array3::zeros((3, 4, 4))], Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
