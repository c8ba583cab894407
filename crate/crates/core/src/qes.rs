//! Layer-by-layer training of the detector toward target energies.
//!
//! Layer `i` is trained with layers `1..=i` quantized, layers `1..i`
//! frozen and layers after `i` left at full precision. Since the frozen
//! prefix is fixed, the inputs of layer `i` are computed once per layer and
//! reused every epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::checkpoint::round_to_storage;
use crate::detector::DetectorState;
use crate::error::{bail, Error, Result};
use crate::numerics::{Tape, Tensor4};
use crate::quant::{fake_quantize, QuantGranularity, QuantSpec};

/// How natural and adversarial batches share an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// One natural and one adversarial batch per step, both loss terms summed.
    #[default]
    Paired,
    /// Separate steps, natural first, then adversarial.
    Alternating,
}

/// Update rule for the layer weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// SGD, with heavy-ball momentum when `momentum > 0`.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999); `momentum` is ignored.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_n: Vec<f64>,
    pub lambda_a: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub bits: u32,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub batch_mode: BatchMode,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_depth(3)
    }
}

impl TrainConfig {
    /// Targets 0.1 (natural) and 0.9, 1.3, 2.0 (adversarial) with learning
    /// rates 0.005, 0.002, 0.002. Deeper detectors keep adding 0.7 to the
    /// adversarial target and reuse the last learning rate.
    pub fn for_depth(depth: usize) -> Self {
        let base_a = [0.9, 1.3, 2.0];
        let base_lr = [0.005, 0.002, 0.002];
        let lambda_a = (0..depth)
            .map(|i| base_a.get(i).copied().unwrap_or(2.0 + 0.7 * (i as f64 - 2.0)))
            .collect();
        let learning_rates = (0..depth).map(|i| base_lr[i.min(2)]).collect();
        Self {
            lambda_n: vec![0.1; depth],
            lambda_a,
            learning_rates,
            epochs: 500,
            batch_size: 200,
            bits: 16,
            momentum: 0.0,
            batch_mode: BatchMode::Paired,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }

    /// Settings for small training sets: the same targets and batch size,
    /// Adam with 4× the learning rates, and 100 epochs.
    pub fn desk_scale(depth: usize) -> Self {
        let mut cfg = Self::for_depth(depth);
        cfg.learning_rates.iter_mut().for_each(|lr| *lr *= 4.0);
        cfg.optimizer = Optimizer::Adam;
        cfg.epochs = 100;
        cfg
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_n", &self.lambda_n),
            ("lambda_a", &self.lambda_a),
            ("learning_rates", &self.learning_rates),
        ] {
            if v.len() != depth {
                bail!(Config, "{name} has {} entries for a {depth}-layer detector", v.len());
            }
            if v.iter().any(|x| !x.is_finite()) {
                bail!(Config, "{name} must be finite");
            }
        }
        for i in 0..depth {
            if self.lambda_a[i] <= self.lambda_n[i] {
                bail!(
                    Config,
                    "layer {}: adversarial target {} must exceed natural target {}",
                    i + 1,
                    self.lambda_a[i],
                    self.lambda_n[i]
                );
            }
            if i > 0 && self.lambda_a[i] <= self.lambda_a[i - 1] {
                bail!(
                    Config,
                    "adversarial targets must increase with depth: layer {} has {} after {}",
                    i + 1,
                    self.lambda_a[i],
                    self.lambda_a[i - 1]
                );
            }
            if self.learning_rates[i] < 0.0 {
                bail!(Config, "layer {} learning rate is negative", i + 1);
            }
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        QuantSpec::new(self.bits)?;
        Ok(())
    }
}

/// `y·(e_nat − λ_n)² + (1 − y)·(e_adv − λ_a)²` for a label `y ∈ {0, 1}`.
pub fn qes_loss(e_nat: f64, e_adv: f64, lambda_n: f64, lambda_a: f64, y: u8) -> Result<f64> {
    if [e_nat, e_adv, lambda_n, lambda_a].iter().any(|v| !v.is_finite()) {
        bail!(InvalidArgument, "loss inputs must be finite");
    }
    match y {
        1 => Ok((e_nat - lambda_n).powi(2)),
        0 => Ok((e_adv - lambda_a).powi(2)),
        _ => bail!(InvalidArgument, "label must be 0 or 1, got {y}"),
    }
}

/// Snapshot passed to a [`TrainObserver`] after every epoch.
#[derive(Debug, Clone)]
pub struct EpochEvent<'a> {
    pub layer: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Per-layer bit widths in effect for this epoch's forward passes.
    pub bits: &'a [Option<u32>],
    pub frozen: &'a [bool],
    /// SHA-256 over the weights of layers `1..layer`.
    pub prefix_hash: String,
}

pub trait TrainObserver {
    fn on_epoch(&mut self, event: &EpochEvent<'_>);
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochEvent<'_>) {}
}

impl<F: FnMut(&EpochEvent<'_>)> TrainObserver for F {
    fn on_epoch(&mut self, event: &EpochEvent<'_>) {
        self(event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub epoch_losses: Vec<f64>,
    /// Mean energy of this layer over the whole natural / adversarial set
    /// after training.
    pub nat_energy: f64,
    pub adv_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub layers: Vec<LayerReport>,
}

/// SHA-256 over the weights of layers `1..=upto`.
pub fn weights_hash(d: &DetectorState, upto: usize) -> String {
    let mut h = Sha256::new();
    for w in &d.weights[..upto] {
        for v in w.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Input of `layer` for every sample: the frozen prefix output, quantized
/// per sample when the detector quantizes activations.
fn layer_inputs(d: &DetectorState, layer: usize, x: &Tensor4, bits: u32) -> Result<Tensor4> {
    const CHUNK: usize = 256;
    let n = x.shape().n;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut h = x.batch_range(start, end);
        for l in 1..layer {
            let pre = d.layer_pre_activation(l, &h)?;
            h = d.layer_output(l, pre);
        }
        if d.quantize_activations {
            h = fake_quantize(&h, bits, QuantGranularity::PerSample)?.0;
        }
        parts.push(h);
        start = end;
    }
    let refs: Vec<&Tensor4> = parts.iter().collect();
    Tensor4::concat(&refs)
}

/// Mean energy of layer `i` over a cached input set.
fn mean_energy(d: &DetectorState, layer: usize, inputs: &Tensor4, bits: u32) -> Result<f64> {
    let l = &d.spec.layers[layer - 1];
    let qw = crate::quant::quantize_tensor(d.weights(layer), &QuantSpec::new(bits)?);
    let n = inputs.shape().n;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let pre = crate::numerics::conv2d(&inputs.batch_range(start, end), &qw, None, l.stride, l.padding)?;
        total += pre.data().iter().map(|v| v.abs()).sum::<f64>();
        start = end;
    }
    Ok(total / (n * d.spec.geometries()?[layer - 1].out_shape(1).numel()) as f64)
}

/// One loss term: `(E − λ)²` on a batch, recorded on `tape`.
fn energy_term(
    tape: &mut Tape,
    qw: crate::numerics::Var,
    input: Tensor4,
    stride: usize,
    padding: usize,
    target: f64,
) -> Result<crate::numerics::Var> {
    let x = tape.constant(input);
    let z = tape.conv2d(x, qw, None, stride, padding)?;
    let e = tape.abs_mean(z)?;
    tape.squared_error(e, target)
}

/// Trains layer `layer` (1-based) of `d`. Layers before it must already be
/// frozen. On return the layer is frozen and its weights are rounded to
/// storage precision.
pub fn train_layer(
    mut d: DetectorState,
    layer: usize,
    x_nat: &Tensor4,
    x_adv: &Tensor4,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(DetectorState, LayerReport)> {
    let depth = d.depth();
    cfg.validate(depth)?;
    if layer == 0 || layer > depth {
        bail!(InvalidArgument, "layer {layer} outside [1, {depth}]");
    }
    if let Some(i) = d.frozen[..layer - 1].iter().position(|f| !f) {
        bail!(InvalidArgument, "layer {} must be trained and frozen before layer {layer}", i + 1);
    }
    if x_nat.shape() != x_adv.shape() {
        bail!(
            Shape,
            "natural set {} and adversarial set {} must be aligned",
            x_nat.shape(),
            x_adv.shape()
        );
    }
    if x_nat.shape().n == 0 {
        bail!(InvalidArgument, "empty training set");
    }
    let q = QuantSpec::new(cfg.bits)?;
    for (i, slot) in d.quant.iter_mut().enumerate() {
        *slot = (i < layer).then_some(q);
    }
    let in_nat = layer_inputs(&d, layer, x_nat, cfg.bits)?;
    let in_adv = layer_inputs(&d, layer, x_adv, cfg.bits)?;

    let spec = d.spec.layers[layer - 1];
    let (lambda_n, lambda_a, lr) = (
        cfg.lambda_n[layer - 1],
        cfg.lambda_a[layer - 1],
        cfg.learning_rates[layer - 1],
    );
    let n = x_nat.shape().n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(layer as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![0.0; d.weights(layer).len()];
    let mut second = vec![0.0; d.weights(layer).len()];
    let mut t = 0i32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let groups: Vec<Vec<(&Tensor4, f64)>> = match cfg.batch_mode {
                BatchMode::Paired => vec![vec![(&in_nat, lambda_n), (&in_adv, lambda_a)]],
                BatchMode::Alternating => vec![vec![(&in_nat, lambda_n)], vec![(&in_adv, lambda_a)]],
            };
            for group in groups {
                let mut tape = Tape::new();
                let w = tape.param(d.weights(layer).clone());
                let qw = tape.fake_quant(w, cfg.bits, QuantGranularity::PerTensor)?;
                let mut terms = Vec::with_capacity(2);
                for (inputs, target) in group {
                    terms.push(energy_term(
                        &mut tape,
                        qw,
                        inputs.select(idx),
                        spec.stride,
                        spec.padding,
                        target,
                    )?);
                }
                let loss = tape.sum(&terms)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += value;
                steps += 1;
                let g = tape.backward(loss)?.take(w);
                let mut weights = d.weights[layer - 1].clone();
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for ((wi, gi), vi) in weights.data_mut().iter_mut().zip(g.data()).zip(&mut velocity) {
                            *vi = cfg.momentum * *vi + gi;
                            *wi -= lr * *vi;
                        }
                    }
                    Optimizer::Adam => {
                        const B1: f64 = 0.9;
                        const B2: f64 = 0.999;
                        t += 1;
                        let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
                        for (((wi, gi), m), v) in weights
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(&mut velocity)
                            .zip(&mut second)
                        {
                            *m = B1 * *m + (1.0 - B1) * gi;
                            *v = B2 * *v + (1.0 - B2) * gi * gi;
                            *wi -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                        }
                    }
                }
                if !weights.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                d.weights[layer - 1] = weights;
            }
        }
        // Mean over batches of the natural plus adversarial term.
        let pairs = match cfg.batch_mode {
            BatchMode::Paired => steps,
            BatchMode::Alternating => steps / 2,
        };
        let loss = total / pairs.max(1) as f64;
        epoch_losses.push(loss);
        observer.on_epoch(&EpochEvent {
            layer,
            epoch,
            loss,
            bits: &d.bits(),
            frozen: &d.frozen,
            prefix_hash: weights_hash(&d, layer - 1),
        });
    }

    d.weights[layer - 1] = round_to_storage(&d.weights[layer - 1]);
    d.frozen[layer - 1] = true;
    let nat_energy = mean_energy(&d, layer, &in_nat, cfg.bits)?;
    let adv_energy = mean_energy(&d, layer, &in_adv, cfg.bits)?;
    Ok((
        d,
        LayerReport {
            layer,
            epoch_losses,
            nat_energy,
            adv_energy,
        },
    ))
}

/// Trains every layer in order and returns the detector with all layers
/// quantized to `cfg.bits`.
pub fn qes_train(
    mut d: DetectorState,
    x_nat: &Tensor4,
    x_adv: &Tensor4,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(DetectorState, TrainReport)> {
    cfg.validate(d.depth())?;
    if x_nat.shape().n != x_adv.shape().n {
        bail!(
            InvalidArgument,
            "natural and adversarial sets differ in length: {} vs {}",
            x_nat.shape().n,
            x_adv.shape().n
        );
    }
    d.frozen = vec![false; d.depth()];
    let mut layers = Vec::with_capacity(d.depth());
    for layer in 1..=d.depth() {
        let (next, report) = train_layer(d, layer, x_nat, x_adv, cfg, observer)?;
        d = next;
        layers.push(report);
    }
    d.set_all_bits(Some(cfg.bits))?;
    Ok((d, TrainReport { layers }))
}
