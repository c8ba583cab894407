//! Detector architectures, forward evaluation and per-layer energies.
//!
//! A layer's energy is the mean magnitude of its convolution outputs taken
//! before the ReLU, averaged over batch, channel and space.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::checkpoint::{round_to_storage, Checkpoint, ModelKind};
use crate::error::{bail, Error, Result};
use crate::numerics::conv::{conv2d_with, ConvGeometry};
use crate::numerics::{Shape4, Tensor4};
use crate::quant::{quantized_forward, QuantSpec};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu_after: bool,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, relu_after: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
            relu_after,
        }
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    D1,
    D2,
    D3,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::D1, Preset::D2, Preset::D3];

    pub fn channels(self) -> [usize; 4] {
        match self {
            Preset::D1 => [3, 8, 16, 32],
            Preset::D2 => [3, 16, 32, 64],
            Preset::D3 => [3, 32, 32, 64],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D1" => Ok(Preset::D1),
            "D2" => Ok(Preset::D2),
            "D3" => Ok(Preset::D3),
            _ => Err(Error::InvalidArgument(format!("unknown detector preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// (height, width) of the expected input; channels come from layer 1.
    pub input_hw: [usize; 2],
    pub layers: Vec<LayerSpec>,
}

impl DetectorSpec {
    pub fn preset(preset: Preset, input_hw: [usize; 2]) -> Self {
        let ch = preset.channels();
        let layers = (0..3)
            .map(|i| LayerSpec::conv(ch[i], ch[i + 1], i < 2))
            .collect();
        Self {
            preset: Some(preset),
            input_hw,
            layers,
        }
    }

    /// Preset extended to `depth` layers by repeating the last width. Depth
    /// beyond 3 is only used by the architecture ablation.
    pub fn preset_with_depth(preset: Preset, input_hw: [usize; 2], depth: usize) -> Result<Self> {
        if depth == 0 {
            bail!(Config, "detector depth must be at least 1");
        }
        let mut spec = Self::preset(preset, input_hw);
        spec.layers.truncate(depth);
        while spec.layers.len() < depth {
            let c = spec.layers.last().unwrap().out_channels;
            spec.layers.push(LayerSpec::conv(c, c, false));
        }
        let n = spec.layers.len();
        for (i, l) in spec.layers.iter_mut().enumerate() {
            l.relu_after = i + 1 < n;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.layers[0].in_channels, self.input_hw[0], self.input_hw[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            bail!(Config, "detector needs at least one layer");
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                bail!(Config, "layer {} has a zero dimension", i + 1);
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.in_channels != l.out_channels {
                    bail!(
                        Config,
                        "layer {} outputs {} channels but layer {} expects {}",
                        i + 1,
                        l.out_channels,
                        i + 2,
                        next.in_channels
                    );
                }
            }
        }
        Ok(())
    }

    /// Conv geometry of every layer for a batch of one.
    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        let mut shape = self.input_shape(1);
        let mut out = Vec::with_capacity(self.depth());
        for l in &self.layers {
            let g = ConvGeometry::new(shape, l.weight_shape(), l.stride, l.padding)?;
            shape = g.out_shape(1);
            out.push(g);
        }
        Ok(out)
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight_shape().numel()).sum()
    }
}

/// Per-layer energies `E^1..E^j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergies(pub Vec<f64>);

impl LayerEnergies {
    pub fn layer(&self, i: usize) -> f64 {
        self.0[i - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean of `|z|` over all elements of a pre-activation tensor.
pub fn energy_signature(pre_activation: &Tensor4) -> Result<f64> {
    if pre_activation.is_empty() {
        bail!(Shape, "energy of an empty tensor");
    }
    Ok(mean_abs(pre_activation.data()))
}

pub(crate) fn mean_abs(data: &[f64]) -> f64 {
    data.iter().map(|v| v.abs()).sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub spec: DetectorSpec,
    pub weights: Vec<Tensor4>,
    /// `None` = full precision.
    pub quant: Vec<Option<QuantSpec>>,
    pub frozen: Vec<bool>,
    pub quantize_activations: bool,
    pub metadata: serde_json::Value,
}

impl DetectorState {
    /// Weights drawn uniformly from `±1/√fan_in`, rounded to storage
    /// precision.
    pub fn random(spec: DetectorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        spec.geometries()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = spec
            .layers
            .iter()
            .map(|l| {
                let bound = 1.0 / (l.fan_in() as f64).sqrt();
                let shape = l.weight_shape();
                let data = (0..shape.numel())
                    .map(|_| rng.random_range(-bound..=bound) as f32 as f64)
                    .collect();
                Tensor4::from_raw(shape, data)
            })
            .collect();
        Ok(Self::with_weights(spec, weights))
    }

    pub fn zeros(spec: DetectorSpec) -> Result<Self> {
        spec.validate()?;
        let weights = spec
            .layers
            .iter()
            .map(|l| Tensor4::zeros(l.weight_shape()))
            .collect();
        Ok(Self::with_weights(spec, weights))
    }

    fn with_weights(spec: DetectorSpec, weights: Vec<Tensor4>) -> Self {
        let n = spec.depth();
        Self {
            spec,
            weights,
            quant: vec![None; n],
            frozen: vec![false; n],
            quantize_activations: true,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    pub fn weights(&self, layer: usize) -> &Tensor4 {
        &self.weights[layer - 1]
    }

    pub fn set_weights(&mut self, layer: usize, w: Tensor4) -> Result<()> {
        let expected = self.spec.layers[layer - 1].weight_shape();
        if w.shape() != expected {
            bail!(Shape, "layer {layer} weights must be {expected}, got {}", w.shape());
        }
        self.weights[layer - 1] = w;
        Ok(())
    }

    /// Sets every layer to `bits`, or full precision for `None`.
    pub fn set_all_bits(&mut self, bits: Option<u32>) -> Result<()> {
        let q = bits.map(QuantSpec::new).transpose()?;
        self.quant.iter_mut().for_each(|s| *s = q);
        Ok(())
    }

    pub fn bits(&self) -> Vec<Option<u32>> {
        self.quant.iter().map(|q| q.map(|s| s.bits)).collect()
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let want = self.spec.input_shape(x.shape().n);
        if x.shape() != want {
            bail!(Shape, "detector expects input {want}, got {}", x.shape());
        }
        Ok(())
    }

    /// Pre-activation output of `layer` (1-based) for an already-prepared
    /// input (the previous layer's post-ReLU output).
    pub fn layer_pre_activation(&self, layer: usize, input: &Tensor4) -> Result<Tensor4> {
        let l = &self.spec.layers[layer - 1];
        let w = self.weights(layer);
        match &self.quant[layer - 1] {
            Some(q) => quantized_forward(w, input, q, l.stride, l.padding, self.quantize_activations),
            None => {
                let g = ConvGeometry::new(input.shape(), w.shape(), l.stride, l.padding)?;
                Ok(conv2d_with(&g, input, w, None))
            }
        }
    }

    /// Input of the following layer given this layer's pre-activation.
    pub fn layer_output(&self, layer: usize, pre: Tensor4) -> Tensor4 {
        if self.spec.layers[layer - 1].relu_after {
            pre.map(|v| v.max(0.0))
        } else {
            pre
        }
    }

    /// Batch energies of layers `1..=upto_layer` and each layer's output
    /// activation (post-ReLU where the layer has one).
    pub fn forward_with_energies(
        &self,
        x: &Tensor4,
        upto_layer: usize,
    ) -> Result<(LayerEnergies, Vec<Tensor4>)> {
        self.check_upto(upto_layer)?;
        self.check_input(x)?;
        let mut energies = Vec::with_capacity(upto_layer);
        let mut acts = Vec::with_capacity(upto_layer);
        let mut h = x.clone();
        for layer in 1..=upto_layer {
            let pre = self.layer_pre_activation(layer, &h)?;
            energies.push(energy_signature(&pre)?);
            h = self.layer_output(layer, pre);
            acts.push(h.clone());
        }
        Ok((LayerEnergies(energies), acts))
    }

    /// Per-sample energies, `[sample][layer]`, for layers `1..=upto_layer`.
    pub fn sample_energies(&self, x: &Tensor4, upto_layer: usize) -> Result<Vec<Vec<f64>>> {
        self.check_upto(upto_layer)?;
        self.check_input(x)?;
        let n = x.shape().n;
        let mut out = vec![Vec::with_capacity(upto_layer); n];
        let mut h = x.clone();
        for layer in 1..=upto_layer {
            let pre = self.layer_pre_activation(layer, &h)?;
            for (i, e) in out.iter_mut().enumerate() {
                e.push(mean_abs(pre.item_slice(i)));
            }
            h = self.layer_output(layer, pre);
        }
        Ok(out)
    }

    /// Per-sample energies computed in chunks to bound memory.
    pub fn sample_energies_chunked(
        &self,
        x: &Tensor4,
        upto_layer: usize,
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let n = x.shape().n;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            out.extend(self.sample_energies(&x.batch_range(start, end), upto_layer)?);
            start = end;
        }
        Ok(out)
    }

    fn check_upto(&self, upto: usize) -> Result<()> {
        if upto == 0 || upto > self.depth() {
            bail!(
                InvalidArgument,
                "upto_layer {upto} outside [1, {}]",
                self.depth()
            );
        }
        Ok(())
    }

    /// Weights rounded to checkpoint precision, as deployed.
    pub fn rounded_to_storage(mut self) -> Self {
        for w in &mut self.weights {
            *w = round_to_storage(w);
        }
        self
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arch = serde_json::json!({
            "spec": self.spec,
            "quantize_activations": self.quantize_activations,
        });
        let named = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("layer{}.weight", i + 1), w))
            .collect();
        Checkpoint::new(
            ModelKind::Detector,
            arch,
            named,
            self.bits(),
            self.metadata.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != ModelKind::Detector {
            bail!(Config, "checkpoint holds a {:?}, not a detector", ck.header.kind);
        }
        let spec: DetectorSpec = serde_json::from_value(ck.header.architecture["spec"].clone())
            .map_err(|e| Error::Config(format!("bad detector architecture: {e}")))?;
        spec.validate()?;
        let quantize_activations = ck.header.architecture["quantize_activations"]
            .as_bool()
            .unwrap_or(true);
        let n = spec.depth();
        if ck.header.bits.len() != n {
            bail!(Config, "checkpoint lists {} bit widths for {n} layers", ck.header.bits.len());
        }
        let mut weights = Vec::with_capacity(n);
        for (i, l) in spec.layers.iter().enumerate() {
            let w = ck.tensor(&format!("layer{}.weight", i + 1))?;
            if w.shape() != l.weight_shape() {
                bail!(Shape, "layer {} weights stored as {}", i + 1, w.shape());
            }
            weights.push(w);
        }
        let quant = ck
            .header
            .bits
            .iter()
            .map(|b| b.map(QuantSpec::new).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            weights,
            quant,
            frozen: vec![true; n],
            quantize_activations,
            metadata: ck.header.metadata.clone(),
        })
    }

    pub fn fingerprint(&self) -> String {
        self.to_checkpoint().fingerprint()
    }
}
