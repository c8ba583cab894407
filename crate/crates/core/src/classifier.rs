//! Small CNN classifiers used as the attack source and as the cloud model.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::checkpoint::{round_to_storage, Checkpoint, ModelKind};
use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::numerics::{Shape4, Tape, Tensor4, Var};

/// Anything that maps an image batch to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Logits shaped `(n, classes, 1, 1)`.
    fn logits(&self, x: &Tensor4) -> Result<Tensor4>;

    /// Records the forward pass on `tape` so gradients can reach `x`.
    /// Models without a differentiable path keep the default.
    fn record_logits(&self, _tape: &mut Tape, _x: Var) -> Result<Var> {
        Err(Error::InvalidArgument(
            "gradient unavailable: classifier is not differentiable".into(),
        ))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class and logits for every batch item.
pub fn predict(model: &dyn Classifier, x: &Tensor4) -> Result<(Vec<usize>, Tensor4)> {
    let logits = model.logits(x)?;
    let classes = (0..logits.shape().n)
        .map(|i| argmax(logits.item_slice(i)))
        .collect();
    Ok((classes, logits))
}

/// Predictions in chunks of `chunk` items.
pub fn predict_classes(model: &dyn Classifier, x: &Tensor4, chunk: usize) -> Result<Vec<usize>> {
    let n = x.shape().n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        out.extend(predict(model, &x.batch_range(start, end))?.0);
        start = end;
    }
    Ok(out)
}

pub fn accuracy(model: &dyn Classifier, data: &Dataset) -> Result<f64> {
    let pred = predict_classes(model, &data.images, 256)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierPreset {
    Small,
    Wide,
}

impl ClassifierPreset {
    fn widths(self) -> [usize; 4] {
        match self {
            ClassifierPreset::Small => [16, 32, 64, 64],
            ClassifierPreset::Wide => [24, 48, 96, 96],
        }
    }
}

impl fmt::Display for ClassifierPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierPreset::Small => "small",
            ClassifierPreset::Wide => "wide",
        })
    }
}

impl FromStr for ClassifierPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ClassifierPreset::Small),
            "wide" => Ok(ClassifierPreset::Wide),
            _ => Err(Error::InvalidArgument(format!("unknown classifier preset {s:?}"))),
        }
    }
}

/// Conv stack with ReLUs, global average pool and a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<ClassifierPreset>,
    /// (channels, height, width)
    pub input: [usize; 3],
    pub convs: Vec<ConvLayer>,
    pub num_classes: usize,
}

impl ClassifierArch {
    /// Four 3×3 convolutions (strides 1, 2, 2, 2) then pool and head.
    pub fn preset(preset: ClassifierPreset, input: [usize; 3], num_classes: usize) -> Self {
        let w = preset.widths();
        let strides = [1, 2, 2, 2];
        let mut c = input[0];
        let convs = w
            .iter()
            .zip(strides)
            .map(|(&out, stride)| {
                let l = ConvLayer {
                    in_channels: c,
                    out_channels: out,
                    kernel: 3,
                    stride,
                    padding: 1,
                };
                c = out;
                l
            })
            .collect();
        Self {
            preset: Some(preset),
            input,
            convs,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "classifier needs at least two classes");
        }
        let mut c = self.input[0];
        for (i, l) in self.convs.iter().enumerate() {
            if l.in_channels != c {
                bail!(Config, "conv {} expects {} channels, gets {c}", i + 1, l.in_channels);
            }
            c = l.out_channels;
        }
        Ok(())
    }

    fn feature_channels(&self) -> usize {
        self.convs.last().map_or(self.input[0], |l| l.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub arch: ClassifierArch,
    pub conv_weights: Vec<Tensor4>,
    pub conv_biases: Vec<Tensor4>,
    pub head_weight: Tensor4,
    pub head_bias: Tensor4,
    pub metadata: serde_json::Value,
}

struct ParamVars {
    conv_w: Vec<Var>,
    conv_b: Vec<Var>,
    head_w: Var,
    head_b: Var,
}

impl ClassifierState {
    /// He-uniform conv weights, zero biases.
    pub fn random(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Shape4, bound: f64| {
            Tensor4::from_raw(
                shape,
                (0..shape.numel()).map(|_| rng.random_range(-bound..=bound)).collect(),
            )
        };
        let conv_weights = arch
            .convs
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
                uniform(
                    Shape4::new(l.out_channels, l.in_channels, l.kernel, l.kernel),
                    (6.0 / fan_in).sqrt(),
                )
            })
            .collect();
        let f = arch.feature_channels();
        let head_weight = uniform(Shape4::new(arch.num_classes, f, 1, 1), 1.0 / (f as f64).sqrt());
        Ok(Self::assemble(arch, conv_weights, head_weight))
    }

    /// All weights and biases zero: every input yields uniform logits.
    pub fn zeros(arch: ClassifierArch) -> Result<Self> {
        arch.validate()?;
        let conv_weights = arch
            .convs
            .iter()
            .map(|l| Tensor4::zeros(Shape4::new(l.out_channels, l.in_channels, l.kernel, l.kernel)))
            .collect();
        let head_weight = Tensor4::zeros(Shape4::new(arch.num_classes, arch.feature_channels(), 1, 1));
        Ok(Self::assemble(arch, conv_weights, head_weight))
    }

    fn assemble(arch: ClassifierArch, conv_weights: Vec<Tensor4>, head_weight: Tensor4) -> Self {
        let conv_biases = arch
            .convs
            .iter()
            .map(|l| Tensor4::zeros(Shape4::new(1, l.out_channels, 1, 1)))
            .collect();
        let head_bias = Tensor4::zeros(Shape4::new(1, arch.num_classes, 1, 1));
        Self {
            arch,
            conv_weights,
            conv_biases,
            head_weight,
            head_bias,
            metadata: serde_json::Value::Null,
        }
    }

    fn params(&self) -> Vec<&Tensor4> {
        let mut v: Vec<&Tensor4> = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            v.push(w);
            v.push(b);
        }
        v.push(&self.head_weight);
        v.push(&self.head_bias);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4> {
        let mut v: Vec<&mut Tensor4> = Vec::new();
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_biases.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor4| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let conv_w = self.conv_weights.iter().map(&mut leaf).collect();
        let conv_b = self.conv_biases.iter().map(&mut leaf).collect();
        let head_w = leaf(&self.head_weight);
        let head_b = leaf(&self.head_bias);
        ParamVars {
            conv_w,
            conv_b,
            head_w,
            head_b,
        }
    }

    fn record(&self, tape: &mut Tape, x: Var, p: &ParamVars) -> Result<Var> {
        // Inputs in [0, 1] are mapped to [-1, 1].
        let scaled = tape.scale(x, 2.0);
        let mut h = tape.offset(scaled, -1.0);
        for (i, l) in self.arch.convs.iter().enumerate() {
            h = tape.conv2d(h, p.conv_w[i], Some(p.conv_b[i]), l.stride, l.padding)?;
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h);
        tape.conv2d(pooled, p.head_w, Some(p.head_b), 1, 0)
    }

    fn check_input(&self, s: Shape4) -> Result<()> {
        let [c, h, w] = self.arch.input;
        if (s.c, s.h, s.w) != (c, h, w) {
            bail!(Shape, "classifier expects items of ({c}, {h}, {w}), got {s}");
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut named = Vec::new();
        for (i, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            named.push((format!("conv{}.weight", i + 1), w));
            named.push((format!("conv{}.bias", i + 1), b));
        }
        named.push(("head.weight".to_string(), &self.head_weight));
        named.push(("head.bias".to_string(), &self.head_bias));
        Checkpoint::new(
            ModelKind::Classifier,
            serde_json::to_value(&self.arch).expect("arch serializes"),
            named,
            Vec::new(),
            self.metadata.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != ModelKind::Classifier {
            bail!(Config, "checkpoint holds a {:?}, not a classifier", ck.header.kind);
        }
        let arch: ClassifierArch = serde_json::from_value(ck.header.architecture.clone())
            .map_err(|e| Error::Config(format!("bad classifier architecture: {e}")))?;
        arch.validate()?;
        let mut state = Self::zeros(arch)?;
        let n = state.arch.convs.len();
        for i in 0..n {
            state.conv_weights[i] = ck.tensor(&format!("conv{}.weight", i + 1))?;
            state.conv_biases[i] = ck.tensor(&format!("conv{}.bias", i + 1))?;
        }
        state.head_weight = ck.tensor("head.weight")?;
        state.head_bias = ck.tensor("head.bias")?;
        let fresh = Self::zeros(state.arch.clone())?;
        for (a, b) in state.params().iter().zip(fresh.params()) {
            if a.shape() != b.shape() {
                bail!(Shape, "stored tensor {} does not fit architecture ({})", a.shape(), b.shape());
            }
        }
        state.metadata = ck.header.metadata.clone();
        Ok(state)
    }

    pub fn fingerprint(&self) -> String {
        self.to_checkpoint().fingerprint()
    }

    pub fn rounded_to_storage(mut self) -> Self {
        for p in self.params_mut() {
            *p = round_to_storage(p);
        }
        self
    }
}

impl Classifier for ClassifierState {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn logits(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let vx = tape.constant(x.clone());
        let out = self.record(&mut tape, vx, &p)?;
        Ok(tape.value(out).clone())
    }

    fn record_logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let p = self.register(tape, false);
        self.record(tape, x, &p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// Cross-entropy SGD with momentum and a cosine learning-rate schedule.
pub fn train_classifier(
    arch: ClassifierArch,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierState, ClassifierReport)> {
    if cfg.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    if train.is_empty() {
        bail!(InvalidArgument, "empty training set");
    }
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= arch.num_classes) {
        bail!(InvalidArgument, "label {bad} outside [0, {})", arch.num_classes);
    }
    let mut model = ClassifierState::random(arch, cfg.seed)?;
    model.check_input(train.images.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let x = train.images.select(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let p = model.register(&mut tape, true);
            let vx = tape.constant(x);
            let logits = model.record(&mut tape, vx, &p)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let l = tape.value(loss).item()?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            total += l;
            batches += 1;
            let mut grads = tape.backward(loss)?;
            let mut vars = Vec::new();
            for (w, b) in p.conv_w.iter().zip(&p.conv_b) {
                vars.push(*w);
                vars.push(*b);
            }
            vars.push(p.head_w);
            vars.push(p.head_b);
            for ((param, var), vel) in model.params_mut().into_iter().zip(vars).zip(&mut velocity) {
                let g = grads.take(var);
                let decay = if param.shape().n == 1 { 0.0 } else { cfg.weight_decay };
                for ((w, gi), v) in param.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                    *v = cfg.momentum * *v + gi + decay * *w;
                    *w -= lr * *v;
                }
                if !param.is_finite() {
                    return Err(Error::Diverged { epoch: epoch + 1 });
                }
            }
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let model = model.rounded_to_storage();
    let train_accuracy = accuracy(&model, train)?;
    let test_accuracy = test.map(|t| accuracy(&model, t)).transpose()?;
    Ok((
        model,
        ClassifierReport {
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let shape = Shape4::new(n, 3, 8, 8);
        let mut data = Vec::with_capacity(shape.numel());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            labels.push(y);
            let base = if y == 0 { 0.3 } else { 0.7 };
            for _ in 0..shape.item_len() {
                let v: f64 = base + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        Dataset::new("blobs", Tensor4::new(shape, data).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let train = blobs(200, 1);
        let test = blobs(100, 2);
        let arch = ClassifierArch::preset(ClassifierPreset::Small, [3, 8, 8], 2);
        let cfg = ClassifierTrainConfig {
            epochs: 20,
            lr: 0.05,
            batch_size: 20,
            seed: 3,
            ..Default::default()
        };
        let (model, report) = train_classifier(arch, &train, Some(&test), &cfg).unwrap();
        assert!(report.test_accuracy.unwrap() >= 0.99, "{report:?}");
        assert_eq!(report.test_accuracy.unwrap(), accuracy(&model, &test).unwrap());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let data = blobs(400, 5);
        let arch = ClassifierArch::preset(ClassifierPreset::Small, [3, 8, 8], 2);
        let cfg = ClassifierTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (_, report) = train_classifier(arch, &data, None, &cfg).unwrap();
        // Balanced classes: any constant or random labeling scores within
        // a 3-sigma binomial band of 1/2 or exactly 1/2.
        let sigma = (0.25f64 / 400.0).sqrt();
        assert!((report.train_accuracy - 0.5).abs() <= 3.0 * sigma + 0.5 / 400.0 || report.train_accuracy == 0.5);
    }

    #[test]
    fn zero_model_ties_break_low() {
        let arch = ClassifierArch::preset(ClassifierPreset::Small, [3, 8, 8], 4);
        let m = ClassifierState::zeros(arch).unwrap();
        let x = blobs(3, 0).images;
        let (classes, logits) = predict(&m, &x).unwrap();
        assert_eq!(classes, vec![0, 0, 0]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let v = [0.3, 2.0, -1.0, 2.0];
        assert_eq!(argmax(&v), 1);
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        assert_eq!(argmax(&shifted), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = ClassifierArch::preset(ClassifierPreset::Wide, [3, 8, 8], 3);
        let m = ClassifierState::random(arch, 4).unwrap().rounded_to_storage();
        let back = ClassifierState::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(60, 8);
        let arch = ClassifierArch::preset(ClassifierPreset::Small, [3, 8, 8], 2);
        let cfg = ClassifierTrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        };
        let a = train_classifier(arch.clone(), &data, None, &cfg).unwrap().0;
        let b = train_classifier(arch, &data, None, &cfg).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let data = blobs(40, 8);
        let arch = ClassifierArch::preset(ClassifierPreset::Small, [3, 8, 8], 2);
        let cfg = ClassifierTrainConfig {
            epochs: 3,
            lr: 1e200,
            batch_size: 8,
            seed: 1,
            ..Default::default()
        };
        let err = train_classifier(arch, &data, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1 }), "{err}");
    }
}
