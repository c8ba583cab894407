//! Adversarial example generation against a differentiable classifier.
//!
//! All attacks work on pixel values in `[0, 1]` and return a tensor of the
//! same shape. Stochastic attacks draw from one ChaCha stream per sample
//! (stream = dataset index), so results do not depend on how a dataset is
//! split into batches.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, Classifier};
use crate::error::{bail, Error, Result};
use crate::numerics::ops::{item_l2_norms, item_linf_norms, sign_scalar};
use crate::numerics::{Tape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "fgsm")]
    Fgsm,
    #[serde(rename = "ffgsm")]
    Ffgsm,
    #[serde(rename = "bim")]
    Bim,
    #[serde(rename = "pgd")]
    Pgd,
    #[serde(rename = "pgd-l2")]
    PgdL2,
    #[serde(rename = "mifgsm")]
    Mifgsm,
    #[serde(rename = "difgsm")]
    Difgsm,
    #[serde(rename = "tpgd")]
    Tpgd,
    #[serde(rename = "cw")]
    Cw,
    #[serde(rename = "gn")]
    Gn,
}

impl AttackKind {
    pub const ALL: [AttackKind; 10] = [
        AttackKind::Fgsm,
        AttackKind::Ffgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::PgdL2,
        AttackKind::Mifgsm,
        AttackKind::Difgsm,
        AttackKind::Tpgd,
        AttackKind::Cw,
        AttackKind::Gn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Ffgsm => "ffgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::PgdL2 => "pgd-l2",
            AttackKind::Mifgsm => "mifgsm",
            AttackKind::Difgsm => "difgsm",
            AttackKind::Tpgd => "tpgd",
            AttackKind::Cw => "cw",
            AttackKind::Gn => "gn",
        }
    }

    fn iterative(self) -> bool {
        !matches!(self, AttackKind::Fgsm | AttackKind::Ffgsm | AttackKind::Gn)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == lower || (lower == "pgdl2" && *k == AttackKind::PgdL2))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack {s:?}")))
    }
}

/// Parses a budget written as a decimal (`0.03`) or a fraction (`8/255`).
pub fn parse_eps(s: &str) -> Result<f64> {
    let bad = || Error::InvalidArgument(format!("cannot parse budget {s:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if !v.is_finite() || v < 0.0 {
        bail!(InvalidArgument, "budget must be finite and non-negative, got {s:?}");
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in pixel units (L2 radius for `pgd-l2`).
    pub eps: f64,
    pub steps: usize,
    pub alpha: f64,
    #[serde(default)]
    pub random_start: bool,
    /// Momentum decay for MIFGSM and DIFGSM.
    #[serde(default)]
    pub momentum: f64,
    /// DIFGSM: probability of applying the random translation per step.
    #[serde(default)]
    pub diversity_prob: f64,
    /// DIFGSM: the image is zero-padded by up to this many pixels and
    /// cropped back to its size.
    #[serde(default)]
    pub max_pad: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub kappa: f64,
    /// Adam learning rate for C&W.
    #[serde(default)]
    pub cw_lr: f64,
    /// Fixed TPGD target. `None` targets `(label + 1) mod classes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// Default strength for each attack: ε = 8/255 for the L∞ family,
    /// 10 steps with α = ε/4, C&W with c = 100, κ = 0 and 100 steps, GN with
    /// σ = 0.1.
    pub fn standard(kind: AttackKind) -> Self {
        let eps = 8.0 / 255.0;
        let mut cfg = Self {
            kind,
            eps,
            steps: 10,
            alpha: eps / 4.0,
            random_start: false,
            momentum: 0.0,
            diversity_prob: 0.0,
            max_pad: 0,
            sigma: 0.0,
            c: 0.0,
            kappa: 0.0,
            cw_lr: 0.0,
            target: None,
            seed: 0,
        };
        match kind {
            AttackKind::Fgsm => {
                cfg.steps = 1;
                cfg.alpha = eps;
            }
            AttackKind::Ffgsm => {
                cfg.steps = 1;
                cfg.alpha = 1.25 * eps;
                cfg.random_start = true;
            }
            AttackKind::Pgd => cfg.random_start = true,
            AttackKind::PgdL2 => {
                cfg.eps = 1.0;
                cfg.alpha = 0.2;
                cfg.random_start = true;
            }
            AttackKind::Mifgsm => cfg.momentum = 1.0,
            AttackKind::Difgsm => {
                cfg.diversity_prob = 0.5;
                cfg.max_pad = 4;
            }
            AttackKind::Cw => {
                cfg.eps = 0.0;
                cfg.alpha = 0.0;
                cfg.steps = 100;
                cfg.c = 100.0;
                cfg.cw_lr = 0.01;
            }
            AttackKind::Gn => {
                cfg.eps = 0.0;
                cfg.alpha = 0.0;
                cfg.steps = 0;
                cfg.sigma = 0.1;
            }
            AttackKind::Bim | AttackKind::Tpgd => {}
        }
        cfg
    }

    /// PGD with an L∞ budget of `eps`, 10 steps of ε/4 and a random start.
    pub fn pgd(eps: f64) -> Self {
        Self {
            eps,
            alpha: eps / 4.0,
            ..Self::standard(AttackKind::Pgd)
        }
    }

    /// Short tag such as `pgd8` or `fgsm`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Pgd => format!("pgd{}", (self.eps * 255.0).round()),
            k => k.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.eps,
            self.alpha,
            self.momentum,
            self.diversity_prob,
            self.sigma,
            self.c,
            self.kappa,
            self.cw_lr,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            bail!(Config, "attack parameters must be finite");
        }
        if self.eps < 0.0 {
            bail!(Config, "eps must be >= 0, got {}", self.eps);
        }
        if self.sigma < 0.0 {
            bail!(Config, "sigma must be >= 0, got {}", self.sigma);
        }
        if self.kind.iterative() && self.steps == 0 {
            bail!(Config, "{} needs at least one step", self.kind);
        }
        match self.kind {
            AttackKind::Bim
            | AttackKind::Pgd
            | AttackKind::PgdL2
            | AttackKind::Mifgsm
            | AttackKind::Difgsm
            | AttackKind::Tpgd
            | AttackKind::Ffgsm
                if self.alpha <= 0.0 =>
            {
                bail!(Config, "{} needs a positive step size", self.kind)
            }
            AttackKind::Difgsm if !(0.0..=1.0).contains(&self.diversity_prob) => {
                bail!(Config, "diversity probability must lie in [0, 1]")
            }
            AttackKind::Cw if self.c < 0.0 || self.cw_lr <= 0.0 => {
                bail!(Config, "C&W needs c >= 0 and a positive learning rate")
            }
            _ => Ok(()),
        }
    }
}

/// Adversarial batch plus the per-sample perturbation sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub images: Tensor4,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
}

/// Runs `cfg` on a batch whose first item is dataset sample `first_index`.
pub fn run(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    cfg: &AttackConfig,
    first_index: u64,
) -> Result<AttackOutput> {
    cfg.validate()?;
    check_batch(x, labels)?;
    let streams = Streams {
        seed: cfg.seed,
        first: first_index,
    };
    let images = match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, cfg.eps)?,
        AttackKind::Ffgsm => ffgsm(model, x, labels, cfg.eps, cfg.alpha, streams)?,
        AttackKind::Bim => pgd(model, x, labels, cfg.eps, cfg.alpha, cfg.steps, None)?,
        AttackKind::Pgd => {
            let start = cfg.random_start.then_some(streams.into());
            pgd(model, x, labels, cfg.eps, cfg.alpha, cfg.steps, start)?
        }
        AttackKind::PgdL2 => {
            let start = cfg.random_start.then_some(streams.into());
            pgd_l2(model, x, labels, cfg.eps, cfg.alpha, cfg.steps, start)?
        }
        AttackKind::Mifgsm => mifgsm(model, x, labels, cfg.eps, cfg.alpha, cfg.steps, cfg.momentum)?,
        AttackKind::Difgsm => difgsm(
            model,
            x,
            labels,
            &Diversity {
                eps: cfg.eps,
                alpha: cfg.alpha,
                steps: cfg.steps,
                momentum: cfg.momentum,
                prob: cfg.diversity_prob,
                max_pad: cfg.max_pad,
            },
            streams,
        )?,
        AttackKind::Tpgd => {
            let k = model.num_classes();
            let targets: Vec<usize> = match cfg.target {
                Some(t) if t >= k => bail!(Config, "target class {t} outside [0, {k})"),
                Some(t) => vec![t; labels.len()],
                None => labels.iter().map(|&y| (y + 1) % k).collect(),
            };
            tpgd(model, x, &targets, cfg.eps, cfg.alpha, cfg.steps)?
        }
        AttackKind::Cw => cw(model, x, labels, cfg.c, cfg.kappa, cfg.steps, cfg.cw_lr)?,
        AttackKind::Gn => gn_streams(x, cfg.sigma, streams)?,
    };
    let delta = images.zip_map(x, |a, b| a - b)?;
    Ok(AttackOutput {
        l2: item_l2_norms(&delta),
        linf: item_linf_norms(&delta),
        images,
    })
}

/// Runs `cfg` over `x` in chunks of `chunk` samples.
pub fn run_chunked(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<AttackOutput> {
    check_batch(x, labels)?;
    let n = x.shape().n;
    let chunk = chunk.max(1);
    let mut parts = Vec::new();
    let mut l2 = Vec::with_capacity(n);
    let mut linf = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let out = run(model, &x.batch_range(start, end), &labels[start..end], cfg, start as u64)?;
        l2.extend(out.l2);
        linf.extend(out.linf);
        parts.push(out.images);
        start = end;
    }
    if parts.is_empty() {
        return Ok(AttackOutput {
            images: x.clone(),
            l2,
            linf,
        });
    }
    let refs: Vec<&Tensor4> = parts.iter().collect();
    Ok(AttackOutput {
        images: Tensor4::concat(&refs)?,
        l2,
        linf,
    })
}

fn check_batch(x: &Tensor4, labels: &[usize]) -> Result<()> {
    if x.shape().n != labels.len() {
        bail!(Shape, "{} labels for a batch of {}", labels.len(), x.shape().n);
    }
    if let Some(i) = x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        bail!(InvalidArgument, "attack input value {} at {i} outside [0, 1]", x.data()[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Streams {
    seed: u64,
    first: u64,
}

impl Streams {
    fn rng(&self, item: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.first + item as u64);
        rng
    }
}

/// Gradient of the mean cross-entropy w.r.t. the input batch.
fn ce_gradient(model: &dyn Classifier, x: &Tensor4, labels: &[usize]) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let vx = tape.param(x.clone());
    let logits = model.record_logits(&mut tape, vx)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok(tape.backward(loss)?.take(vx))
}

/// Clamp into the ε-ball around `x` and then into `[0, 1]`.
fn project_linf(adv: &mut Tensor4, x: &Tensor4, eps: f64) {
    for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

fn signed_step(adv: &mut Tensor4, direction: &Tensor4, alpha: f64) {
    for (a, &g) in adv.data_mut().iter_mut().zip(direction.data()) {
        *a += alpha * sign_scalar(g);
    }
}

fn uniform_start(x: &Tensor4, eps: f64, streams: Streams) -> Tensor4 {
    let mut adv = x.clone();
    let len = x.shape().item_len();
    if len == 0 {
        return adv;
    }
    for (i, item) in adv.data_mut().chunks_mut(len).enumerate() {
        let mut rng = streams.rng(i);
        for v in item {
            if eps > 0.0 {
                *v += rng.random_range(-eps..=eps);
            }
        }
    }
    project_linf(&mut adv, x, eps);
    adv
}

/// One signed-gradient step of size ε.
pub fn fgsm(model: &dyn Classifier, x: &Tensor4, labels: &[usize], eps: f64) -> Result<Tensor4> {
    let g = ce_gradient(model, x, labels)?;
    let mut adv = x.clone();
    signed_step(&mut adv, &g, eps);
    project_linf(&mut adv, x, eps);
    Ok(adv)
}

/// Uniform random start in the ε-ball, then one step of `alpha`.
fn ffgsm(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    streams: Streams,
) -> Result<Tensor4> {
    let mut adv = uniform_start(x, eps, streams);
    let g = ce_gradient(model, &adv, labels)?;
    signed_step(&mut adv, &g, alpha);
    project_linf(&mut adv, x, eps);
    Ok(adv)
}

/// Iterated signed-gradient ascent with L∞ projection. `random_start`
/// gives the streams for a uniform initial perturbation; `None` is BIM.
pub fn pgd(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    steps: usize,
    random_start: Option<PgdStart>,
) -> Result<Tensor4> {
    let mut adv = match random_start {
        Some(s) => uniform_start(x, eps, s.streams()),
        None => x.clone(),
    };
    for _ in 0..steps {
        let g = ce_gradient(model, &adv, labels)?;
        signed_step(&mut adv, &g, alpha);
        project_linf(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Seed and first dataset index for a random PGD start.
#[derive(Debug, Clone, Copy)]
pub struct PgdStart {
    pub seed: u64,
    pub first_index: u64,
}

impl PgdStart {
    fn streams(self) -> Streams {
        Streams {
            seed: self.seed,
            first: self.first_index,
        }
    }
}

impl From<Streams> for PgdStart {
    fn from(s: Streams) -> Self {
        Self {
            seed: s.seed,
            first_index: s.first,
        }
    }
}

/// Targeted PGD: descends the cross-entropy of `targets`.
pub fn tpgd(
    model: &dyn Classifier,
    x: &Tensor4,
    targets: &[usize],
    eps: f64,
    alpha: f64,
    steps: usize,
) -> Result<Tensor4> {
    let mut adv = x.clone();
    for _ in 0..steps {
        let g = ce_gradient(model, &adv, targets)?;
        signed_step(&mut adv, &g, -alpha);
        project_linf(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Momentum iterative FGSM; the gradient is L1-normalized per sample
/// before it enters the momentum buffer.
pub fn mifgsm(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    steps: usize,
    momentum: f64,
) -> Result<Tensor4> {
    let mut adv = x.clone();
    let mut velocity = vec![0.0; x.len()];
    for _ in 0..steps {
        let g = ce_gradient(model, &adv, labels)?;
        accumulate(&mut velocity, &g, momentum);
        let dir = Tensor4::from_raw(x.shape(), velocity.clone());
        signed_step(&mut adv, &dir, alpha);
        project_linf(&mut adv, x, eps);
    }
    Ok(adv)
}

fn accumulate(velocity: &mut [f64], g: &Tensor4, momentum: f64) {
    let len = g.shape().item_len();
    if len == 0 {
        return;
    }
    for (v, gi) in velocity.chunks_mut(len).zip(g.data().chunks(len)) {
        let l1: f64 = gi.iter().map(|a| a.abs()).sum();
        for (vj, &gj) in v.iter_mut().zip(gi) {
            let n = if l1 > 0.0 { gj / l1 } else { 0.0 };
            *vj = momentum * *vj + n;
        }
    }
}

struct Diversity {
    eps: f64,
    alpha: f64,
    steps: usize,
    momentum: f64,
    prob: f64,
    max_pad: usize,
}

/// MIFGSM whose gradient is taken through a random zero-pad-and-crop of
/// the current iterate.
fn difgsm(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    d: &Diversity,
    streams: Streams,
) -> Result<Tensor4> {
    let s = x.shape();
    let mut rngs: Vec<ChaCha8Rng> = (0..s.n).map(|i| streams.rng(i)).collect();
    let mut adv = x.clone();
    let mut velocity = vec![0.0; x.len()];
    for _ in 0..d.steps {
        let src = diversity_map(s, &mut rngs, d.prob, d.max_pad);
        let mut tape = Tape::new();
        let vx = tape.param(adv.clone());
        let moved = tape.gather(vx, s, src)?;
        let logits = model.record_logits(&mut tape, moved)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let g = tape.backward(loss)?.take(vx);
        accumulate(&mut velocity, &g, d.momentum);
        let dir = Tensor4::from_raw(s, velocity.clone());
        signed_step(&mut adv, &dir, d.alpha);
        project_linf(&mut adv, x, d.eps);
    }
    Ok(adv)
}

/// Per sample, with probability `prob`: pad by `p ∈ [0, max_pad]` rows and
/// columns split randomly between the two sides, then crop a window of the
/// original size at a random offset. Otherwise the identity.
fn diversity_map(
    s: crate::numerics::Shape4,
    rngs: &mut [ChaCha8Rng],
    prob: f64,
    max_pad: usize,
) -> Vec<Option<usize>> {
    let (h, w) = (s.h as i64, s.w as i64);
    let mut src = Vec::with_capacity(s.numel());
    for (n, rng) in rngs.iter_mut().enumerate() {
        let (dy, dx) = if rng.random_bool(prob) && max_pad > 0 {
            let pad = rng.random_range(0..=max_pad) as i64;
            let (top, left) = (rng.random_range(0..=pad), rng.random_range(0..=pad));
            let (cy, cx) = (rng.random_range(0..=pad), rng.random_range(0..=pad));
            (cy - top, cx - left)
        } else {
            (0, 0)
        };
        for c in 0..s.c {
            for y in 0..h {
                for xx in 0..w {
                    let (sy, sx) = (y + dy, xx + dx);
                    src.push(if (0..h).contains(&sy) && (0..w).contains(&sx) {
                        Some(((n * s.c + c) as i64 * h * w + sy * w + sx) as usize)
                    } else {
                        None
                    });
                }
            }
        }
    }
    src
}

/// PGD under an L2 budget: steps along the L2-normalized gradient and
/// rescales the perturbation back into the ε-ball.
pub fn pgd_l2(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    eps: f64,
    alpha: f64,
    steps: usize,
    random_start: Option<PgdStart>,
) -> Result<Tensor4> {
    let len = x.shape().item_len();
    let mut adv = x.clone();
    if let Some(start) = random_start {
        let streams = start.streams();
        for (i, item) in adv.data_mut().chunks_mut(len.max(1)).enumerate() {
            let mut rng = streams.rng(i);
            let dir: Vec<f64> = (0..item.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r: f64 = rng.random::<f64>() * eps;
            if norm > 0.0 {
                for (v, d) in item.iter_mut().zip(dir) {
                    *v += r * d / norm;
                }
            }
        }
        project_l2(&mut adv, x, eps);
    }
    for _ in 0..steps {
        let g = ce_gradient(model, &adv, labels)?;
        for (a, gi) in adv.data_mut().chunks_mut(len.max(1)).zip(g.data().chunks(len.max(1))) {
            let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (aj, gj) in a.iter_mut().zip(gi) {
                    *aj += alpha * gj / norm;
                }
            }
        }
        project_l2(&mut adv, x, eps);
    }
    Ok(adv)
}

fn project_l2(adv: &mut Tensor4, x: &Tensor4, eps: f64) {
    let len = x.shape().item_len().max(1);
    for (a, o) in adv.data_mut().chunks_mut(len).zip(x.data().chunks(len)) {
        let norm = a.iter().zip(o).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let factor = if norm > eps { eps / norm } else { 1.0 };
        for (p, &q) in a.iter_mut().zip(o) {
            *p = (q + (*p - q) * factor).clamp(0.0, 1.0);
        }
    }
}

/// Carlini–Wagner L2. Optimizes `w` with `x' = (tanh w + 1)/2` under Adam,
/// minimizing `‖x' − x‖² + c·max(z_y − max_{j≠y} z_j, −κ)`. Returns, per
/// sample, the smallest-L2 iterate that was misclassified, or the last
/// iterate if none was.
pub fn cw(
    model: &dyn Classifier,
    x: &Tensor4,
    labels: &[usize],
    c: f64,
    kappa: f64,
    steps: usize,
    lr: f64,
) -> Result<Tensor4> {
    const CLIP: f64 = 1e-6;
    let s = x.shape();
    let len = s.item_len().max(1);
    let mut w = x.map(|v| (2.0 * v.clamp(CLIP, 1.0 - CLIP) - 1.0).atanh());
    let (mut m, mut v) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let (b1, b2, adam_eps) = (0.9f64, 0.999f64, 1e-8);
    let mut best_l2 = vec![f64::INFINITY; s.n];
    let mut best_data = x.data().to_vec();
    let mut last = x.clone();
    for step in 1..=steps {
        let mut tape = Tape::new();
        let vw = tape.param(w.clone());
        let t = tape.tanh(vw);
        let half = tape.scale(t, 0.5);
        let xa = tape.offset(half, 0.5);
        let xc = tape.constant(x.clone());
        let diff = tape.sub(xa, xc)?;
        let dist = tape.sum_squares(diff);
        let logits = model.record_logits(&mut tape, xa)?;
        let margin = tape.cw_margin(logits, labels, kappa, false)?;
        let weighted = tape.scale(margin, c);
        let loss = tape.sum(&[dist, weighted])?;

        let current = tape.value(xa).clone();
        let z = tape.value(logits).clone();
        for i in 0..s.n {
            if argmax(z.item_slice(i)) != labels[i] {
                let a = current.item_slice(i);
                let o = x.item_slice(i);
                let l2 = a.iter().zip(o).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                if l2 < best_l2[i] {
                    best_l2[i] = l2;
                    best_data[i * len..(i + 1) * len].copy_from_slice(a);
                }
            }
        }

        let g = tape.backward(loss)?.take(vw);
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(&mut m).zip(&mut v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + adam_eps);
        }
        last = w.map(|u| 0.5 * (u.tanh() + 1.0));
    }
    // Check the final iterate too, since the loop only scores pre-update points.
    if steps > 0 {
        let z = model.logits(&last)?;
        for i in 0..s.n {
            if argmax(z.item_slice(i)) != labels[i] {
                let a = last.item_slice(i);
                let o = x.item_slice(i);
                let l2 = a.iter().zip(o).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                if l2 < best_l2[i] {
                    best_l2[i] = l2;
                    best_data[i * len..(i + 1) * len].copy_from_slice(a);
                }
            }
        }
    }
    let mut out = last.into_data();
    for i in 0..s.n {
        if best_l2[i].is_finite() {
            out[i * len..(i + 1) * len].copy_from_slice(&best_data[i * len..(i + 1) * len]);
        }
    }
    Tensor4::new(s, out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Additive Gaussian noise, clamped to `[0, 1]`.
pub fn gn(x: &Tensor4, sigma: f64, seed: u64) -> Result<Tensor4> {
    gn_streams(x, sigma, Streams { seed, first: 0 })
}

fn gn_streams(x: &Tensor4, sigma: f64, streams: Streams) -> Result<Tensor4> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        bail!(InvalidArgument, "sigma must be finite and >= 0, got {sigma}");
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = x.clone();
    let len = x.shape().item_len().max(1);
    for (i, item) in out.data_mut().chunks_mut(len).enumerate() {
        let mut rng = streams.rng(i);
        for v in item {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
