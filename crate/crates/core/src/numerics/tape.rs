//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into the
//! parents that are tracked. Leaves registered with [`Tape::constant`] and
//! everything computed only from them carry no gradient.

use crate::error::{bail, Result};
use crate::numerics::conv::{conv2d_backward, conv2d_with, ConvGeometry};
use crate::numerics::tensor::{Shape4, Tensor4};
use crate::quant::{fake_quantize, QuantGranularity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    AbsMean(Var),
    Mean(Var),
    SquaredError(Var, f64),
    SumSquares(Var),
    Sum(Vec<Var>),
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CwMargin {
        logits: Var,
        /// (sample, positive class, negative class) entries with active hinge.
        active: Vec<(usize, usize, usize)>,
    },
    /// Straight-through: gradient passes where `pass` is true.
    FakeQuant {
        input: Var,
        pass: Option<Vec<bool>>,
    },
    /// `out[i] = input[src[i]]`, or zero when `src[i]` is `None`.
    Gather {
        input: Var,
        src: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    tracked: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
    shapes: Vec<Shape4>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor4 {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor4::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor4 {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor4::zeros(self.shapes[v.0]),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weights).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.out_c {
                bail!(
                    Shape,
                    "bias has {} entries but kernel has {} output channels",
                    self.value(b).len(),
                    geom.out_c
                );
            }
        }
        let out = conv2d_with(
            &geom,
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b).data()),
        );
        let tracked =
            self.tracked(input) || self.tracked(weights) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weights,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let t = self.tracked(x);
        self.push(out, Op::Relu(x), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), t))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let out = self.value(x).map(|v| v * alpha);
        let t = self.tracked(x);
        self.push(out, Op::Scale(x, alpha), t)
    }

    pub fn offset(&mut self, x: Var, beta: f64) -> Var {
        let out = self.value(x).map(|v| v + beta);
        let t = self.tracked(x);
        self.push(out, Op::Offset(x), t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let t = self.tracked(x);
        self.push(out, Op::Tanh(x), t)
    }

    /// Mean of absolute values over every element; a scalar.
    pub fn abs_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            bail!(Shape, "mean of an empty tensor");
        }
        let m = v.data().iter().map(|z| z.abs()).sum::<f64>() / v.len() as f64;
        let t = self.tracked(x);
        Ok(self.push(Tensor4::from_raw(Shape4::scalar(), vec![m]), Op::AbsMean(x), t))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            bail!(Shape, "mean of an empty tensor");
        }
        let m = v.mean();
        let t = self.tracked(x);
        Ok(self.push(Tensor4::from_raw(Shape4::scalar(), vec![m]), Op::Mean(x), t))
    }

    /// `(x − target)²` for a scalar `x`.
    pub fn squared_error(&mut self, x: Var, target: f64) -> Result<Var> {
        let v = self.value(x).item()?;
        let t = self.tracked(x);
        Ok(self.push(
            Tensor4::from_raw(Shape4::scalar(), vec![(v - target).powi(2)]),
            Op::SquaredError(x, target),
            t,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let t = self.tracked(x);
        self.push(
            Tensor4::from_raw(Shape4::scalar(), vec![s]),
            Op::SumSquares(x),
            t,
        )
    }

    /// Sum of scalars.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &x in xs {
            s += self.value(x).item()?;
        }
        let t = xs.iter().any(|&x| self.tracked(x));
        Ok(self.push(
            Tensor4::from_raw(Shape4::scalar(), vec![s]),
            Op::Sum(xs.to_vec()),
            t,
        ))
    }

    /// `(n, c, h, w)` → `(n, c, 1, 1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let hw = (s.h * s.w) as f64;
        let data = v
            .data()
            .chunks(s.h * s.w)
            .map(|c| c.iter().sum::<f64>() / hw)
            .collect();
        let t = self.tracked(x);
        self.push(
            Tensor4::from_raw(Shape4::new(s.n, s.c, 1, 1), data),
            Op::GlobalAvgPool(x),
            t,
        )
    }

    /// Batch-mean softmax cross-entropy of `(n, classes, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.n != labels.len() {
            bail!(
                Shape,
                "{} labels for a batch of {} logits",
                labels.len(),
                s.n
            );
        }
        let k = s.item_len();
        let mut probs = vec![0.0; v.len()];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                bail!(InvalidArgument, "label {y} out of range for {k} classes");
            }
            let z = v.item_slice(i);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|zj| (zj - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (z[j] - m).exp() / denom;
            }
            loss += denom.ln() + m - z[y];
        }
        loss /= s.n as f64;
        let t = self.tracked(logits);
        Ok(self.push(
            Tensor4::from_raw(Shape4::scalar(), vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            t,
        ))
    }

    /// Summed hinge on logit margins.
    ///
    /// Untargeted: `max(z_y − max_{j≠y} z_j, −κ)` pushes away from the true
    /// class `y`. Targeted: `max(max_{j≠t} z_j − z_t, −κ)` pulls toward `t`.
    pub fn cw_margin(
        &mut self,
        logits: Var,
        classes: &[usize],
        kappa: f64,
        targeted: bool,
    ) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.n != classes.len() {
            bail!(
                Shape,
                "{} classes for a batch of {} logits",
                classes.len(),
                s.n
            );
        }
        let k = s.item_len();
        if k < 2 {
            bail!(InvalidArgument, "margin loss needs at least two classes");
        }
        let mut total = 0.0;
        let mut active = Vec::new();
        for (i, &y) in classes.iter().enumerate() {
            if y >= k {
                bail!(InvalidArgument, "class {y} out of range for {k} classes");
            }
            let z = v.item_slice(i);
            let (other, z_other) = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, &zj)| {
                    if zj > best.1 {
                        (j, zj)
                    } else {
                        best
                    }
                });
            let (pos, neg, margin) = if targeted {
                (other, y, z_other - z[y])
            } else {
                (y, other, z[y] - z_other)
            };
            if margin > -kappa {
                total += margin;
                active.push((i, pos, neg));
            } else {
                total += -kappa;
            }
        }
        let t = self.tracked(logits);
        Ok(self.push(
            Tensor4::from_raw(Shape4::scalar(), vec![total]),
            Op::CwMargin { logits, active },
            t,
        ))
    }

    /// Symmetric uniform fake quantization with straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, bits: u32, granularity: QuantGranularity) -> Result<Var> {
        let (out, pass) = fake_quantize(self.value(x), bits, granularity)?;
        let t = self.tracked(x);
        Ok(self.push(out, Op::FakeQuant { input: x, pass }, t))
    }

    /// Index remap; see [`Op::Gather`].
    pub fn gather(&mut self, x: Var, out_shape: Shape4, src: Vec<Option<usize>>) -> Result<Var> {
        let v = self.value(x);
        if src.len() != out_shape.numel() {
            bail!(Shape, "gather map of {} for shape {}", src.len(), out_shape);
        }
        if let Some(bad) = src.iter().flatten().find(|&&i| i >= v.len()) {
            bail!(Shape, "gather index {bad} beyond input of {}", v.len());
        }
        let data = src
            .iter()
            .map(|s| s.map_or(0.0, |i| v.data()[i]))
            .collect();
        let t = self.tracked(x);
        Ok(self.push(
            Tensor4::from_raw(out_shape, data),
            Op::Gather { input: x, src },
            t,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            bail!(Shape, "backward needs a scalar loss, got shape {}", lv.shape());
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor4::from_raw(lv.shape(), vec![1.0]));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weights,
                bias,
                geom,
            } => {
                let cg = conv2d_backward(
                    geom,
                    val(*input),
                    val(*weights),
                    g,
                    want(*input),
                    want(*weights),
                    bias.is_some_and(want),
                );
                if let Some(dx) = cg.input {
                    accumulate(&mut grads[input.0], dx);
                }
                if let Some(dw) = cg.weights {
                    accumulate(&mut grads[weights.0], dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    let shape = val(*b).shape();
                    accumulate(&mut grads[b.0], Tensor4::from_raw(shape, db));
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .expect("shapes recorded together");
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Scale(x, alpha) => accumulate(&mut grads[x.0], g.map(|v| v * alpha)),
            Op::Offset(x) => accumulate(&mut grads[x.0], g.clone()),
            Op::Tanh(x) => {
                let dx = g
                    .zip_map(&node.value, |gi, yi| gi * (1.0 - yi * yi))
                    .expect("shapes recorded together");
                accumulate(&mut grads[x.0], dx);
            }
            Op::AbsMean(x) => {
                let xv = val(*x);
                let s = g.data()[0] / xv.len() as f64;
                accumulate(
                    &mut grads[x.0],
                    xv.map(|v| crate::numerics::ops::sign_scalar(v) * s),
                );
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let s = g.data()[0] / xv.len() as f64;
                accumulate(&mut grads[x.0], Tensor4::from_raw(xv.shape(), vec![s; xv.len()]));
            }
            Op::SquaredError(x, target) => {
                let xv = val(*x);
                let d = 2.0 * (xv.data()[0] - target) * g.data()[0];
                accumulate(&mut grads[x.0], Tensor4::from_raw(xv.shape(), vec![d]));
            }
            Op::SumSquares(x) => {
                let s = 2.0 * g.data()[0];
                accumulate(&mut grads[x.0], val(*x).map(|v| v * s));
            }
            Op::Sum(xs) => {
                for &x in xs {
                    if want(x) {
                        accumulate(&mut grads[x.0], g.clone());
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s.h * s.w;
                let mut d = Vec::with_capacity(s.numel());
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi / hw as f64, hw));
                }
                accumulate(&mut grads[x.0], Tensor4::from_raw(s, d));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = val(*logits).shape();
                let k = s.item_len();
                let scale = g.data()[0] / s.n as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(&mut grads[logits.0], Tensor4::from_raw(s, d));
            }
            Op::CwMargin { logits, active } => {
                let s = val(*logits).shape();
                let k = s.item_len();
                let mut d = vec![0.0; s.numel()];
                for &(i, pos, neg) in active {
                    d[i * k + pos] += g.data()[0];
                    d[i * k + neg] -= g.data()[0];
                }
                accumulate(&mut grads[logits.0], Tensor4::from_raw(s, d));
            }
            Op::FakeQuant { input, pass } => {
                let dx = match pass {
                    None => g.clone(),
                    Some(mask) => Tensor4::from_raw(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(mask)
                            .map(|(&gi, &m)| if m { gi } else { 0.0 })
                            .collect(),
                    ),
                };
                accumulate(&mut grads[input.0], dx);
            }
            Op::Gather { input, src } => {
                let s = val(*input).shape();
                let mut d = vec![0.0; s.numel()];
                for (gi, from) in g.data().iter().zip(src) {
                    if let Some(j) = from {
                        d[*j] += gi;
                    }
                }
                accumulate(&mut grads[input.0], Tensor4::from_raw(s, d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::new(
            shape,
            (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor4, f: &dyn Fn(&Tensor4) -> f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn empty_graph_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor4::full(Shape4::new(1, 1, 2, 2), 3.0).unwrap());
        let c = tape.constant(Tensor4::scalar(1.0).unwrap());
        let grads = tape.backward(c).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor4::full(Shape4::new(2, 1, 2, 2), 0.7).unwrap());
        let m = tape.mean(x).unwrap();
        let g = tape.backward(m).unwrap().wrt(x);
        assert!(g.data().iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-15));
    }

    #[test]
    fn squared_error_at_target_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0).unwrap());
        let x = tape.constant(Tensor4::full(Shape4::new(1, 1, 1, 1), 1.5).unwrap());
        let pred = tape.conv2d(x, w, None, 1, 0).unwrap();
        let loss = tape.squared_error(pred, 3.0).unwrap();
        let g = tape.backward(loss).unwrap().wrt(w);
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn small_conv_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape4::new(2, 2, 6, 6), &mut rng);
        let w1 = random(Shape4::new(3, 2, 3, 3), &mut rng);
        let b1 = random(Shape4::new(1, 3, 1, 1), &mut rng);
        let w2 = random(Shape4::new(4, 3, 3, 3), &mut rng);
        let labels = [1usize, 3];

        let forward = |x: &Tensor4, w1: &Tensor4, b1: &Tensor4, w2: &Tensor4| {
            let mut tape = Tape::new();
            let vx = tape.param(x.clone());
            let v1 = tape.param(w1.clone());
            let vb = tape.param(b1.clone());
            let v2 = tape.param(w2.clone());
            let h = tape.conv2d(vx, v1, Some(vb), 1, 1).unwrap();
            let h = tape.tanh(h);
            let h = tape.conv2d(h, v2, None, 2, 1).unwrap();
            let e = tape.abs_mean(h).unwrap();
            let e = tape.squared_error(e, 0.3).unwrap();
            let p = tape.global_avg_pool(h);
            let ce = tape.cross_entropy(p, &labels).unwrap();
            let loss = tape.sum(&[e, ce]).unwrap();
            (tape, [vx, v1, vb, v2], loss)
        };

        let (tape, vars, loss) = forward(&x, &w1, &b1, &w2);
        let grads = tape.backward(loss).unwrap();
        let params = [&x, &w1, &b1, &w2];
        for (k, p) in params.iter().enumerate() {
            let f = |t: &Tensor4| {
                let mut ps: Vec<Tensor4> = params.iter().map(|p| (*p).clone()).collect();
                ps[k] = t.clone();
                let (tape, _, loss) = forward(&ps[0], &ps[1], &ps[2], &ps[3]);
                tape.value(loss).item().unwrap()
            };
            let num = numeric_grad(p, &f, 1e-4);
            let ana = grads.wrt(vars[k]);
            for (i, (&a, &n)) in ana.data().iter().zip(&num).enumerate() {
                assert!(rel_err(a, n) < 1e-3, "param {k} index {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn relu_and_margin_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape4::new(3, 2, 4, 4), &mut rng);
        let w = random(Shape4::new(5, 2, 3, 3), &mut rng);
        let classes = [0usize, 4, 2];
        let run = |x: &Tensor4, targeted: bool| {
            let mut tape = Tape::new();
            let vx = tape.param(x.clone());
            let vw = tape.constant(w.clone());
            let h = tape.conv2d(vx, vw, None, 1, 0).unwrap();
            let h = tape.relu(h);
            let p = tape.global_avg_pool(h);
            let m = tape.cw_margin(p, &classes, 0.05, targeted).unwrap();
            let sq = tape.sum_squares(vx);
            let sq = tape.scale(sq, 0.01);
            let loss = tape.sum(&[m, sq]).unwrap();
            (tape, vx, loss)
        };
        for targeted in [false, true] {
            let (tape, vx, loss) = run(&x, targeted);
            let ana = tape.backward(loss).unwrap().wrt(vx);
            let num = numeric_grad(
                &x,
                &|t: &Tensor4| {
                    let (tape, _, l) = run(t, targeted);
                    tape.value(l).item().unwrap()
                },
                1e-6,
            );
            for (a, n) in ana.data().iter().zip(&num) {
                assert!(rel_err(*a, *n) < 1e-3, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn gather_and_sub_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(Shape4::new(1, 1, 3, 3), &mut rng);
        let src: Vec<Option<usize>> = vec![Some(4), None, Some(0), Some(4)];
        let run = |x: &Tensor4| {
            let mut tape = Tape::new();
            let vx = tape.param(x.clone());
            let gth = tape.gather(vx, Shape4::new(1, 1, 2, 2), src.clone()).unwrap();
            let c = tape.constant(Tensor4::full(Shape4::new(1, 1, 2, 2), 0.25).unwrap());
            let d = tape.sub(gth, c).unwrap();
            let d = tape.offset(d, 0.1);
            let loss = tape.sum_squares(d);
            (tape, vx, loss)
        };
        let (tape, vx, loss) = run(&x);
        let ana = tape.backward(loss).unwrap().wrt(vx);
        let num = numeric_grad(&x, &|t| {
            let (tape, _, l) = run(t);
            tape.value(l).item().unwrap()
        }, 1e-6);
        for (a, n) in ana.data().iter().zip(&num) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0).unwrap());
        let w = tape.param(Tensor4::full(Shape4::new(1, 1, 1, 1), 0.5).unwrap());
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        let m = tape.mean(y).unwrap();
        let grads = tape.backward(m).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.wrt(w).data(), &[1.0]);
    }
}
