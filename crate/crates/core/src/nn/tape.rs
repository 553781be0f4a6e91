//! Reverse-mode autodiff over a recorded list of operations.
//!
//! A [`Tape`] owns every intermediate value. Leaves registered with
//! `requires_grad = false` act as constants: no gradient flows into them
//! and operations depending only on constants are not differentiated.

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    FrozenNorm {
        x: Var,
        scale: Var,
        shift: Var,
        factors: Vec<(T, T)>,
    },
    Relu6(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    ChannelL2Normalize {
        x: Var,
        /// Per-position divisor `max(norm, eps)` and whether the norm was above eps.
        denom: Vec<(T, bool)>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it is a parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a constant leaf regardless of the tensor's flag.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let t = Tensor::new(shape, value)?.ensure_finite(op_name(&op))?;
        Ok(self.push(t, op, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let wshape = self.value(w).shape().to_vec();
        let [oc, ipg, kh, kw] = wshape[..] else {
            return Err(Error::config(format!("conv weight must be rank 4, got {wshape:?}")));
        };
        if ipg * groups != c {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {c}",
                ipg * groups
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != oc {
                return Err(Error::config("conv bias length differs from out channels"));
            }
        }
        let geom = ConvGeom::new(c, oc, groups, (kh, kw), stride, pad, (h, wd))
            .ok_or_else(|| Error::config(format!("invalid conv geometry for input {c}×{h}×{wd}")))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record(out, vec![oc, geom.out_h, geom.out_w], Op::Conv { x, w, bias, geom }, &inputs)
    }

    /// Normalization with fixed statistics followed by a learnable affine.
    pub fn frozen_norm(&mut self, x: Var, scale: Var, shift: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if [self.value(scale).len(), self.value(shift).len(), mean.len(), var.len()]
            .iter()
            .any(|&n| n != c)
        {
            return Err(Error::config("normalization parameters do not match channel count"));
        }
        let factors = kernels::norm_factors(mean, var, eps);
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let (a, o) = factors[ch];
            for v in chunk {
                *v = (a * *v + o) * s[ch] + b[ch];
            }
        }
        self.record(out, vec![c, h, w], Op::FrozenNorm { x, scale, shift, factors }, &[x, scale, shift])
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::relu6(v)).collect();
        let shape = t.shape().to_vec();
        self.record(out, shape, Op::Relu6(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::config(format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.record(out, shape, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.record(out, shape, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.record(out, shape, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * k).collect();
        let shape = t.shape().to_vec();
        self.record(out, shape, Op::Scale(x, k), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.record(vec![s], vec![], Op::Sum(x), &[x])
    }

    /// Divides every spatial position's channel vector by `max(norm, eps)`.
    pub fn channel_l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (out, denom) = channel_l2_normalize_raw(self.value(x).data(), c, h * w, eps);
        self.record(out, vec![c, h, w], Op::ChannelL2Normalize { x, denom }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = T::of((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        self.record(out, vec![c], Op::GlobalAvgPool(x), &[x])
    }

    /// `w·x + b` for a vector `x` and a `K×C` matrix `w`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let c = self.value(x).len();
        let ws = self.value(w).shape().to_vec();
        let [k, wc] = ws[..] else {
            return Err(Error::config("linear weight must be rank 2"));
        };
        if wc != c || self.value(b).len() != k {
            return Err(Error::config("linear layer shape mismatch"));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = (0..k)
            .map(|r| bv[r] + wv[r * c..(r + 1) * c].iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>())
            .collect();
        self.record(out, vec![k], Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits).data();
        if target >= l.len() {
            return Err(Error::config("class index out of range"));
        }
        let m = l.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = l.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / z).collect();
        let loss = -(l[target] - m - z.ln());
        self.record(vec![loss], vec![], Op::SoftmaxCrossEntropy { logits, target, probs }, &[logits])
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    ///
    /// A parameter that does not influence `loss` gets an all-zero gradient.
    pub fn gradients(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::config("gradients require a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(params
            .iter()
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                match grads.get(p.0).and_then(|g| g.clone()) {
                    Some(g) if self.nodes[p.0].requires_grad => Tensor::new(shape, g).expect("gradient shape"),
                    _ => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, bias, geom } => {
                if self.requires_grad(*x) {
                    let gx = kernels::conv2d_backward_input(g, self.value(*w).data(), geom);
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let gw = kernels::conv2d_backward_weight(g, self.value(*x).data(), geom);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let plane = geom.out_h * geom.out_w;
                        let gb = g.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::FrozenNorm { x, scale, shift, factors } => {
                let xv = self.value(*x).data();
                let s = self.value(*scale).data();
                let plane = xv.len() / factors.len();
                if self.requires_grad(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(j, &d)| d * factors[j / plane].0 * s[j / plane])
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*scale) {
                    let gs = factors
                        .iter()
                        .enumerate()
                        .map(|(ch, &(a, o))| {
                            let r = ch * plane..(ch + 1) * plane;
                            g[r.clone()].iter().zip(&xv[r]).map(|(&d, &v)| d * (a * v + o)).sum()
                        })
                        .collect();
                    self.accumulate(grads, *scale, gs);
                }
                if self.requires_grad(*shift) {
                    let gb = g.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *shift, gb);
                }
            }
            Op::Relu6(x) => {
                let six = T::of(6.0);
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() && v < six { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.iter().map(|&d| d * *k).collect()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::ChannelL2Normalize { x, denom } => {
                let y = node.value.data();
                let positions = denom.len();
                let c = y.len() / positions;
                let mut gx = vec![T::zero(); y.len()];
                for (p, &(d, above)) in denom.iter().enumerate() {
                    if above {
                        // (I - y yᵀ) g / norm
                        let dot: T = (0..c).map(|ch| y[ch * positions + p] * g[ch * positions + p]).sum();
                        for ch in 0..c {
                            let j = ch * positions + p;
                            gx[j] = (g[j] - y[j] * dot) / d;
                        }
                    } else {
                        for ch in 0..c {
                            let j = ch * positions + p;
                            gx[j] = g[j] / d;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let n = self.value(*x).len() / g.len();
                let inv = T::one() / T::of(n as f64);
                let gx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, n)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let c = xv.len();
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); c];
                    for (r, &d) in g.iter().enumerate() {
                        for (o, &wv) in gx.iter_mut().zip(&wv[r * c..(r + 1) * c]) {
                            *o = *o + d * wv;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let gw = g.iter().flat_map(|&d| xv.iter().map(move |&v| d * v)).collect();
                    self.accumulate(grads, *w, gw);
                }
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                let gl = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| g[0] * (if k == *target { p - T::one() } else { p }))
                    .collect();
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv { .. } => "conv2d",
        Op::FrozenNorm { .. } => "frozen_norm",
        Op::Relu6(_) => "relu6",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::ChannelL2Normalize { .. } => "channel_l2_normalize",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::Linear { .. } => "linear",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

/// Channel-wise L2 normalization of a `C×positions` buffer.
pub(crate) fn channel_l2_normalize_raw<T: Real>(x: &[T], c: usize, positions: usize, eps: T) -> (Vec<T>, Vec<(T, bool)>) {
    let mut out = x.to_vec();
    let mut denom = Vec::with_capacity(positions);
    for p in 0..positions {
        let norm = (0..c).map(|ch| x[ch * positions + p].powi(2)).sum::<T>().sqrt();
        let above = norm > eps;
        let d = if above { norm } else { eps };
        for ch in 0..c {
            out[ch * positions + p] = x[ch * positions + p] / d;
        }
        denom.push((d, above));
    }
    (out, denom)
}
