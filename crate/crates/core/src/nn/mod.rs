//! Minimal deterministic tensor and neural-network kernels with gradients.

pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use kernels::ConvGeom;
pub use optim::Sgd;
pub use tape::{Tape, Var};
pub use tensor::{FeatureMap, Map2, Real, Tensor};

/// Epsilon inside the frozen normalization's `sqrt(var + eps)`.
pub const NORM_EPS: f64 = 1e-5;
/// Default guard of [`channel_l2_normalize`].
pub const L2_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu6,
}

/// Per-channel normalization with frozen statistics plus a learnable affine.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNorm<T: Real = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> FrozenNorm<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Weights of one convolution + frozen norm + activation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T: Real = f32> {
    /// `out_ch × in_ch/groups × kh × kw`
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub norm: Option<FrozenNorm<T>>,
    pub groups: usize,
    pub activation: Activation,
}

impl<T: Real> ConvBlockParams<T> {
    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.shape().len() != 4 {
            return Err(Error::config("conv kernel must be rank 4"));
        }
        let oc = self.out_channels();
        if self.groups == 0 || oc % self.groups != 0 {
            return Err(Error::config(format!(
                "groups {} must divide out channels {oc}",
                self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != oc {
                return Err(Error::config("bias length must equal out channels"));
            }
        }
        if let Some(n) = &self.norm {
            if [&n.scale, &n.shift, &n.mean, &n.var].iter().any(|t| t.len() != oc) {
                return Err(Error::config("norm parameters must have one entry per out channel"));
            }
            if n.var.data().iter().any(|&v| v < T::zero()) {
                return Err(Error::config("norm variance must be non-negative"));
            }
        }
        Ok(())
    }

    /// Number of stored scalars (kernel, bias and the four norm vectors).
    pub fn num_scalars(&self) -> usize {
        self.kernel.len()
            + self.bias.as_ref().map_or(0, |b| b.len())
            + self.norm.as_ref().map_or(0, |n| 4 * n.scale.len())
    }

    pub fn cast<U: Real>(&self) -> ConvBlockParams<U> {
        ConvBlockParams {
            kernel: self.kernel.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
            norm: self.norm.as_ref().map(|n| FrozenNorm {
                scale: n.scale.cast(),
                shift: n.shift.cast(),
                mean: n.mean.cast(),
                var: n.var.cast(),
            }),
            groups: self.groups,
            activation: self.activation,
        }
    }
}

/// Tape handles of a [`ConvBlockParams`] registered for one forward pass.
#[derive(Clone, Debug)]
pub struct ConvBlockVars {
    pub kernel: Var,
    pub bias: Option<Var>,
    pub norm: Option<(Var, Var)>,
}

impl ConvBlockVars {
    /// Registers the block's learnable tensors as parameters (`trainable`) or constants.
    pub fn register<T: Real>(tape: &mut Tape<T>, p: &ConvBlockParams<T>, trainable: bool) -> Self {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let kernel = put(&p.kernel);
        let bias = p.bias.as_ref().map(&mut put);
        let norm = p.norm.as_ref().map(|n| (put(&n.scale), put(&n.shift)));
        Self { kernel, bias, norm }
    }

    /// Parameter handles in a fixed order: kernel, bias, norm scale, norm shift.
    pub fn params(&self) -> Vec<Var> {
        let mut v = vec![self.kernel];
        v.extend(self.bias);
        if let Some((s, b)) = self.norm {
            v.extend([s, b]);
        }
        v
    }
}

/// Records conv → frozen norm → activation on the tape.
pub fn conv_block_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ConvBlockParams<T>,
    vars: &ConvBlockVars,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let mut y = tape.conv2d(x, vars.kernel, vars.bias, stride, padding, p.groups)?;
    if let (Some(n), Some((s, b))) = (&p.norm, vars.norm) {
        y = tape.frozen_norm(y, s, b, n.mean.data(), n.var.data(), T::of(NORM_EPS))?;
    }
    if p.activation == Activation::Relu6 {
        y = tape.relu6(y)?;
    }
    Ok(y)
}

/// Convolution followed by frozen normalization and activation.
pub fn conv_block_forward<T: Real>(x: &Tensor<T>, p: &ConvBlockParams<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    p.validate()?;
    if !(1..=2).contains(&stride) {
        return Err(Error::config(format!("stride must be 1 or 2, got {stride}")));
    }
    let (c, h, w) = x.chw()?;
    if c != p.in_channels() {
        return Err(Error::config(format!(
            "block expects {} input channels, got {c}",
            p.in_channels()
        )));
    }
    let geom = ConvGeom::new(c, p.out_channels(), p.groups, p.kernel_hw(), stride, padding, (h, w))
        .ok_or_else(|| Error::config("kernel larger than padded input"))?;
    let mut out = kernels::conv2d_forward(x.data(), p.kernel.data(), p.bias.as_ref().map(|b| b.data()), &geom);
    let plane = geom.out_h * geom.out_w;
    if let Some(n) = &p.norm {
        let f = kernels::norm_factors(n.mean.data(), n.var.data(), T::of(NORM_EPS));
        let (s, b) = (n.scale.data(), n.shift.data());
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (f[ch].0 * *v + f[ch].1) * s[ch] + b[ch];
            }
        }
    }
    if p.activation == Activation::Relu6 {
        out.iter_mut().for_each(|v| *v = kernels::relu6(*v));
    }
    Tensor::new(vec![p.out_channels(), geom.out_h, geom.out_w], out)?.ensure_finite("conv_block_forward")
}

/// Scales each spatial position's channel vector to unit L2 norm.
///
/// Positions whose norm is below `eps` are divided by `eps` instead, so
/// their norm stays below one and an all-zero vector stays zero.
pub fn channel_l2_normalize<T: Real>(f: &FeatureMap<T>, eps: T) -> FeatureMap<T> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let (out, _) = tape::channel_l2_normalize_raw(f.tensor.data(), c, h * w, eps);
    FeatureMap {
        layer: f.layer,
        tensor: Tensor::new(vec![c, h, w], out).expect("shape preserved"),
    }
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn bilinear_resize(m: &Map2, out_h: usize, out_w: usize) -> Result<Map2> {
    if m.height == 0 || m.width == 0 || m.data.is_empty() {
        return Err(Error::config("cannot resize an empty map"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be at least 1×1"));
    }
    Map2::new(out_h, out_w, kernels::resize_plane(&m.data, m.height, m.width, out_h, out_w))
}

/// Resizes every channel of a `C×H×W` tensor.
pub fn resize_channels(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in t.data().chunks(h * w) {
        out.extend(kernels::resize_plane(plane, h, w, out_h, out_w));
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
