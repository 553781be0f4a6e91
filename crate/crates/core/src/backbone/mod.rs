//! Tiny inverted-residual backbones: construction, indexed forward passes,
//! trimming, prefix freezing, layer-group selection and weight archives.

pub mod archive;
pub mod groups;
pub mod pretrain;
pub mod spec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{conv_block_forward, conv_block_on_tape, Activation, ConvBlockParams, ConvBlockVars, FeatureMap, FrozenNorm, Real, Tape, Tensor, Var};
pub use groups::{paste_shift, select_layer_group, GroupMode, LayerGroup, DEFAULT_REF_MAC_FRACTIONS};
pub use pretrain::{pretrain_teacher, PretrainConfig, PretrainReport};
pub use spec::{BackboneSpec, ConvShape, LayerKind, LayerShape, LayerTrace};

/// Backbone weights for the contiguous layer range `first..=spec.last_index`.
///
/// A full network has `first == 0`; a student suffix starts after the
/// shared prefix and consumes the activation of layer `first - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f32> {
    spec: BackboneSpec,
    first: usize,
    layers: Vec<Vec<ConvBlockParams<T>>>,
    /// Layers with index `< frozen_until` receive no gradient (0: nothing frozen).
    pub frozen_until: usize,
}

/// Tape handles for every stored layer of a [`Backbone`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub layers: Vec<Vec<ConvBlockVars>>,
    trainable: Vec<bool>,
}

impl BackboneVars {
    /// Handles of all trainable parameters, in [`Backbone::trainable_params_mut`] order.
    pub fn trainable_params(&self) -> Vec<Var> {
        self.layers
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .flat_map(|(l, _)| l.iter().flat_map(ConvBlockVars::params))
            .collect()
    }

    /// Handles of every parameter (trainable or not).
    pub fn all_params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.iter().flat_map(ConvBlockVars::params)).collect()
    }
}

fn conv_strides(shape: &LayerShape) -> Vec<usize> {
    match shape.kind {
        LayerKind::StemConv | LayerKind::HeadConv => vec![shape.stride],
        LayerKind::InvertedResidual if shape.expansion == 1 => vec![shape.stride, 1],
        LayerKind::InvertedResidual => vec![1, shape.stride, 1],
    }
}

fn init_block<T: Real>(rng: &mut ChaCha8Rng, conv: &ConvShape) -> ConvBlockParams<T> {
    let g = conv.geom;
    let fan_in = (g.in_per_group() * g.kh * g.kw) as f64;
    let gain = if conv.activation == Activation::Relu6 { 6.0 } else { 3.0 };
    let bound = (gain / fan_in).sqrt();
    let kernel = (0..g.weight_len()).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    ConvBlockParams {
        kernel: Tensor::new(vec![g.out_ch, g.in_per_group(), g.kh, g.kw], kernel).expect("kernel shape"),
        bias: None,
        norm: Some(FrozenNorm::identity(g.out_ch)),
        groups: g.groups,
        activation: conv.activation,
    }
}

impl<T: Real> Backbone<T> {
    /// Layers `first..=spec.last_index` initialized with fan-in-scaled uniform weights.
    pub fn build_range(spec: &BackboneSpec, first: usize, seed: u64) -> Result<Self> {
        let trace = spec.trace(spec.input_hw)?;
        if first > spec.last_index {
            return Err(Error::config(format!("first layer {first} beyond last index {}", spec.last_index)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = trace[first..]
            .iter()
            .map(|l| l.convs.iter().map(|c| init_block(&mut rng, c)).collect())
            .collect();
        Ok(Self {
            spec: spec.clone(),
            first,
            layers,
            frozen_until: 0,
        })
    }

    /// Assembles a backbone from existing per-layer parameters, checking them against `spec`.
    pub fn from_parts(spec: BackboneSpec, first: usize, layers: Vec<Vec<ConvBlockParams<T>>>, frozen_until: usize) -> Result<Self> {
        let trace = spec.trace(spec.input_hw)?;
        if first + layers.len() != trace.len() {
            return Err(Error::config(format!(
                "expected {} layers from index {first}, got {}",
                trace.len().saturating_sub(first),
                layers.len()
            )));
        }
        for (t, params) in trace[first..].iter().zip(&layers) {
            if t.convs.len() != params.len() {
                return Err(Error::config(format!("layer {}: wrong number of convolutions", t.index)));
            }
            for (c, p) in t.convs.iter().zip(params) {
                p.validate()?;
                let g = c.geom;
                if p.kernel.shape() != [g.out_ch, g.in_per_group(), g.kh, g.kw] || p.groups != g.groups {
                    return Err(Error::config(format!(
                        "layer {}: kernel shape {:?} does not match spec",
                        t.index,
                        p.kernel.shape()
                    )));
                }
            }
        }
        Ok(Self {
            spec,
            first,
            layers,
            frozen_until,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn first_layer(&self) -> usize {
        self.first
    }

    pub fn last_layer(&self) -> usize {
        self.spec.last_index
    }

    pub fn layers(&self) -> &[Vec<ConvBlockParams<T>>] {
        &self.layers
    }

    /// Parameters of layer `index` (absolute index).
    pub fn layer(&self, index: usize) -> Option<&[ConvBlockParams<T>]> {
        index.checked_sub(self.first).and_then(|i| self.layers.get(i)).map(|v| v.as_slice())
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Vec<ConvBlockParams<T>>> {
        index.checked_sub(self.first).and_then(move |i| self.layers.get_mut(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().flatten().map(ConvBlockParams::num_scalars).sum()
    }

    pub fn param_bytes(&self) -> usize {
        4 * self.num_scalars()
    }

    pub fn with_frozen_until(mut self, frozen_until: usize) -> Self {
        self.frozen_until = frozen_until;
        self
    }

    /// Drops every layer after `last` from execution and accounting.
    pub fn trim(&self, last: usize) -> Result<Self> {
        if last < self.first {
            return Err(Error::config(format!("cannot trim below the first stored layer {}", self.first)));
        }
        let spec = self.spec.truncated(last)?;
        Ok(Self {
            spec,
            first: self.first,
            layers: self.layers[..=last - self.first].to_vec(),
            frozen_until: self.frozen_until,
        })
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            spec: self.spec.clone(),
            first: self.first,
            layers: self.layers.iter().map(|l| l.iter().map(|p| p.cast()).collect()).collect(),
            frozen_until: self.frozen_until,
        }
    }

    fn is_trainable(&self, index: usize) -> bool {
        index >= self.frozen_until
    }

    /// Registers all stored layers; frozen layers (or all, when `trainable` is false) become constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> BackboneVars {
        let mut flags = Vec::with_capacity(self.layers.len());
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let t = trainable && self.is_trainable(self.first + i);
                flags.push(t);
                l.iter().map(|p| ConvBlockVars::register(tape, p, t)).collect()
            })
            .collect();
        BackboneVars { layers, trainable: flags }
    }

    /// Mutable trainable tensors in the order of [`BackboneVars::trainable_params`].
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let first = self.first;
        let frozen = self.frozen_until;
        self.layers
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| first + i >= frozen)
            .flat_map(|(_, l)| {
                l.iter_mut().flat_map(|p| {
                    let mut v = vec![&mut p.kernel];
                    v.extend(p.bias.as_mut());
                    if let Some(n) = p.norm.as_mut() {
                        v.push(&mut n.scale);
                        v.push(&mut n.shift);
                    }
                    v
                })
            })
            .collect()
    }

    /// Sets each frozen normalization's statistics to the per-channel mean and
    /// variance of its convolution output over `inputs`, layer by layer, so
    /// every normalized activation starts near zero mean and unit variance.
    pub fn calibrate_norms(&mut self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::config("calibration needs at least one input"));
        }
        let mut acts: Vec<Tensor<T>> = inputs.to_vec();
        for local in 0..self.layers.len() {
            let shape = self.spec.layers[self.first + local].clone();
            let strides = conv_strides(&shape);
            let mut ys = acts.clone();
            for (j, &stride) in strides.iter().enumerate() {
                let p = &mut self.layers[local][j];
                let pad = p.kernel_hw().0 / 2;
                if p.norm.is_some() {
                    let raw_block = ConvBlockParams {
                        norm: None,
                        activation: Activation::None,
                        ..p.clone()
                    };
                    let raw: Vec<Tensor<T>> = ys.iter().map(|y| conv_block_forward(y, &raw_block, stride, pad)).collect::<Result<_>>()?;
                    let oc = p.out_channels();
                    let plane = raw[0].len() / oc;
                    let count = (plane * raw.len()) as f64;
                    let mut mean = vec![0.0f64; oc];
                    let mut sq = vec![0.0f64; oc];
                    for r in &raw {
                        for (ch, chunk) in r.data().chunks(plane).enumerate() {
                            for v in chunk {
                                let v = v.to_f64().unwrap_or(0.0);
                                mean[ch] += v;
                                sq[ch] += v * v;
                            }
                        }
                    }
                    let norm = p.norm.as_mut().expect("checked above");
                    for ch in 0..oc {
                        let m = mean[ch] / count;
                        norm.mean.data_mut()[ch] = T::of(m);
                        norm.var.data_mut()[ch] = T::of((sq[ch] / count - m * m).max(0.0));
                    }
                }
                let p = &self.layers[local][j];
                ys = ys.iter().map(|y| conv_block_forward(y, p, stride, pad)).collect::<Result<_>>()?;
            }
            let residual = shape.kind == LayerKind::InvertedResidual && shape.stride == 1 && acts[0].shape()[0] == shape.out_channels;
            if residual {
                for (y, x) in ys.iter_mut().zip(&acts) {
                    y.data_mut().iter_mut().zip(x.data()).for_each(|(a, &b)| *a = *a + b);
                }
            }
            acts = ys;
        }
        Ok(())
    }

    /// Runs one layer on the tape.
    pub fn layer_on_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, index: usize, x: Var) -> Result<Var> {
        let local = index
            .checked_sub(self.first)
            .filter(|&i| i < self.layers.len())
            .ok_or_else(|| Error::config(format!("layer {index} is not stored in this backbone")))?;
        let shape = &self.spec.layers[index];
        let strides = conv_strides(shape);
        let mut y = x;
        for ((p, v), &s) in self.layers[local].iter().zip(&vars.layers[local]).zip(&strides) {
            let pad = p.kernel_hw().0 / 2;
            y = conv_block_on_tape(tape, y, p, v, s, pad)?;
        }
        let in_ch = tape.value(x).shape()[0];
        if shape.kind == LayerKind::InvertedResidual && shape.stride == 1 && in_ch == shape.out_channels {
            y = tape.add(x, y)?;
        }
        Ok(y)
    }

    /// Runs layers `self.first..=upto` from `input`, returning the handles of the requested taps
    /// and of the final layer.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, input: Var, upto: usize, taps: &[usize]) -> Result<(Vec<Var>, Var)> {
        self.forward_range_on_tape(tape, vars, input, self.first, upto, taps)
    }

    /// Like [`Self::forward_on_tape`] but starting at layer `from`, whose input is `input`.
    pub fn forward_range_on_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, input: Var, from: usize, upto: usize, taps: &[usize]) -> Result<(Vec<Var>, Var)> {
        self.check_taps(taps, upto)?;
        if from < self.first || from > upto {
            return Err(Error::config(format!("cannot run layers {from}..={upto} of a backbone starting at {}", self.first)));
        }
        if let Some(&t) = taps.first().filter(|&&t| t < from) {
            return Err(Error::config(format!("tap {t} precedes the first executed layer {from}")));
        }
        let mut x = input;
        let mut out = Vec::with_capacity(taps.len());
        let mut next_tap = taps.iter().peekable();
        for index in from..=upto {
            x = self.layer_on_tape(tape, vars, index, x)?;
            if next_tap.peek() == Some(&&index) {
                out.push(x);
                next_tap.next();
            }
        }
        Ok((out, x))
    }

    fn check_taps(&self, taps: &[usize], upto: usize) -> Result<()> {
        if upto > self.spec.last_index {
            return Err(Error::config(format!(
                "layer {upto} is beyond the built depth {}",
                self.spec.last_index
            )));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("taps must be strictly increasing"));
        }
        if let Some(&t) = taps.iter().find(|&&t| t < self.first || t > upto) {
            return Err(Error::config(format!(
                "tap {t} outside the executed layers {}..={upto}",
                self.first
            )));
        }
        Ok(())
    }

    /// Feature maps at `taps`, computed in a single pass from `input`
    /// (the image for a full network, the layer `first - 1` activation for a suffix).
    pub fn forward_collect(&self, input: &Tensor<T>, taps: &[usize]) -> Result<Vec<FeatureMap<T>>> {
        let Some(&upto) = taps.last() else {
            return Ok(Vec::new());
        };
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(input.clone());
        let (vs, _) = self.forward_on_tape(&mut tape, &vars, x, upto, taps)?;
        Ok(taps
            .iter()
            .zip(vs)
            .map(|(&layer, v)| FeatureMap {
                layer,
                tensor: tape.value(v).clone(),
            })
            .collect())
    }

    /// Output of the last built layer.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.spec.last_index;
        Ok(self.forward_collect(input, &[last])?.remove(0).tensor)
    }
}

/// Deterministically initialized full backbone.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Backbone> {
    Backbone::build_range(spec, 0, seed)
}
