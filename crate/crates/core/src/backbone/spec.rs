//! Shape-only backbone descriptors and their per-convolution trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    StemConv,
    InvertedResidual,
    HeadConv,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::StemConv => "stem_conv",
            LayerKind::InvertedResidual => "inverted_residual",
            LayerKind::HeadConv => "head_conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stem_conv" => Ok(LayerKind::StemConv),
            "inverted_residual" => Ok(LayerKind::InvertedResidual),
            "head_conv" => Ok(LayerKind::HeadConv),
            other => Err(Error::UnsupportedKind(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    /// Expansion factor `t` of an inverted residual; 1 for plain convs.
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl LayerShape {
    pub fn conv(kind: LayerKind, out_channels: usize, stride: usize, kernel: usize) -> Self {
        Self {
            kind,
            expansion: 1,
            out_channels,
            stride,
            kernel,
        }
    }

    pub fn inverted_residual(expansion: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::InvertedResidual,
            expansion,
            out_channels,
            stride,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_hw: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub layers: Vec<LayerShape>,
    pub last_index: usize,
}

fn default_in_channels() -> usize {
    3
}

/// One convolution of a traced layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub geom: ConvGeom,
    pub activation: Activation,
}

impl ConvShape {
    pub fn macs(&self) -> u64 {
        self.geom.macs()
    }

    /// Stored scalars: kernel weights plus scale, shift, mean and variance per out channel.
    pub fn stored_scalars(&self) -> u64 {
        (self.geom.weight_len() + 4 * self.geom.out_ch) as u64
    }

    pub fn out_elems(&self) -> u64 {
        self.geom.out_len() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub index: usize,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub convs: Vec<ConvShape>,
    pub residual: bool,
}

impl LayerTrace {
    pub fn macs(&self) -> u64 {
        self.convs.iter().map(ConvShape::macs).sum()
    }

    pub fn stored_scalars(&self) -> u64 {
        self.convs.iter().map(ConvShape::stored_scalars).sum()
    }

    pub fn in_elems(&self) -> u64 {
        (self.in_ch * self.in_hw.0 * self.in_hw.1) as u64
    }

    pub fn out_elems(&self) -> u64 {
        (self.out_ch * self.out_hw.0 * self.out_hw.1) as u64
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config(format!("backbone `{}` has no layers", self.name)));
        }
        if self.last_index + 1 != self.layers.len() {
            return Err(Error::config(format!(
                "backbone `{}`: last_index {} does not match {} layers",
                self.name,
                self.last_index,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !(1..=2).contains(&l.stride) {
                return Err(Error::config(format!("layer {i}: stride must be 1 or 2")));
            }
            if l.out_channels == 0 || l.expansion == 0 || l.kernel == 0 || l.kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "layer {i}: channels and expansion must be ≥ 1 and kernel odd"
                )));
            }
            if l.kind != LayerKind::InvertedResidual && l.expansion != 1 {
                return Err(Error::config(format!("layer {i}: only inverted residuals expand")));
            }
        }
        Ok(())
    }

    /// Shapes of every layer and convolution for an input of `input_hw`.
    pub fn trace(&self, input_hw: (usize, usize)) -> Result<Vec<LayerTrace>> {
        self.validate()?;
        let mut ch = self.in_channels;
        let mut hw = input_hw;
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, l) in self.layers.iter().enumerate() {
            let mut convs = Vec::new();
            let mut conv = |in_ch, out_ch, groups, k, stride, act, hw: (usize, usize)| -> Result<(usize, usize)> {
                let geom = ConvGeom::new(in_ch, out_ch, groups, (k, k), stride, k / 2, hw).ok_or_else(|| {
                    Error::config(format!("layer {index}: input {}×{} too small", hw.0, hw.1))
                })?;
                convs.push(ConvShape { geom, activation: act });
                Ok((geom.out_h, geom.out_w))
            };
            let out_hw = match l.kind {
                LayerKind::StemConv | LayerKind::HeadConv => {
                    conv(ch, l.out_channels, 1, l.kernel, l.stride, Activation::Relu6, hw)?
                }
                LayerKind::InvertedResidual => {
                    let hidden = ch * l.expansion;
                    if l.expansion != 1 {
                        conv(ch, hidden, 1, 1, 1, Activation::Relu6, hw)?;
                    }
                    let dw_hw = conv(hidden, hidden, hidden, l.kernel, l.stride, Activation::Relu6, hw)?;
                    conv(hidden, l.out_channels, 1, 1, 1, Activation::None, dw_hw)?
                }
            };
            out.push(LayerTrace {
                index,
                kind: l.kind,
                in_ch: ch,
                out_ch: l.out_channels,
                in_hw: hw,
                out_hw,
                residual: l.kind == LayerKind::InvertedResidual && l.stride == 1 && ch == l.out_channels,
                convs,
            });
            ch = l.out_channels;
            hw = out_hw;
        }
        Ok(out)
    }

    /// Copy of this descriptor keeping layers `0..=last`.
    pub fn truncated(&self, last: usize) -> Result<Self> {
        if last > self.last_index {
            return Err(Error::config(format!(
                "cannot trim `{}` to layer {last}: last index is {}",
                self.name, self.last_index
            )));
        }
        let mut s = self.clone();
        s.layers.truncate(last + 1);
        s.last_index = last;
        Ok(s)
    }

    /// MobileNetV2 (width 1.0) at 224×224: stem = 0, 17 bottlenecks, 1×1 head = 18.
    pub fn mobilenet_v2() -> Self {
        const SETTINGS: [(usize, usize, usize, usize); 7] = [
            (1, 16, 1, 1),
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        let mut layers = vec![LayerShape::conv(LayerKind::StemConv, 32, 2, 3)];
        for (t, c, n, s) in SETTINGS {
            for i in 0..n {
                layers.push(LayerShape::inverted_residual(t, c, if i == 0 { s } else { 1 }));
            }
        }
        layers.push(LayerShape::conv(LayerKind::HeadConv, 1280, 1, 1));
        Self {
            name: "mobilenet_v2".into(),
            input_hw: (224, 224),
            in_channels: 3,
            last_index: layers.len() - 1,
            layers,
        }
    }

    /// Eight-layer inverted-residual network for 64×64 inputs (8×8 final map).
    pub fn tiny_irnet8() -> Self {
        let layers = vec![
            LayerShape::conv(LayerKind::StemConv, 8, 2, 3),
            LayerShape::inverted_residual(1, 16, 1),
            LayerShape::inverted_residual(4, 24, 2),
            LayerShape::inverted_residual(4, 24, 1),
            LayerShape::inverted_residual(4, 32, 2),
            LayerShape::inverted_residual(4, 32, 1),
            LayerShape::inverted_residual(4, 64, 1),
            LayerShape::inverted_residual(4, 64, 1),
        ];
        Self {
            name: "tiny_irnet8".into(),
            input_hw: (64, 64),
            in_channels: 3,
            last_index: layers.len() - 1,
            layers,
        }
    }

    /// Looks up a built-in descriptor by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mobilenet_v2" => Ok(Self::mobilenet_v2()),
            "tiny_irnet8" => Ok(Self::tiny_irnet8()),
            other => Err(Error::config(format!("unknown backbone `{other}`"))),
        }
    }
}
