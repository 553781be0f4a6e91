//! Synthetic MVTec-style categories with controllable anomaly size, a loader
//! for MVTec-layout directories, and a labeled shapes task for pretraining.

mod png_io;
pub mod mvtec;
pub mod shapes;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
pub use mvtec::{generate_category, load_mvtec, write_category};
pub use shapes::{shapes_dataset, SHAPE_CLASSES};
pub use synth::{default_suite, synthesize_category};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    Stripes { period: f32, angle_deg: f32 },
    Checker { cell: f32 },
    ValueNoise { cell: f32 },
    Blobs { count: usize, radius: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    ContrastBlob,
    Scratch,
    TextureSwap,
}

impl AnomalyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyKind::ContrastBlob => "contrast_blob",
            AnomalyKind::Scratch => "scratch",
            AnomalyKind::TextureSwap => "texture_swap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Target anomalous area as a fraction of the image.
    pub size_fraction: f64,
    /// Inclusive range of separate regions per anomalous image.
    pub count: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub image_hw: (usize, usize),
    pub texture: Texture,
    /// Palette endpoints the texture interpolates between.
    pub colors: [[f32; 3]; 2],
    pub anomaly: AnomalySpec,
    pub n_train: usize,
    pub n_test_good: usize,
    pub n_test_bad: usize,
    pub seed: u64,
}

impl CategorySpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.anomaly.size_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!("size_fraction must lie in (0, 1], got {f}")));
        }
        if self.n_train < 2 {
            return Err(Error::config("a category needs at least 2 training images"));
        }
        let (lo, hi) = self.anomaly.count;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("invalid anomaly count range {lo}..={hi}")));
        }
        if self.image_hw.0 < 4 || self.image_hw.1 < 4 {
            return Err(Error::config("images must be at least 4×4"));
        }
        if self.colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("palette colors must lie in [0, 1]"));
        }
        let ok = match &self.texture {
            Texture::Stripes { period, .. } => *period > 0.0,
            Texture::Checker { cell } | Texture::ValueNoise { cell } => *cell > 0.0,
            Texture::Blobs { count, radius } => *count > 0 && *radius > 0.0,
        };
        if !ok {
            return Err(Error::config("texture parameters must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Good,
    Anomalous,
}

/// Binary pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Nearest-neighbor resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((2 * y + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((2 * x + 1) * self.width / (2 * width)).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Self { height, width, data }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
    pub defect: Option<String>,
    pub mask: Mask,
}

impl Sample {
    pub fn is_anomalous(&self) -> bool {
        self.label == Label::Anomalous
    }
}

#[derive(Clone, Debug)]
pub struct CategoryData {
    pub name: String,
    pub train: Vec<Sample>,
    pub test_good: Vec<Sample>,
    pub test_bad: Vec<Sample>,
}

impl CategoryData {
    /// Test samples, good first.
    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.test_good.iter().chain(&self.test_bad)
    }
}

/// Rounds to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(v: f32) -> f32 {
    to_u8(v) as f32 / 255.0
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
