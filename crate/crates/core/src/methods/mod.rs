//! Anomaly detection methods sharing one score-map output type.

pub mod membank;
pub mod stfpm;

use crate::error::Result;
use crate::nn::{Map2, Tensor};

/// Per-pixel anomaly scores at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub pixel_scores: Map2,
    pub image_score: f32,
    /// Per-layer maps before combination, when the method has them.
    pub per_layer: Option<Vec<Map2>>,
    /// Conditions that make the scores suspect, such as an untrained model.
    pub warnings: Vec<String>,
}

/// Anything that turns an image into an [`AnomalyMap`].
pub trait AnomalyDetector: Sync {
    fn anomaly_map(&self, image: &Tensor) -> Result<AnomalyMap>;
}
