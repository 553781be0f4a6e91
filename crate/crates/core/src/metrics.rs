//! ROC AUC, best-threshold F1 and the evaluation driver.

use serde::{Deserialize, Serialize};

use crate::data::{CategoryData, Sample};
use crate::error::{Error, Result};
use crate::methods::{AnomalyDetector, AnomalyMap};

fn check_inputs(scores: &[f32], n_labels: usize) -> Result<()> {
    if scores.len() != n_labels {
        return Err(Error::config(format!("{} scores but {n_labels} labels", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("scores contain NaN"));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks for ties.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += tied_pos * twice_midrank;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Best F1 over thresholds at the distinct scores (predicting `score >= t`),
/// returning `(f1, t)` with the smallest optimal threshold.
pub fn f1_best_threshold(scores: &[f32], truth: &[bool]) -> Result<(f64, f32)> {
    check_inputs(scores, truth.len())?;
    let positives = truth.iter().filter(|&&t| t).count() as u128;
    if positives == 0 {
        return Err(Error::UndefinedMetric("F1 needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Best so far as the fraction 2·tp / (predicted + positives).
    let mut best = (0u128, 1u128, f32::INFINITY);
    let (mut tp, mut predicted) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            tp += u128::from(truth[order[i]]);
            predicted += 1;
            i += 1;
        }
        let (num, den) = (2 * tp, predicted + positives);
        if num * best.1 >= best.0 * den {
            best = (num, den, t);
        }
    }
    Ok((best.0 as f64 / best.1 as f64, best.2))
}

/// F1 of predicting `score >= threshold`.
pub fn f1_at(scores: &[f32], truth: &[bool], threshold: f32) -> f64 {
    let (mut tp, mut predicted, mut positives) = (0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truth) {
        let p = s >= threshold;
        tp += usize::from(p && t);
        predicted += usize::from(p);
        positives += usize::from(t);
    }
    if predicted + positives == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (predicted + positives) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub pixel_f1: f64,
    pub pixel_auroc: f64,
    pub image_f1: f64,
    pub image_auroc: f64,
    /// Pixel threshold attaining `pixel_f1`.
    pub best_threshold: f32,
}

/// Scores and labels pooled over several images.
#[derive(Clone, Debug, Default)]
pub struct ScorePool {
    pub pixel_scores: Vec<f32>,
    pub pixel_labels: Vec<bool>,
    pub image_scores: Vec<f32>,
    pub image_labels: Vec<bool>,
}

impl ScorePool {
    pub fn push(&mut self, sample: &Sample, map: &AnomalyMap) -> Result<()> {
        let m = &sample.mask;
        let s = &map.pixel_scores;
        if (m.height, m.width) != (s.height, s.width) {
            return Err(Error::data(format!(
                "{}: mask is {}×{} but the anomaly map is {}×{}",
                sample.name, m.height, m.width, s.height, s.width
            )));
        }
        if sample.is_anomalous() && m.area() == 0 {
            return Err(Error::data(format!("{}: anomalous sample without a mask", sample.name)));
        }
        self.pixel_scores.extend_from_slice(&s.data);
        self.pixel_labels.extend_from_slice(&m.data);
        self.image_scores.push(map.image_score);
        self.image_labels.push(sample.is_anomalous());
        Ok(())
    }

    pub fn extend(&mut self, other: &ScorePool) {
        self.pixel_scores.extend_from_slice(&other.pixel_scores);
        self.pixel_labels.extend_from_slice(&other.pixel_labels);
        self.image_scores.extend_from_slice(&other.image_scores);
        self.image_labels.extend_from_slice(&other.image_labels);
    }

    pub fn result(&self) -> Result<EvalResult> {
        let (pixel_f1, best_threshold) = f1_best_threshold(&self.pixel_scores, &self.pixel_labels)?;
        Ok(EvalResult {
            pixel_f1,
            pixel_auroc: auroc(&self.pixel_scores, &self.pixel_labels)?,
            image_f1: f1_best_threshold(&self.image_scores, &self.image_labels)?.0,
            image_auroc: auroc(&self.image_scores, &self.image_labels)?,
            best_threshold,
        })
    }

    /// Image-level AUROC only, for test sets without anomalous pixels.
    pub fn image_auroc(&self) -> Result<f64> {
        auroc(&self.image_scores, &self.image_labels)
    }
}

/// Scores every test image of `data` and pools the results.
pub fn score_category(detector: &dyn AnomalyDetector, data: &CategoryData) -> Result<ScorePool> {
    let mut pool = ScorePool::default();
    for s in data.test() {
        pool.push(s, &detector.anomaly_map(&s.image)?)?;
    }
    Ok(pool)
}

/// Pixel metrics pool all test pixels; image metrics use each map's image score.
pub fn evaluate(detector: &dyn AnomalyDetector, data: &CategoryData) -> Result<EvalResult> {
    score_category(detector, data)?.result()
}
