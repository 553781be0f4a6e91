//! Supervised pretraining of a teacher backbone with a temporary linear head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{Error, Result};
use crate::nn::{Sgd, Tape, Tensor, Var};

/// Images used to set the normalization statistics before training.
const CALIBRATION_IMAGES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f32>,
    /// Accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

struct Head {
    weight: Tensor,
    bias: Tensor,
}

fn logits(tape: &mut Tape<f32>, b: &Backbone, vars: &super::BackboneVars, head: (Var, Var), image: &Tensor) -> Result<Var> {
    let x = tape.constant(image.clone());
    let (_, feat) = b.forward_on_tape(tape, vars, x, b.last_layer(), &[])?;
    let pooled = tape.global_avg_pool(feat)?;
    tape.linear(pooled, head.0, head.1)
}

fn accuracy(b: &Backbone, head: &Head, data: &[(Tensor, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (image, label) in data {
        let mut tape = Tape::new();
        let vars = b.register(&mut tape, false);
        let h = (tape.constant(head.weight.clone()), tape.constant(head.bias.clone()));
        let out = logits(&mut tape, b, &vars, h, image)?;
        let l = tape.value(out).data();
        let pred = (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best });
        correct += usize::from(pred == *label);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Calibrates the normalization statistics of `b` on the first images, then trains it plus a temporary global-pool + linear classifier on `data`
/// and returns the backbone without the head.
pub fn pretrain_teacher(b: &Backbone, data: &[(Tensor, usize)], cfg: &PretrainConfig) -> Result<(Backbone, PretrainReport)> {
    let classes = data.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        data.iter().for_each(|(_, l)| seen[*l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::config("pretraining needs at least two classes"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let channels = b.spec().layers[b.last_layer()].out_channels;
    let bound = (1.0 / channels as f32).sqrt();
    let mut head = Head {
        weight: Tensor::new(
            vec![classes, channels],
            (0..classes * channels).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?,
        bias: Tensor::zeros(&[classes]),
    };
    let mut model = b.clone();
    if cfg.epochs > 0 {
        let calibration: Vec<Tensor> = data.iter().take(CALIBRATION_IMAGES).map(|(x, _)| x.clone()).collect();
        model.calibrate_norms(&calibration)?;
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Cosine decay settles the last epochs.
        opt.lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * epoch as f32 / cfg.epochs as f32).cos());
        let mut total = 0.0f64;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let diverged = |e: Error| Error::Training(format!("pretraining diverged at epoch {epoch}, step {step}: {e}"));
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let h = (tape.param(head.weight.clone()), tape.param(head.bias.clone()));
            let mut loss: Option<Var> = None;
            for &i in chunk {
                let out = logits(&mut tape, &model, &vars, h, &data[i].0).map_err(diverged)?;
                let l = tape.softmax_cross_entropy(out, data[i].1).map_err(diverged)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let loss = tape.scale(loss.expect("non-empty chunk"), 1.0 / chunk.len() as f32)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(Error::numeric(format!("loss {value}"))));
            }
            total += value as f64 * chunk.len() as f64;
            let mut params = vars.trainable_params();
            params.extend([h.0, h.1]);
            let grads = tape.gradients(loss, &params).map_err(diverged)?;
            let mut tensors = model.trainable_params_mut();
            tensors.push(&mut head.weight);
            tensors.push(&mut head.bias);
            opt.step(&mut tensors, &grads)?;
        }
        let mean = (total / data.len() as f64) as f32;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let train_accuracy = accuracy(&model, &head, data)?;
    Ok((
        model,
        PretrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}
