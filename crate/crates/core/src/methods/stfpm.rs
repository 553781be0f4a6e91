//! Teacher-student feature matching, with an optional teacher prefix shared by both networks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnomalyDetector, AnomalyMap};
use crate::backbone::archive::{load_weights, save_weights};
use crate::backbone::{Backbone, BackboneVars, GroupMode, LayerGroup};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, channel_l2_normalize, FeatureMap, Map2, Real, Sgd, Tape, Tensor, Var, L2_EPS};
use crate::resources::student_start;
use crate::tensor_io;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Product,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.4,
            momentum: 0.9,
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epoch_losses: Vec<f32>,
    pub lr: f32,
    pub epochs: usize,
    /// Whether training restarted with a reduced learning rate after diverging.
    pub restarted: bool,
}

/// A frozen teacher and a trainable student compared at a layer group.
///
/// Layers `0..=shared_prefix_end` of the teacher also serve as the student's
/// first layers when `shared_prefix_end > 0`; the student stores only the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentModel {
    pub teacher: Backbone,
    pub student: Backbone,
    pub group: LayerGroup,
    pub alphas: Vec<f32>,
    pub combine: Combine,
    pub trained: bool,
}

/// Teacher taps plus the shared prefix output, from one teacher pass.
struct TeacherPass {
    /// Input of the student: the image or the shared prefix output.
    student_input: Tensor,
    /// Channel-normalized teacher features at the compared layers.
    targets: Vec<Tensor>,
}

pub fn init_model(teacher: &Backbone, group: &LayerGroup, seed: u64) -> Result<TeacherStudentModel> {
    group.validate(Some(teacher.spec()))?;
    if teacher.first_layer() != 0 {
        return Err(Error::config("the teacher must be a full backbone"));
    }
    let last = group.last();
    let mut teacher = teacher.trim(last)?;
    teacher.frozen_until = last + 1;
    let student = Backbone::build_range(teacher.spec(), student_start(group.shared_prefix_end), seed)?;
    Ok(TeacherStudentModel {
        teacher,
        student,
        group: group.clone(),
        alphas: vec![1.0; group.indices.len()],
        combine: Combine::Product,
        trained: false,
    })
}

/// Per-position `½‖a − b‖²` of two channel-normalized maps.
fn discrepancy(a: &Tensor, b: &Tensor) -> Result<Map2> {
    let (c, h, w) = a.chw()?;
    if b.shape() != a.shape() {
        return Err(Error::config("teacher and student maps differ in shape"));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for ch in 0..c {
        let (x, y) = (&a.data()[ch * plane..(ch + 1) * plane], &b.data()[ch * plane..(ch + 1) * plane]);
        for ((o, &p), &q) in out.iter_mut().zip(x).zip(y) {
            *o += (p - q) * (p - q);
        }
    }
    out.iter_mut().for_each(|v| *v *= 0.5);
    Map2::new(h, w, out)
}

/// Distillation loss of one sample on `tape`:
/// `Σ_l α_l / (H_l·W_l) · Σ_positions ½‖target − normalize(student)‖²`.
pub fn distill_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    student: &Backbone<T>,
    vars: &BackboneVars,
    input: &Tensor<T>,
    taps: &[usize],
    targets: &[Tensor<T>],
    alphas: &[T],
) -> Result<Var> {
    let x = tape.constant(input.clone());
    let upto = *taps.last().ok_or_else(|| Error::config("no compared layers"))?;
    let (feats, _) = student.forward_on_tape(tape, vars, x, upto, taps)?;
    let mut total: Option<Var> = None;
    for ((&f, target), &alpha) in feats.iter().zip(targets).zip(alphas) {
        let (_, h, w) = target.chw()?;
        let s = tape.channel_l2_normalize(f, T::of(L2_EPS))?;
        let t = tape.constant(target.clone());
        let d = tape.sub(t, s)?;
        let sq = tape.mul(d, d)?;
        let sum = tape.sum(sq)?;
        let term = tape.scale(sum, alpha * T::of(0.5 / (h * w) as f64))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one compared layer"))
}

impl TeacherStudentModel {
    pub fn shared_prefix_end(&self) -> usize {
        self.group.shared_prefix_end
    }

    pub fn is_paste(&self) -> bool {
        self.group.shared_prefix_end > 0
    }

    /// Bytes of all stored parameters; the shared prefix is stored once.
    pub fn param_bytes(&self) -> usize {
        self.teacher.param_bytes() + self.student.param_bytes()
    }

    fn teacher_pass(&self, image: &Tensor) -> Result<TeacherPass> {
        let p = self.shared_prefix_end();
        let mut taps = Vec::with_capacity(self.group.indices.len() + 1);
        if p > 0 {
            taps.push(p);
        }
        taps.extend_from_slice(&self.group.indices);
        let mut maps = self.teacher.forward_collect(image, &taps)?;
        let student_input = if p > 0 { maps.remove(0).tensor } else { image.clone() };
        let targets = maps.iter().map(|m| channel_l2_normalize(m, L2_EPS as f32).tensor).collect();
        Ok(TeacherPass { student_input, targets })
    }

    fn batch_step(&mut self, opt: &mut Sgd, passes: &[&TeacherPass]) -> Result<f32> {
        let mut tape = Tape::new();
        let vars = self.student.register(&mut tape, true);
        let mut total: Option<Var> = None;
        for pass in passes {
            let l = distill_loss_on_tape(&mut tape, &self.student, &vars, &pass.student_input, &self.group.indices, &pass.targets, &self.alphas)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.ok_or_else(|| Error::config("empty batch"))?, 1.0 / passes.len() as f32)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss {value}")));
        }
        let params = vars.trainable_params();
        let grads = tape.gradients(loss, &params)?;
        opt.step(&mut self.student.trainable_params_mut(), &grads)?;
        self.trained = true;
        Ok(value)
    }

    /// One SGD step on a batch of normal images; returns the batch loss before the step.
    pub fn train_step(&mut self, opt: &mut Sgd, batch: &[&Sample]) -> Result<f32> {
        check_normal(batch.iter().copied())?;
        let passes: Vec<TeacherPass> = batch.iter().map(|s| self.teacher_pass(&s.image)).collect::<Result<_>>()?;
        self.batch_step(opt, &passes.iter().collect::<Vec<_>>())
    }

    /// Loss of the current student on `image` without updating anything.
    pub fn loss(&self, image: &Tensor) -> Result<f32> {
        let pass = self.teacher_pass(image)?;
        let mut tape = Tape::new();
        let vars = self.student.register(&mut tape, false);
        let l = distill_loss_on_tape(&mut tape, &self.student, &vars, &pass.student_input, &self.group.indices, &pass.targets, &self.alphas)?;
        Ok(tape.value(l).item())
    }

    /// Trains the student on normal images. Teacher outputs are computed once.
    ///
    /// If the loss becomes non-finite or stays above ten times the first
    /// epoch's loss for three epochs, training restarts once from the initial
    /// student with a tenth of the learning rate and ten times the epochs.
    pub fn fit(&mut self, train: &[Sample], cfg: &FitConfig) -> Result<FitReport> {
        check_normal(train.iter())?;
        if cfg.epochs == 0 {
            return Ok(FitReport {
                epoch_losses: Vec::new(),
                lr: cfg.lr,
                epochs: 0,
                restarted: false,
            });
        }
        if train.is_empty() || cfg.batch == 0 {
            return Err(Error::config("training needs images and a positive batch size"));
        }
        let passes: Vec<TeacherPass> = train.iter().map(|s| self.teacher_pass(&s.image)).collect::<Result<_>>()?;
        let inputs: Vec<Tensor> = passes.iter().take(64).map(|p| p.student_input.clone()).collect();
        self.student.calibrate_norms(&inputs)?;
        let initial = self.student.clone();
        match self.run_epochs(&passes, cfg.lr, cfg.epochs, cfg) {
            Ok(losses) => Ok(FitReport {
                epoch_losses: losses,
                lr: cfg.lr,
                epochs: cfg.epochs,
                restarted: false,
            }),
            Err(first @ Error::Training(_)) => {
                log::warn!("training diverged ({first}); restarting with lr/10 and 10× epochs");
                self.student = initial;
                let (lr, epochs) = (cfg.lr / 10.0, cfg.epochs * 10);
                let losses = self
                    .run_epochs(&passes, lr, epochs, cfg)
                    .map_err(|e| Error::Training(format!("diverged twice: first {first}; then {e}")))?;
                Ok(FitReport {
                    epoch_losses: losses,
                    lr,
                    epochs,
                    restarted: true,
                })
            }
            Err(other) => Err(other),
        }
    }

    fn run_epochs(&mut self, passes: &[TeacherPass], lr: f32, epochs: usize, cfg: &FitConfig) -> Result<Vec<f32>> {
        let mut opt = Sgd::new(lr, cfg.momentum)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..passes.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        let mut strikes = 0;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0f64;
            for chunk in order.chunks(cfg.batch) {
                let batch: Vec<&TeacherPass> = chunk.iter().map(|&i| &passes[i]).collect();
                let l = self.batch_step(&mut opt, &batch).map_err(|e| match e {
                    Error::Numeric(m) | Error::Training(m) => Error::Training(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total += l as f64 * chunk.len() as f64;
            }
            let mean = (total / passes.len() as f64) as f32;
            losses.push(mean);
            log::debug!("epoch {epoch}: loss {mean:.5}");
            if mean > 10.0 * losses[0] {
                strikes += 1;
                if strikes >= 3 {
                    return Err(Error::Training(format!("loss {mean} above 10× the initial {} for 3 epochs", losses[0])));
                }
            } else {
                strikes = 0;
            }
        }
        Ok(losses)
    }

    /// Per-layer maps upsampled to the image size and combined; image score = max pixel.
    pub fn anomaly_map(&self, image: &Tensor) -> Result<AnomalyMap> {
        let (_, h, w) = image.chw()?;
        let pass = self.teacher_pass(image)?;
        let student = self.student.forward_collect(&pass.student_input, &self.group.indices)?;
        let mut per_layer = Vec::with_capacity(student.len());
        for (s, t) in student.iter().zip(&pass.targets) {
            let s_hat = channel_l2_normalize(s, L2_EPS as f32);
            per_layer.push(bilinear_resize(&discrepancy(t, &s_hat.tensor)?, h, w)?);
        }
        let mut combined = match self.combine {
            Combine::Product => Map2::filled(h, w, 1.0),
            Combine::Sum => Map2::filled(h, w, 0.0),
        };
        for m in &per_layer {
            for (c, &v) in combined.data.iter_mut().zip(&m.data) {
                match self.combine {
                    Combine::Product => *c *= v,
                    Combine::Sum => *c += v,
                }
            }
        }
        let warnings = if self.trained {
            Vec::new()
        } else {
            vec!["student has not been trained; scores are not meaningful".to_string()]
        };
        Ok(AnomalyMap {
            image_score: combined.max(),
            pixel_scores: combined,
            per_layer: Some(per_layer),
            warnings,
        })
    }

    /// Teacher taps, for tests and diagnostics.
    pub fn teacher_features(&self, image: &Tensor) -> Result<Vec<FeatureMap>> {
        self.teacher.forward_collect(image, &self.group.indices)
    }
}

impl AnomalyDetector for TeacherStudentModel {
    fn anomaly_map(&self, image: &Tensor) -> Result<AnomalyMap> {
        TeacherStudentModel::anomaly_map(self, image)
    }
}

fn check_normal<'a>(samples: impl Iterator<Item = &'a Sample>) -> Result<()> {
    for s in samples {
        if s.is_anomalous() {
            return Err(Error::config(format!("training image {} is labeled anomalous", s.name)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MethodSidecar {
    method: String,
    layer_group: LayerGroup,
    shared_prefix_end: usize,
    combine: Combine,
    alphas: Vec<f32>,
    trained: bool,
}

pub const METHOD_FILE: &str = "method.json";

/// Writes `teacher/` and `student/` weight archives plus `method.json`.
pub fn save_model(m: &TeacherStudentModel, dir: &Path) -> Result<()> {
    tensor_io::create_dir(dir)?;
    save_weights(&m.teacher, &dir.join("teacher"))?;
    save_weights(&m.student, &dir.join("student"))?;
    let sidecar = MethodSidecar {
        method: if m.is_paste() { "paste" } else { "stfpm" }.into(),
        layer_group: m.group.clone(),
        shared_prefix_end: m.shared_prefix_end(),
        combine: m.combine,
        alphas: m.alphas.clone(),
        trained: m.trained,
    };
    tensor_io::write_json(&dir.join(METHOD_FILE), &sidecar)
}

pub fn load_model(dir: &Path) -> Result<TeacherStudentModel> {
    let sidecar: MethodSidecar = serde_json::from_value(tensor_io::read_json_value(&dir.join(METHOD_FILE))?)?;
    let teacher = load_weights(&dir.join("teacher"))?;
    let student = load_weights(&dir.join("student"))?;
    let group = sidecar.layer_group;
    group.validate(Some(teacher.spec()))?;
    if student.first_layer() != student_start(group.shared_prefix_end) || sidecar.alphas.len() != group.indices.len() {
        return Err(Error::config("method.json does not match the stored networks"));
    }
    if (group.mode == GroupMode::Paste) != (sidecar.method == "paste") && group.shared_prefix_end > 0 {
        return Err(Error::config("method.json mode does not match its layer group"));
    }
    Ok(TeacherStudentModel {
        teacher,
        student,
        group,
        alphas: sidecar.alphas,
        combine: sidecar.combine,
        trained: sidecar.trained,
    })
}

#[cfg(test)]
mod tests;
