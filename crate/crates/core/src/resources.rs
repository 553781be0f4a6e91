//! Analytical MAC, parameter-memory and training-RAM accounting.
//!
//! Conventions: only convolution multiply-accumulates are counted; a stored
//! scalar is 4 bytes; each convolution stores its weights plus scale, shift,
//! mean and variance per output channel; a backward pass costs twice the
//! forward MACs of the trainable layers.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, LayerGroup, LayerTrace};
use crate::error::{Error, Result};

pub const BYTES_PER_SCALAR: u64 = 4;
/// One megabyte as used in reports.
pub const MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub index: usize,
    pub macs: u64,
    pub cumulative_fraction: f64,
}

/// Per-layer MACs and cumulative fraction of the whole network at `input_hw`.
pub fn layer_macs(spec: &BackboneSpec, input_hw: (usize, usize)) -> Result<Vec<LayerMacs>> {
    let trace = spec.trace(input_hw)?;
    let total: u64 = trace.iter().map(LayerTrace::macs).sum();
    let mut acc = 0u64;
    Ok(trace
        .iter()
        .map(|l| {
            acc += l.macs();
            LayerMacs {
                index: l.index,
                macs: l.macs(),
                cumulative_fraction: acc as f64 / total as f64,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    /// Teacher-student distillation; `shared_prefix_end == 0` is the classic
    /// two-network setup, otherwise layers `0..=shared_prefix_end` are shared.
    TeacherStudent { shared_prefix_end: usize, batch: usize },
    PatchCore { coreset_ratio: f64, n_train: usize },
    Padim { d: usize, n_train: usize },
}

impl MethodConfig {
    pub fn stfpm() -> Self {
        MethodConfig::TeacherStudent {
            shared_prefix_end: 0,
            batch: 4,
        }
    }

    pub fn paste(shared_prefix_end: usize) -> Self {
        MethodConfig::TeacherStudent {
            shared_prefix_end,
            batch: 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::TeacherStudent { shared_prefix_end: 0, .. } => "stfpm",
            MethodConfig::TeacherStudent { .. } => "paste",
            MethodConfig::PatchCore { .. } => "patchcore",
            MethodConfig::Padim { .. } => "padim",
        }
    }

    fn split(&self) -> usize {
        match self {
            MethodConfig::TeacherStudent { shared_prefix_end, .. } => *shared_prefix_end,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerResources {
    pub index: usize,
    /// Inference MACs contributed by every execution of this layer.
    pub macs: u64,
    /// Bytes of every stored copy of this layer.
    pub param_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub method: String,
    pub backbone: String,
    pub layer_group: String,
    pub split: usize,
    pub backbone_macs: u64,
    pub scoring_macs: u64,
    pub inference_macs: u64,
    pub training_macs: u64,
    pub param_bytes: u64,
    pub bank_bytes: u64,
    pub training_ram_bytes: u64,
    pub layers: Vec<LayerResources>,
}

impl ResourceReport {
    pub fn memory_bytes(&self) -> u64 {
        self.param_bytes + self.bank_bytes
    }
}

/// First layer of the trainable student, given the shared-prefix convention.
pub fn student_start(shared_prefix_end: usize) -> usize {
    if shared_prefix_end == 0 {
        0
    } else {
        shared_prefix_end + 1
    }
}

/// Description of one training configuration for [`training_resources`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSetup {
    pub spec: BackboneSpec,
    pub input_hw: (usize, usize),
    /// Last executed layer.
    pub last: usize,
    /// Frozen layer ranges (inclusive) executed once per sample.
    pub frozen_passes: Vec<(usize, usize)>,
    /// Trainable layer range (inclusive), or `None` when everything is frozen.
    pub trainable: Option<(usize, usize)>,
    /// Frozen feature elements kept alive for the loss.
    pub retained_elems: u64,
    pub batch: usize,
}

/// `(training_macs, training_ram_bytes)` per optimization step for one sample batch.
///
/// MACs are per sample: forward of every executed layer plus twice the forward
/// of trainable layers. RAM covers, per sample, the inputs and every
/// convolution output of trainable layers, the buffer entering the trainable
/// region and the retained frozen features, plus parameters, gradients and
/// momentum of the trainable layers. A fully frozen setup only keeps its output buffer.
pub fn training_resources(setup: &TrainingSetup) -> Result<(u64, u64)> {
    let trace = setup.spec.trace(setup.input_hw)?;
    if setup.last >= trace.len() {
        return Err(Error::config(format!("layer {} beyond the backbone", setup.last)));
    }
    let batch = setup.batch.max(1) as u64;
    let range_macs = |(a, b): (usize, usize)| trace[a..=b].iter().map(LayerTrace::macs).sum::<u64>();
    let forward: u64 = setup.frozen_passes.iter().map(|&r| range_macs(r)).sum();
    let Some((from, to)) = setup.trainable else {
        let out = trace[setup.last].out_elems();
        return Ok((forward, BYTES_PER_SCALAR * batch * (out + setup.retained_elems)));
    };
    let trainable_macs = range_macs((from, to));
    let macs = forward + trainable_macs + 2 * trainable_macs;
    let layers = &trace[from..=to];
    let activations: u64 = layers
        .iter()
        .map(|l| l.in_elems() + l.convs.iter().map(|c| c.out_elems()).sum::<u64>())
        .sum();
    let entry = if from == 0 {
        trace[0].in_elems()
    } else {
        trace[from - 1].out_elems()
    };
    let params: u64 = layers.iter().map(LayerTrace::stored_scalars).sum();
    let ram = BYTES_PER_SCALAR * (batch * (activations + entry + setup.retained_elems) + 3 * params);
    Ok((macs, ram))
}

fn tap_grid(trace: &[LayerTrace], group: &LayerGroup) -> (u64, u64) {
    let first = &trace[group.indices[0]];
    let grid = (first.out_hw.0 * first.out_hw.1) as u64;
    let dim = group.indices.iter().map(|&i| trace[i].out_ch as u64).sum();
    (grid, dim)
}

/// Inference, memory and training costs of `method` on `spec` tapping `group`.
pub fn method_resources(method: &MethodConfig, spec: &BackboneSpec, group: &LayerGroup, input_hw: (usize, usize)) -> Result<ResourceReport> {
    group.validate(Some(spec))?;
    let trace = spec.trace(input_hw)?;
    let last = group.last();
    let mut layers: Vec<LayerResources> = (0..=last)
        .map(|index| LayerResources {
            index,
            ..Default::default()
        })
        .collect();
    let mut add = |from: usize, copies: u64| {
        for l in &mut layers[from..] {
            l.macs += copies * trace[l.index].macs();
            l.param_bytes += copies * BYTES_PER_SCALAR * trace[l.index].stored_scalars();
        }
    };
    let (scoring_macs, bank_bytes, training_macs, training_ram_bytes);
    match *method {
        MethodConfig::TeacherStudent { shared_prefix_end, batch } => {
            if shared_prefix_end > 0 && shared_prefix_end >= group.indices[0] {
                return Err(Error::config("the shared prefix must end before the first tap"));
            }
            let start = student_start(shared_prefix_end);
            add(0, 1);
            add(start, 1);
            scoring_macs = 0;
            bank_bytes = 0;
            let retained: u64 = group.indices.iter().map(|&i| trace[i].out_elems()).sum();
            (training_macs, training_ram_bytes) = training_resources(&TrainingSetup {
                spec: spec.clone(),
                input_hw,
                last,
                frozen_passes: vec![(0, last)],
                trainable: Some((start, last)),
                retained_elems: retained,
                batch,
            })?;
        }
        MethodConfig::PatchCore { coreset_ratio, n_train } => {
            if !(coreset_ratio > 0.0 && coreset_ratio <= 1.0) {
                return Err(Error::config("coreset ratio must lie in (0, 1]"));
            }
            add(0, 1);
            let (grid, dim) = tap_grid(&trace, group);
            let total = n_train as u64 * grid;
            let bank = ((coreset_ratio * total as f64).ceil() as u64).clamp(1, total.max(1));
            scoring_macs = grid * bank * dim;
            bank_bytes = BYTES_PER_SCALAR * bank * dim;
            let forward: u64 = layers.iter().map(|l| l.macs).sum();
            // Greedy selection updates every candidate's distance once per pick.
            training_macs = forward + bank * total * dim;
            training_ram_bytes = BYTES_PER_SCALAR * (total * dim + trace[last].out_elems());
        }
        MethodConfig::Padim { d, n_train } => {
            let (grid, dim) = tap_grid(&trace, group);
            if d == 0 || d as u64 > dim {
                return Err(Error::config(format!("PaDiM dimension {d} must lie in 1..={dim}")));
            }
            if n_train < 2 {
                return Err(Error::config("PaDiM needs at least two training images"));
            }
            add(0, 1);
            let d = d as u64;
            scoring_macs = grid * (d * d + d);
            bank_bytes = BYTES_PER_SCALAR * grid * (d + d * d);
            let forward: u64 = layers.iter().map(|l| l.macs).sum();
            training_macs = forward + grid * d * d * d;
            training_ram_bytes = bank_bytes + BYTES_PER_SCALAR * trace[last].out_elems();
        }
    }
    let backbone_macs = layers.iter().map(|l| l.macs).sum();
    let param_bytes = layers.iter().map(|l| l.param_bytes).sum();
    Ok(ResourceReport {
        method: method.name().to_string(),
        backbone: spec.name.clone(),
        layer_group: group.mode.as_str().to_string(),
        split: method.split(),
        backbone_macs,
        scoring_macs,
        inference_macs: backbone_macs + scoring_macs,
        training_macs,
        param_bytes,
        bank_bytes,
        training_ram_bytes,
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadimProbeRow {
    pub d: u64,
    /// One covariance inversion per position.
    pub inversion_macs: u64,
    /// One Mahalanobis evaluation per position.
    pub scoring_macs: u64,
}

/// Per-position PaDiM costs as the feature dimension grows.
pub fn padim_complexity_probe(ds: &[usize]) -> Result<Vec<PadimProbeRow>> {
    ds.iter()
        .map(|&d| {
            if d == 0 {
                return Err(Error::config("feature dimension must be at least 1"));
            }
            let d = d as u64;
            Ok(PadimProbeRow {
                d,
                inversion_macs: d * d * d,
                scoring_macs: d * d + d,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{select_layer_group, GroupMode, LayerKind, LayerShape};
    use proptest::prelude::*;

    fn mb() -> BackboneSpec {
        BackboneSpec::mobilenet_v2().truncated(14).unwrap()
    }

    fn group(mode: GroupMode, idx: &[usize], p: usize) -> LayerGroup {
        LayerGroup::new(mode, idx.to_vec(), p).unwrap()
    }

    #[test]
    fn pointwise_conv_closed_form() {
        let spec = BackboneSpec {
            name: "one".into(),
            input_hw: (10, 10),
            in_channels: 8,
            layers: vec![LayerShape::conv(LayerKind::HeadConv, 16, 1, 1)],
            last_index: 0,
        };
        let m = layer_macs(&spec, (10, 10)).unwrap();
        assert_eq!(m[0].macs, 12_800);
        assert_eq!(m[0].cumulative_fraction, 1.0);
    }

    #[test]
    fn mobilenet_total_is_about_300m() {
        let m = layer_macs(&BackboneSpec::mobilenet_v2(), (224, 224)).unwrap();
        let total: u64 = m.iter().map(|l| l.macs).sum();
        assert!((total as f64 - 300e6).abs() < 30e6);
        assert_eq!(m.last().unwrap().cumulative_fraction, 1.0);
    }

    #[test]
    fn paste_saves_exactly_the_prefix() {
        let spec = mb();
        let s = method_resources(&MethodConfig::stfpm(), &spec, &group(GroupMode::Equiv, &[3, 8, 14], 0), (224, 224)).unwrap();
        let p = method_resources(&MethodConfig::paste(6), &spec, &group(GroupMode::Paste, &[7, 10, 14], 6), (224, 224)).unwrap();
        let trace = spec.trace((224, 224)).unwrap();
        let prefix_macs: u64 = trace[..=6].iter().map(|l| l.macs()).sum();
        let prefix_bytes: u64 = trace[..=6].iter().map(|l| 4 * l.stored_scalars()).sum();
        assert_eq!(s.inference_macs - p.inference_macs, prefix_macs);
        assert_eq!(s.param_bytes - p.param_bytes, prefix_bytes);
        let mac_cut = 1.0 - p.inference_macs as f64 / s.inference_macs as f64;
        let mem_cut = 1.0 - p.param_bytes as f64 / s.param_bytes as f64;
        assert!((mac_cut - 0.249).abs() < 0.02, "{mac_cut}");
        assert!((mem_cut - 0.039).abs() < 0.015, "{mem_cut}");
        assert!(p.training_ram_bytes * 2 <= s.training_ram_bytes);
        assert!(p.training_macs < s.training_macs);
    }

    #[test]
    fn zero_split_matches_stfpm() {
        let spec = mb();
        let g = group(GroupMode::Equiv, &[3, 8, 14], 0);
        let a = method_resources(&MethodConfig::stfpm(), &spec, &g, (224, 224)).unwrap();
        let b = method_resources(&MethodConfig::paste(0), &spec, &g, (224, 224)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let spec = mb();
        for m in [
            MethodConfig::stfpm(),
            MethodConfig::paste(6),
            MethodConfig::PatchCore { coreset_ratio: 0.1, n_train: 40 },
            MethodConfig::Padim { d: 100, n_train: 40 },
        ] {
            let g = group(if m.name() == "paste" { GroupMode::Paste } else { GroupMode::Equiv }, &[7, 10, 14], m.split());
            let r = method_resources(&m, &spec, &g, (224, 224)).unwrap();
            assert_eq!(r.layers.iter().map(|l| l.macs).sum::<u64>(), r.backbone_macs);
            assert_eq!(r.layers.iter().map(|l| l.param_bytes).sum::<u64>(), r.param_bytes);
            assert_eq!(r.inference_macs, r.backbone_macs + r.scoring_macs);
        }
    }

    #[test]
    fn memory_bank_costs() {
        let spec = mb();
        let g = group(GroupMode::Equiv, &[3, 8, 14], 0);
        let trace = spec.trace((224, 224)).unwrap();
        let grid = 56 * 56u64;
        let dim = 24 + 64 + 160u64;
        let pc = method_resources(&MethodConfig::PatchCore { coreset_ratio: 0.1, n_train: 10 }, &spec, &g, (224, 224)).unwrap();
        let n = (0.1 * (10 * grid) as f64).ceil() as u64;
        assert_eq!(pc.scoring_macs, grid * n * dim);
        assert_eq!(pc.bank_bytes, 4 * n * dim);
        assert_eq!(pc.backbone_macs, trace.iter().map(|l| l.macs()).sum::<u64>());
        let pd = method_resources(&MethodConfig::Padim { d: 62, n_train: 10 }, &spec, &g, (224, 224)).unwrap();
        assert_eq!(pd.scoring_macs, grid * (62 * 62 + 62));
        assert_eq!(pd.bank_bytes, 4 * grid * (62 + 62 * 62));
        assert!(method_resources(&MethodConfig::Padim { d: 249, n_train: 10 }, &spec, &g, (224, 224)).is_err());
        assert!(method_resources(&MethodConfig::PatchCore { coreset_ratio: 0.0, n_train: 10 }, &spec, &g, (224, 224)).is_err());
    }

    #[test]
    fn group_beyond_spec_is_rejected() {
        let g = group(GroupMode::Equiv, &[3, 8, 15], 0);
        assert!(method_resources(&MethodConfig::stfpm(), &mb(), &g, (224, 224)).is_err());
    }

    #[test]
    fn frozen_setup_keeps_only_the_output() {
        let spec = mb();
        let setup = TrainingSetup {
            spec: spec.clone(),
            input_hw: (224, 224),
            last: 14,
            frozen_passes: vec![(0, 14)],
            trainable: None,
            retained_elems: 0,
            batch: 2,
        };
        let (macs, ram) = training_resources(&setup).unwrap();
        let trace = spec.trace((224, 224)).unwrap();
        assert_eq!(macs, trace.iter().map(|l| l.macs()).sum::<u64>());
        assert_eq!(ram, 4 * 2 * trace[14].out_elems());
    }

    #[test]
    fn probe_exponents() {
        let rows = padim_complexity_probe(&[1, 31, 62, 124, 550]).unwrap();
        assert_eq!(rows[0].scoring_macs, 2);
        assert_eq!(rows[3].inversion_macs, 8 * rows[2].inversion_macs);
        assert_eq!(rows[3].d * rows[3].d, 4 * rows[2].d * rows[2].d);
        let ratio = rows[4].inversion_macs as f64 / rows[2].inversion_macs as f64;
        assert!((ratio - 698.3).abs() < 0.5, "{ratio}");
        assert!(padim_complexity_probe(&[0]).is_err());
    }

    proptest! {
        #[test]
        fn training_costs_shrink_with_the_prefix(p in 0usize..13, q in 0usize..13) {
            let (lo, hi) = (p.min(q), p.max(q));
            let spec = mb();
            let g = |s: usize| group(if s == 0 { GroupMode::Equiv } else { GroupMode::Paste }, &[13, 14], s);
            let a = method_resources(&MethodConfig::paste(lo), &spec, &g(lo), (224, 224)).unwrap();
            let b = method_resources(&MethodConfig::paste(hi), &spec, &g(hi), (224, 224)).unwrap();
            prop_assert!(b.training_ram_bytes <= a.training_ram_bytes);
            prop_assert!(b.training_macs <= a.training_macs);
            prop_assert!(b.inference_macs <= a.inference_macs);
        }

        #[test]
        fn identity_holds_for_any_split(p in 1usize..7, hw in 2usize..8) {
            let mut spec = BackboneSpec::tiny_irnet8();
            let hw = hw * 16;
            spec.input_hw = (hw, hw);
            let s = method_resources(&MethodConfig::stfpm(), &spec, &group(GroupMode::Equiv, &[7], 0), (hw, hw)).unwrap();
            let r = method_resources(&MethodConfig::paste(p), &spec, &group(GroupMode::Paste, &[7], p), (hw, hw)).unwrap();
            let trace = spec.trace((hw, hw)).unwrap();
            prop_assert_eq!(s.inference_macs - r.inference_macs, trace[..=p].iter().map(|l| l.macs()).sum::<u64>());
            prop_assert_eq!(s.param_bytes - r.param_bytes, trace[..=p].iter().map(|l| 4 * l.stored_scalars()).sum::<u64>());
        }
    }

    #[test]
    fn group_helper_is_consistent() {
        let g = select_layer_group(&BackboneSpec::tiny_irnet8(), GroupMode::Paste, None, Some(2)).unwrap();
        let r = method_resources(&MethodConfig::paste(2), &BackboneSpec::tiny_irnet8(), &g, (64, 64)).unwrap();
        assert_eq!(r.split, 2);
        assert_eq!(r.method, "paste");
    }
}
