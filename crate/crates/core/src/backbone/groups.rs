//! Choice of the tapped layers a method reads features from.

use serde::{Deserialize, Serialize};

use super::spec::BackboneSpec;
use crate::error::{Error, Result};

/// Default cumulative-MAC targets of the three equivalent-cost taps.
pub const DEFAULT_REF_MAC_FRACTIONS: [f64; 3] = [0.1839, 0.4364, 0.8061];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    Low,
    Mid,
    High,
    Equiv,
    Paste,
}

impl GroupMode {
    pub const ALL: [GroupMode; 5] = [GroupMode::Low, GroupMode::Mid, GroupMode::High, GroupMode::Equiv, GroupMode::Paste];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupMode::Low => "low",
            GroupMode::Mid => "mid",
            GroupMode::High => "high",
            GroupMode::Equiv => "equiv",
            GroupMode::Paste => "paste",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown layer group `{s}`")))
    }
}

impl std::fmt::Display for GroupMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tapped layer indices. Layers `0..=shared_prefix_end` are shared between
/// teacher and student when `shared_prefix_end > 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub mode: GroupMode,
    pub indices: Vec<usize>,
    pub shared_prefix_end: usize,
}

impl LayerGroup {
    pub fn new(mode: GroupMode, indices: Vec<usize>, shared_prefix_end: usize) -> Result<Self> {
        let g = Self {
            mode,
            indices,
            shared_prefix_end,
        };
        g.validate(None)?;
        Ok(g)
    }

    pub fn last(&self) -> usize {
        *self.indices.last().expect("validated group is non-empty")
    }

    pub fn validate(&self, spec: Option<&BackboneSpec>) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::config("layer group is empty"));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("layer group {:?} is not strictly increasing", self.indices)));
        }
        if let Some(spec) = spec {
            if self.last() > spec.last_index {
                return Err(Error::config(format!(
                    "layer group {:?} exceeds last index {}",
                    self.indices, spec.last_index
                )));
            }
        }
        if self.shared_prefix_end > 0 && self.shared_prefix_end >= self.indices[0] {
            return Err(Error::config(format!(
                "shared prefix up to layer {} must end before the first tap {}",
                self.shared_prefix_end, self.indices[0]
            )));
        }
        if self.mode != GroupMode::Paste && self.shared_prefix_end != 0 {
            return Err(Error::config("only paste groups share a prefix"));
        }
        Ok(())
    }
}

/// Fraction of the network's MACs spent up to and including each layer.
pub fn cumulative_mac_fractions(spec: &BackboneSpec) -> Result<Vec<f64>> {
    let macs: Vec<u64> = spec.trace(spec.input_hw)?.iter().map(|l| l.macs()).collect();
    let total: u64 = macs.iter().sum();
    let mut acc = 0u64;
    Ok(macs
        .iter()
        .map(|m| {
            acc += m;
            acc as f64 / total as f64
        })
        .collect())
}

/// Layer whose cumulative fraction is nearest `target`; ties go to the shallower layer.
fn nearest_layer(cum: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, c) in cum.iter().enumerate() {
        if (c - target).abs() < (cum[best] - target).abs() {
            best = i;
        }
    }
    best
}

fn equiv_indices(spec: &BackboneSpec, targets: &[f64]) -> Result<Vec<usize>> {
    if targets.is_empty() || targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config(format!("MAC fraction targets must lie in [0, 1], got {targets:?}")));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("MAC fraction targets must be increasing"));
    }
    let cum = cumulative_mac_fractions(spec)?;
    let mut out: Vec<usize> = Vec::with_capacity(targets.len());
    for &t in targets {
        let mut i = nearest_layer(&cum, t);
        if let Some(&prev) = out.last() {
            i = i.max(prev + 1);
        }
        if i > spec.last_index {
            return Err(Error::config(format!(
                "cannot place {} distinct taps in `{}`",
                targets.len(),
                spec.name
            )));
        }
        out.push(i);
    }
    Ok(out)
}

/// Moves an equivalent-cost triplet above a shared prefix ending at `prefix_end`.
///
/// The first tap moves to at least `prefix_end + 1`, the middle tap to at
/// least the midpoint of the new first tap and the unchanged last tap.
pub fn paste_shift(equiv: &[usize], prefix_end: usize) -> Result<Vec<usize>> {
    let &[e0, e1, e2] = equiv else {
        return Err(Error::config(format!("expected three taps, got {equiv:?}")));
    };
    if prefix_end == 0 {
        return Ok(equiv.to_vec());
    }
    let first = e0.max(prefix_end + 1);
    let middle = e1.max((first + e2) / 2).max(first + 1);
    if middle >= e2 {
        return Err(Error::config(format!(
            "shared prefix up to layer {prefix_end} leaves no room for three taps ending at {e2}"
        )));
    }
    Ok(vec![first, middle, e2])
}

fn depth_triplet(spec: &BackboneSpec, mode: GroupMode) -> Result<Vec<usize>> {
    let last = spec.last_index;
    if last + 1 < 3 {
        return Err(Error::config(format!("`{}` has fewer than 3 layers", spec.name)));
    }
    let offset = ((last as f64 / 6.0).round() as usize).max(1).min(last / 2);
    let center = last / 2 + 1;
    let start = match mode {
        GroupMode::Low => center as isize - 2 * offset as isize,
        GroupMode::Mid => center as isize - offset as isize,
        _ => center as isize,
    };
    let start = start.clamp(0, (last - 2 * offset) as isize) as usize;
    Ok((0..3).map(|k| start + k * offset).collect())
}

/// Tapped layers for `mode`. `ref_mac_fractions` defaults to
/// [`DEFAULT_REF_MAC_FRACTIONS`]; a paste group without an explicit
/// `shared_prefix_end` shares the layers strictly before the first
/// equivalent tap, so that tap keeps its resolution.
pub fn select_layer_group(
    spec: &BackboneSpec,
    mode: GroupMode,
    ref_mac_fractions: Option<&[f64]>,
    shared_prefix_end: Option<usize>,
) -> Result<LayerGroup> {
    let targets = ref_mac_fractions.unwrap_or(&DEFAULT_REF_MAC_FRACTIONS);
    let (indices, prefix) = match mode {
        GroupMode::Low | GroupMode::Mid | GroupMode::High => (depth_triplet(spec, mode)?, 0),
        GroupMode::Equiv => (equiv_indices(spec, targets)?, 0),
        GroupMode::Paste => {
            let equiv = equiv_indices(spec, targets)?;
            let prefix = shared_prefix_end.unwrap_or(equiv[0].saturating_sub(1));
            (paste_shift(&equiv, prefix)?, prefix)
        }
    };
    let group = LayerGroup {
        mode,
        indices,
        shared_prefix_end: prefix,
    };
    group.validate(Some(spec))?;
    Ok(group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn depth_groups_on_mobilenet() {
        let spec = BackboneSpec::mobilenet_v2();
        let g = |m| select_layer_group(&spec, m, None, None).unwrap().indices;
        assert_eq!(g(GroupMode::Low), [4, 7, 10]);
        assert_eq!(g(GroupMode::Mid), [7, 10, 13]);
        assert_eq!(g(GroupMode::High), [10, 13, 16]);
    }

    #[test]
    fn depth_groups_on_tiny_net() {
        let spec = BackboneSpec::tiny_irnet8();
        let g = |m| select_layer_group(&spec, m, None, None).unwrap().indices;
        assert_eq!(g(GroupMode::Low), [2, 3, 4]);
        assert_eq!(g(GroupMode::Mid), [3, 4, 5]);
        assert_eq!(g(GroupMode::High), [4, 5, 6]);
    }

    #[test]
    fn mobilenet_cumulative_fractions() {
        let cum = cumulative_mac_fractions(&BackboneSpec::mobilenet_v2()).unwrap();
        // Values of the published per-layer MAC table.
        assert!((cum[3] - 0.2531).abs() < 5e-5);
        assert!((cum[8] - 0.43785).abs() < 5e-5);
        assert!((cum[14] - 0.7528).abs() < 5e-5);
        assert!((cum[18] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equiv_is_the_nearest_fraction_on_mobilenet() {
        let spec = BackboneSpec::mobilenet_v2();
        let g = select_layer_group(&spec, GroupMode::Equiv, None, None).unwrap();
        assert_eq!(g.indices, [2, 8, 15]);
    }

    #[test]
    fn paste_shift_reproduces_published_rows() {
        assert_eq!(paste_shift(&[3, 8, 14], 6).unwrap(), [7, 10, 14]);
        assert_eq!(paste_shift(&[2, 6, 14], 5).unwrap(), [6, 10, 14]);
        assert_eq!(paste_shift(&[2, 6, 7], 4).unwrap(), [5, 6, 7]);
        assert_eq!(paste_shift(&[2, 4, 5], 2).unwrap(), [3, 4, 5]);
        assert_eq!(paste_shift(&[2, 4, 5], 0).unwrap(), [2, 4, 5]);
        assert!(paste_shift(&[2, 4, 5], 3).is_err());
        assert!(paste_shift(&[2, 4], 1).is_err());
    }

    #[test]
    fn paste_group_carries_prefix() {
        let spec = BackboneSpec::tiny_irnet8();
        let g = select_layer_group(&spec, GroupMode::Paste, None, Some(2)).unwrap();
        assert_eq!(g.shared_prefix_end, 2);
        assert!(g.indices[0] > 2);
        let e = select_layer_group(&spec, GroupMode::Equiv, None, None).unwrap();
        assert_eq!(g.last(), e.last());
    }

    #[test]
    fn too_shallow_backbone_is_rejected() {
        let mut spec = BackboneSpec::tiny_irnet8();
        spec = spec.truncated(1).unwrap();
        assert!(select_layer_group(&spec, GroupMode::Low, None, None).is_err());
        assert!(select_layer_group(&spec, GroupMode::Equiv, None, None).is_err());
    }

    #[test]
    fn bad_targets_are_rejected() {
        let spec = BackboneSpec::tiny_irnet8();
        assert!(select_layer_group(&spec, GroupMode::Equiv, Some(&[0.5, 0.2, 0.9]), None).is_err());
        assert!(select_layer_group(&spec, GroupMode::Equiv, Some(&[0.1, 0.2, 1.5]), None).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in GroupMode::ALL {
            assert_eq!(GroupMode::parse(m.as_str()).unwrap(), m);
        }
        assert!(GroupMode::parse("deep").is_err());
    }

    fn spec_strategy() -> impl Strategy<Value = BackboneSpec> {
        (3usize..14).prop_flat_map(|n| {
            proptest::collection::vec((1usize..5, 1usize..12, 1usize..3), n).prop_map(|ls| {
                let mut layers = vec![super::super::LayerShape::conv(super::super::LayerKind::StemConv, 4, 1, 3)];
                layers.extend(
                    ls.into_iter()
                        .map(|(t, c, s)| super::super::LayerShape::inverted_residual(t, c * 2, s)),
                );
                BackboneSpec {
                    name: "random".into(),
                    input_hw: (64, 64),
                    in_channels: 3,
                    last_index: layers.len() - 1,
                    layers,
                }
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn equiv_matches_exhaustive_scan(spec in spec_strategy(), a in 0.0f64..0.3, b in 0.35f64..0.6, c in 0.65f64..1.0) {
            let cum = cumulative_mac_fractions(&spec).unwrap();
            let targets = [a, b, c];
            let Ok(g) = select_layer_group(&spec, GroupMode::Equiv, Some(&targets), None) else { return Ok(()); };
            let mut prev: Option<usize> = None;
            for (&i, &t) in g.indices.iter().zip(&targets) {
                let dist: Vec<f64> = cum.iter().map(|c| (c - t).abs()).collect();
                let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
                let argmin = dist.iter().position(|&d| d == best).unwrap();
                match prev {
                    Some(p) if argmin <= p => prop_assert_eq!(i, p + 1),
                    _ => prop_assert_eq!(i, argmin),
                }
                prev = Some(i);
            }
        }

        #[test]
        fn paste_keeps_last_and_clears_prefix(spec in spec_strategy(), prefix in 1usize..6) {
            let equiv = select_layer_group(&spec, GroupMode::Equiv, None, None);
            let paste = select_layer_group(&spec, GroupMode::Paste, None, Some(prefix));
            if let (Ok(e), Ok(p)) = (equiv, paste) {
                prop_assert!(p.shared_prefix_end < p.indices[0]);
                prop_assert_eq!(p.last(), e.last());
                prop_assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn depth_groups_are_valid(spec in spec_strategy()) {
            for m in [GroupMode::Low, GroupMode::Mid, GroupMode::High] {
                let g = select_layer_group(&spec, m, None, None).unwrap();
                prop_assert!(g.indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(g.last() <= spec.last_index);
            }
        }
    }
}
