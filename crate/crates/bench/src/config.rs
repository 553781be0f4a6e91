//! Experiment configuration: one JSON document plus `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tinyvad_core::backbone::{select_layer_group, BackboneSpec, GroupMode, LayerGroup, PretrainConfig};
use tinyvad_core::data::{default_suite, CategorySpec};
use tinyvad_core::methods::membank::MembankConfig;
use tinyvad_core::methods::stfpm::FitConfig;

use crate::error::{BenchError, Result};

/// Environment variable that replaces the top-level `seed`.
pub const SEED_ENV: &str = "TINYVAD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Stfpm,
    Paste,
    Patchcore,
    Padim,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Stfpm, Method::Paste, Method::Patchcore, Method::Padim];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Stfpm => "stfpm",
            Method::Paste => "paste",
            Method::Patchcore => "patchcore",
            Method::Padim => "padim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BenchError::config(format!("unknown method `{s}`")))
    }

    pub fn is_teacher_student(&self) -> bool {
        matches!(self, Method::Stfpm | Method::Paste)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A built-in backbone by name or a full layer description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneRef {
    Name(String),
    Spec(BackboneSpec),
}

impl BackboneRef {
    pub fn resolve(&self) -> Result<BackboneSpec> {
        let spec = match self {
            BackboneRef::Name(n) => BackboneSpec::preset(n)?,
            BackboneRef::Spec(s) => s.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Synthetic categories. `None` uses the built-in five-category suite.
    /// Each category seed is offset by `1000 · run seed`.
    Generated {
        #[serde(default)]
        categories: Option<Vec<CategorySpec>>,
    },
    /// A directory in MVTec layout.
    Mvtec {
        root: PathBuf,
        categories: Vec<String>,
        /// Square resize applied on load.
        #[serde(default)]
        input_size: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Generated { categories: None }
    }
}

impl DatasetConfig {
    /// Category specs of a generated dataset for one run seed.
    pub fn generated_specs(&self, seed: u64) -> Option<Vec<CategorySpec>> {
        match self {
            DatasetConfig::Generated { categories: None } => Some(default_suite(seed)),
            DatasetConfig::Generated { categories: Some(cats) } => Some(
                cats.iter()
                    .map(|c| CategorySpec {
                        seed: seed.wrapping_mul(1000).wrapping_add(c.seed),
                        ..c.clone()
                    })
                    .collect(),
            ),
            DatasetConfig::Mvtec { .. } => None,
        }
    }

    pub fn category_names(&self) -> Vec<String> {
        match self {
            DatasetConfig::Mvtec { categories, .. } => categories.clone(),
            _ => self.generated_specs(0).unwrap_or_default().into_iter().map(|c| c.name).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Pretrained weight archive; when absent the teacher is pretrained per seed.
    pub weights: Option<PathBuf>,
    pub images_per_class: usize,
    pub image_size: usize,
    pub pretrain: PretrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            weights: None,
            images_per_class: 24,
            image_size: 32,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; runs use `seed .. seed + repeats`.
    pub seed: u64,
    pub repeats: usize,
    pub backbones: Vec<BackboneRef>,
    pub methods: Vec<Method>,
    pub layer_groups: Vec<GroupMode>,
    /// Split used by the `paste` method; defaults to the layer-group rule.
    pub shared_prefix_end: Option<usize>,
    pub ref_mac_fractions: Option<Vec<f64>>,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub fit: FitConfig,
    pub membank: MembankConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 1,
            backbones: vec![BackboneRef::Name("tiny_irnet8".into())],
            methods: Method::ALL.to_vec(),
            layer_groups: vec![GroupMode::Equiv, GroupMode::Paste],
            shared_prefix_end: None,
            ref_mac_fractions: None,
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            fit: FitConfig::default(),
            membank: MembankConfig::default(),
            output_dir: PathBuf::from("tinyvad-out"),
        }
    }
}

/// Sets `path` (dot-separated, numeric parts index arrays) inside `doc`.
/// The value is parsed as JSON and kept as a string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| BenchError::config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if part.is_empty() {
            return Err(BenchError::config(format!("empty key in `{path}`")));
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => {
                let slot = map.entry(part.to_string()).or_insert(Value::Null);
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| BenchError::config(format!("`{part}` in `{path}` must index an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| BenchError::config(format!("index {idx} out of range (len {len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(BenchError::config(format!("`{path}` descends into a scalar"))),
        };
    }
    unreachable!("loop returns on the last path element")
}

impl ExperimentConfig {
    /// Builds a config from a JSON document, overrides and an optional seed.
    pub fn from_value(mut doc: Value, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| BenchError::config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            apply_override(&mut doc, &format!("seed={seed}"))?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| BenchError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults), applies overrides and `TINYVAD_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| BenchError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| BenchError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::from_value(doc, overrides, env.as_deref())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(BenchError::config("no methods selected"));
        }
        if self.layer_groups.is_empty() {
            return Err(BenchError::config("no layer groups selected"));
        }
        if self.backbones.is_empty() {
            return Err(BenchError::config("no backbones selected"));
        }
        if self.repeats == 0 {
            return Err(BenchError::config("repeats must be at least 1"));
        }
        if self.dataset.category_names().is_empty() {
            return Err(BenchError::config("the dataset has no categories"));
        }
        for b in &self.backbones {
            let spec = b.resolve()?;
            for (method, group) in self.pairs()? {
                self.layer_group(&spec, method, group)?;
            }
        }
        Ok(())
    }

    /// Valid (method, layer-group mode) combinations of the grid.
    pub fn pairs(&self) -> Result<Vec<(Method, GroupMode)>> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m == Method::Paste {
                if !self.layer_groups.contains(&GroupMode::Paste) && self.shared_prefix_end.is_none() {
                    return Err(BenchError::config("method paste needs the paste layer group or an explicit shared_prefix_end"));
                }
                out.push((m, GroupMode::Paste));
                continue;
            }
            let groups: Vec<_> = self.layer_groups.iter().copied().filter(|&g| g != GroupMode::Paste).collect();
            if groups.is_empty() {
                return Err(BenchError::config(format!("method {m} has no usable layer group (paste groups are for the paste method)")));
            }
            out.extend(groups.into_iter().map(|g| (m, g)));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn layer_group(&self, spec: &BackboneSpec, method: Method, mode: GroupMode) -> Result<LayerGroup> {
        let split = if method == Method::Paste { self.shared_prefix_end } else { None };
        Ok(select_layer_group(spec, mode, self.ref_mac_fractions.as_deref(), split)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::from_value(json!({}), &[], None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.pairs().unwrap().len(), 4);
    }

    #[test]
    fn overrides_and_seed() {
        let sets = vec![
            "fit.epochs=3".to_string(),
            "methods=[\"stfpm\",\"paste\"]".to_string(),
            "output_dir=/tmp/x".to_string(),
            "backbones.0=mobilenet_v2".to_string(),
        ];
        let cfg = ExperimentConfig::from_value(json!({"backbones": ["tiny_irnet8"], "seed": 4}), &sets, Some("11")).unwrap();
        assert_eq!(cfg.fit.epochs, 3);
        assert_eq!(cfg.fit.lr, FitConfig::default().lr);
        assert_eq!(cfg.methods, vec![Method::Stfpm, Method::Paste]);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.backbones, vec![BackboneRef::Name("mobilenet_v2".into())]);
        assert_eq!(cfg.seed, 11);
        assert!(ExperimentConfig::from_value(json!({}), &[], Some("x")).is_err());
        assert!(ExperimentConfig::from_value(json!({}), &["nokey".into()], None).is_err());
        assert!(ExperimentConfig::from_value(json!({"bogus": 1}), &[], None).is_err());
    }

    #[test]
    fn empty_method_list_is_rejected() {
        let err = ExperimentConfig::from_value(json!({"methods": []}), &[], None).unwrap_err();
        assert!(err.to_string().contains("no methods"));
    }

    #[test]
    fn paste_needs_a_split_source() {
        let base = json!({"methods": ["paste"], "layer_groups": ["equiv"]});
        assert!(ExperimentConfig::from_value(base.clone(), &[], None).is_err());
        let cfg = ExperimentConfig::from_value(base, &["shared_prefix_end=1".into()], None).unwrap();
        assert_eq!(cfg.pairs().unwrap(), vec![(Method::Paste, GroupMode::Paste)]);
        let spec = BackboneSpec::tiny_irnet8();
        let g = cfg.layer_group(&spec, Method::Paste, GroupMode::Paste).unwrap();
        assert_eq!(g.shared_prefix_end, 1);
        assert!(ExperimentConfig::from_value(json!({"methods": ["stfpm"], "layer_groups": ["paste"]}), &[], None).is_err());
    }

    #[test]
    fn generated_seeds_are_offset() {
        let d = DatasetConfig::default();
        let a = d.generated_specs(2).unwrap();
        assert_eq!(a, default_suite(2));
        let explicit = DatasetConfig::Generated { categories: Some(default_suite(0)) };
        assert_eq!(explicit.generated_specs(2).unwrap(), a);
    }
}
