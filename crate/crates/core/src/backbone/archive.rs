//! Directory archives of backbone weights: `manifest.json` plus one raw file per tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{BackboneSpec, LayerKind};
use super::Backbone;
use crate::error::{Error, Result};
use crate::nn::{ConvBlockParams, FrozenNorm, Tensor};
use crate::tensor_io::{self, TensorEntry};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub spec: BackboneSpec,
    pub first_layer: usize,
    pub frozen_until: usize,
    pub tensors: Vec<TensorEntry>,
}

fn conv_prefix(layer: usize, conv: usize) -> String {
    format!("layer{layer}.conv{conv}")
}

/// Writes `b` into `dir` (created if missing).
pub fn save_weights(b: &Backbone, dir: &Path) -> Result<()> {
    tensor_io::create_dir(dir)?;
    let mut tensors = Vec::new();
    for (i, layer) in b.layers().iter().enumerate() {
        for (j, p) in layer.iter().enumerate() {
            let pre = conv_prefix(b.first_layer() + i, j);
            let mut put = |suffix: &str, t: &Tensor| -> Result<()> {
                tensors.push(tensor_io::write_f32(dir, &format!("{pre}.{suffix}"), t.shape(), t.data())?);
                Ok(())
            };
            put("kernel", &p.kernel)?;
            if let Some(bias) = &p.bias {
                put("bias", bias)?;
            }
            if let Some(n) = &p.norm {
                put("norm_scale", &n.scale)?;
                put("norm_shift", &n.shift)?;
                put("norm_mean", &n.mean)?;
                put("norm_var", &n.var)?;
            }
        }
    }
    let manifest = Manifest {
        model: b.spec().name.clone(),
        spec: b.spec().clone(),
        first_layer: b.first_layer(),
        frozen_until: b.frozen_until,
        tensors,
    };
    tensor_io::write_json(&dir.join(MANIFEST), &manifest)
}

/// Rejects layer kinds this build does not know before typed parsing.
fn check_kinds(raw: &serde_json::Value) -> Result<()> {
    let layers = raw
        .pointer("/spec/layers")
        .and_then(|l| l.as_array())
        .ok_or_else(|| Error::config("manifest has no spec.layers list"))?;
    for l in layers {
        let kind = l.get("kind").and_then(|k| k.as_str()).unwrap_or("<missing>");
        LayerKind::parse(kind)?;
    }
    Ok(())
}

/// Reads an archive written by [`save_weights`].
pub fn load_weights(dir: &Path) -> Result<Backbone> {
    let raw = tensor_io::read_json_value(&dir.join(MANIFEST))?;
    check_kinds(&raw)?;
    let manifest: Manifest = serde_json::from_value(raw)?;
    let trace = manifest.spec.trace(manifest.spec.input_hw)?;
    if manifest.first_layer > manifest.spec.last_index {
        return Err(Error::config("manifest first_layer beyond last index"));
    }
    let find = |name: &str| manifest.tensors.iter().find(|e| e.name == name);
    let read = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let entry = find(name).ok_or_else(|| Error::Load {
            tensor: name.to_string(),
            reason: "missing from manifest".into(),
        })?;
        if entry.shape != shape {
            return Err(Error::Load {
                tensor: name.to_string(),
                reason: format!("shape {:?} does not match expected {shape:?}", entry.shape),
            });
        }
        Tensor::new(shape.to_vec(), tensor_io::read_f32(dir, entry)?)
    };
    let mut layers = Vec::new();
    for t in &trace[manifest.first_layer..] {
        let mut convs = Vec::new();
        for (j, c) in t.convs.iter().enumerate() {
            let pre = conv_prefix(t.index, j);
            let g = c.geom;
            let oc = [g.out_ch];
            let bias_name = format!("{pre}.bias");
            let bias = find(&bias_name).map(|_| read(&bias_name, &oc)).transpose()?;
            let norm = match find(&format!("{pre}.norm_scale")) {
                Some(_) => Some(FrozenNorm {
                    scale: read(&format!("{pre}.norm_scale"), &oc)?,
                    shift: read(&format!("{pre}.norm_shift"), &oc)?,
                    mean: read(&format!("{pre}.norm_mean"), &oc)?,
                    var: read(&format!("{pre}.norm_var"), &oc)?,
                }),
                None => None,
            };
            convs.push(ConvBlockParams {
                kernel: read(&format!("{pre}.kernel"), &[g.out_ch, g.in_per_group(), g.kh, g.kw])?,
                bias,
                norm,
                groups: g.groups,
                activation: c.activation,
            });
        }
        layers.push(convs);
    }
    Backbone::from_parts(manifest.spec, manifest.first_layer, layers, manifest.frozen_until)
}
