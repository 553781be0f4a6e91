//! Memory-bank detectors: nearest-neighbor patch distance (PatchCore) and
//! per-position Gaussian Mahalanobis distance (PaDiM).

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnomalyDetector, AnomalyMap};
use crate::backbone::archive::{load_weights, save_weights};
use crate::backbone::{Backbone, LayerGroup};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, resize_channels, FeatureMap, Map2, Tensor};
use crate::tensor_io::{self, TensorEntry};

/// Patch feature vectors on a grid, stored position-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl PatchGrid {
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }
}

/// Stride-1 average pooling with same padding; padded cells are not counted.
fn avg_pool(t: &Tensor, pool: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if pool == 1 {
        return Ok(t.clone());
    }
    let r = pool / 2;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let mut s = 0.0f32;
                for yy in y0..=y1 {
                    s += plane[yy * w + x0..=yy * w + x1].iter().sum::<f32>();
                }
                out[ch * h * w + y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Pools each map locally, resizes all maps to the first map's grid and
/// concatenates their channels per position.
pub fn embed_patches(features: &[FeatureMap], pool: usize) -> Result<PatchGrid> {
    let first = features.first().ok_or_else(|| Error::config("no feature maps to embed"))?;
    if pool == 0 || pool % 2 == 0 {
        return Err(Error::config(format!("pool size must be odd, got {pool}")));
    }
    let (gh, gw) = (first.height(), first.width());
    let dim: usize = features.iter().map(|f| f.channels()).sum();
    let mut vectors = vec![0.0f32; gh * gw * dim];
    let mut offset = 0;
    for f in features {
        let pooled = avg_pool(&f.tensor, pool)?;
        let resized = resize_channels(&pooled, gh, gw)?;
        let c = f.channels();
        for ch in 0..c {
            for (pos, &v) in resized.data()[ch * gh * gw..(ch + 1) * gh * gw].iter().enumerate() {
                vectors[pos * dim + offset + ch] = v;
            }
        }
        offset += c;
    }
    Ok(PatchGrid {
        grid_h: gh,
        grid_w: gw,
        dim,
        vectors,
    })
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSource {
    pub category: String,
    pub seed: u64,
    pub ratio: f64,
}

/// Selected training patches, one row per vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub dim: usize,
    pub vectors: Vec<f32>,
    /// Row of each selected vector in the candidate matrix, in selection order.
    pub rows: Vec<usize>,
    pub source: BankSource,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Greedy k-center selection of `⌈ratio·N⌉` rows of the `N × dim` matrix `patches`.
///
/// Starts from a seeded random row, then repeatedly adds the unselected row
/// farthest from the selected set (lowest index on ties).
pub fn coreset_select(patches: &[f32], dim: usize, ratio: f64, seed: u64) -> Result<MemoryBank> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("coreset ratio must lie in (0, 1], got {ratio}")));
    }
    if dim == 0 || patches.is_empty() || patches.len() % dim != 0 {
        return Err(Error::config("patch matrix must be non-empty with rows of length dim"));
    }
    let n = patches.len() / dim;
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let row = |i: usize| &patches[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..n);
    let mut selected = vec![false; n];
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(start))).collect();
    selected[start] = true;
    let mut rows = vec![start];
    while rows.len() < k {
        let mut best = usize::MAX;
        for i in 0..n {
            if !selected[i] && (best == usize::MAX || min_d[i] > min_d[best]) {
                best = i;
            }
        }
        selected[best] = true;
        rows.push(best);
        let b = row(best);
        for i in 0..n {
            if !selected[i] {
                let d = sq_dist(row(i), b);
                if d < min_d[i] {
                    min_d[i] = d;
                }
            }
        }
    }
    let vectors = rows.iter().flat_map(|&i| row(i).iter().copied()).collect();
    Ok(MemoryBank {
        dim,
        vectors,
        rows,
        source: BankSource {
            category: String::new(),
            seed,
            ratio,
        },
    })
}

/// Mean Euclidean distance from `query` to its `k` nearest bank vectors.
pub fn knn_distance(bank: &MemoryBank, query: &[f32], k: usize) -> f64 {
    if k == 1 {
        let best = (0..bank.len()).map(|i| sq_dist(bank.vector(i), query)).fold(f64::INFINITY, f64::min);
        return best.sqrt();
    }
    let mut d: Vec<f64> = (0..bank.len()).map(|i| sq_dist(bank.vector(i), query)).collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    d[..k].iter().map(|v| v.sqrt()).sum::<f64>() / k as f64
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and half-sample symmetric reflection.
pub fn gaussian_smooth(map: &Map2, sigma: f32) -> Map2 {
    if sigma <= 0.0 || map.data.is_empty() {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let period = 2 * n as isize;
        let m = i.rem_euclid(period);
        (if m < n as isize { m } else { period - 1 - m }) as usize
    };
    let (h, w) = (map.height, map.width);
    let src: Vec<f64> = map.data.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, &k)| k * src[y * w + reflect(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(j, &k)| k * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                .sum();
            out[y * w + x] = v.max(0.0) as f32;
        }
    }
    Map2 {
        height: h,
        width: w,
        data: out,
    }
}

/// Smoothing width for an input of `input_size` pixels: 4 at 224, scaled linearly.
pub fn default_sigma(input_size: usize) -> f32 {
    4.0 * input_size as f32 / 224.0
}

fn finish_map(grid: Vec<f64>, gh: usize, gw: usize, (h, w): (usize, usize), sigma: f32) -> Result<AnomalyMap> {
    let image_score = grid.iter().copied().fold(0.0f64, f64::max) as f32;
    let coarse = Map2::new(gh, gw, grid.iter().map(|&v| v as f32).collect())?;
    let pixel_scores = gaussian_smooth(&bilinear_resize(&coarse, h, w)?, sigma);
    Ok(AnomalyMap {
        pixel_scores,
        image_score,
        per_layer: None,
        warnings: Vec::new(),
    })
}

/// Nearest-bank distance per patch, upsampled to `input_hw` and smoothed.
/// The image score is the largest patch score before smoothing.
pub fn patchcore_score(bank: &MemoryBank, pg: &PatchGrid, k: usize, input_hw: (usize, usize), sigma: f32) -> Result<AnomalyMap> {
    if pg.dim != bank.dim {
        return Err(Error::config(format!("patch dim {} does not match bank dim {}", pg.dim, bank.dim)));
    }
    if k == 0 || bank.is_empty() {
        return Err(Error::config("k must be at least 1 and the bank non-empty"));
    }
    let scores = (0..pg.positions()).map(|p| knn_distance(bank, pg.vector(p), k)).collect();
    finish_map(scores, pg.grid_h, pg.grid_w, input_hw, sigma)
}

/// Per-position Gaussian statistics over a random subset of channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d: usize,
    pub selected_dims: Vec<usize>,
    /// `positions × d`
    pub mean: Vec<f64>,
    /// `positions × d × d`, row-major.
    pub cov_inverse: Vec<f64>,
    pub eps: f64,
}

impl GaussianField {
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Sample mean and `(N−1)`-normalized covariance plus `eps·I` of each position,
/// inverted through a Cholesky factorization.
pub fn padim_fit(grids: &[PatchGrid], d: usize, seed: u64, eps: f64) -> Result<GaussianField> {
    let first = grids.first().ok_or_else(|| Error::config("no training grids"))?;
    if grids.len() < 2 {
        return Err(Error::config("PaDiM needs at least two training images"));
    }
    if d == 0 || d > first.dim {
        return Err(Error::config(format!("PaDiM dimension {d} must lie in 1..={}", first.dim)));
    }
    if !(eps > 0.0) {
        return Err(Error::config("eps must be positive"));
    }
    if grids.iter().any(|g| (g.grid_h, g.grid_w, g.dim) != (first.grid_h, first.grid_w, first.dim)) {
        return Err(Error::config("training grids differ in shape"));
    }
    let mut dims: Vec<usize> = (0..first.dim).collect();
    dims.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    dims.truncate(d);
    let positions = first.positions();
    let n = grids.len() as f64;
    let mut mean = vec![0.0f64; positions * d];
    let mut cov_inverse = vec![0.0f64; positions * d * d];
    let mut x = vec![0.0f64; d];
    for pos in 0..positions {
        let mu = &mut mean[pos * d..(pos + 1) * d];
        for g in grids {
            let v = g.vector(pos);
            for (m, &c) in mu.iter_mut().zip(&dims) {
                *m += v[c] as f64;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for g in grids {
            let v = g.vector(pos);
            for (xi, (&c, &m)) in x.iter_mut().zip(dims.iter().zip(mu.iter())) {
                *xi = v[c] as f64 - m;
            }
            for i in 0..d {
                for j in 0..=i {
                    cov[(i, j)] += x[i] * x[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[(i, j)] / (n - 1.0);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] += eps;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::numeric(format!("covariance at position {pos} is not positive definite")))?;
        let inv = chol.inverse();
        let out = &mut cov_inverse[pos * d * d..(pos + 1) * d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            }
        }
    }
    Ok(GaussianField {
        grid_h: first.grid_h,
        grid_w: first.grid_w,
        d,
        selected_dims: dims,
        mean,
        cov_inverse,
        eps,
    })
}

/// `sqrt((x−μ)ᵀ Σ⁻¹ (x−μ))` at position `pos` for the full patch vector `v`.
pub fn mahalanobis(field: &GaussianField, pos: usize, v: &[f32]) -> f64 {
    let d = field.d;
    let mu = &field.mean[pos * d..(pos + 1) * d];
    let inv = &field.cov_inverse[pos * d * d..(pos + 1) * d * d];
    let x: Vec<f64> = field.selected_dims.iter().zip(mu).map(|(&c, &m)| v[c] as f64 - m).collect();
    let mut q = 0.0;
    for i in 0..d {
        let row = &inv[i * d..(i + 1) * d];
        q += x[i] * row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
    }
    q.max(0.0).sqrt()
}

pub fn mahalanobis_map(field: &GaussianField, pg: &PatchGrid, input_hw: (usize, usize), sigma: f32) -> Result<AnomalyMap> {
    if (pg.grid_h, pg.grid_w) != (field.grid_h, field.grid_w) {
        return Err(Error::config(format!(
            "patch grid {}×{} does not match the fitted {}×{}",
            pg.grid_h, pg.grid_w, field.grid_h, field.grid_w
        )));
    }
    if field.selected_dims.iter().any(|&c| c >= pg.dim) {
        return Err(Error::config("patch vectors are shorter than the selected channels"));
    }
    let scores = (0..pg.positions()).map(|p| mahalanobis(field, p, pg.vector(p))).collect();
    finish_map(scores, pg.grid_h, pg.grid_w, input_hw, sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembankConfig {
    /// Pooling window of [`embed_patches`].
    pub pool: usize,
    /// Smoothing width; `None` uses [`default_sigma`] of the input width.
    pub sigma: Option<f32>,
    pub coreset_ratio: f64,
    pub k: usize,
    /// PaDiM dimension; `None` uses `min(dim, 100)`.
    pub d: Option<usize>,
    pub eps: f64,
    pub seed: u64,
}

impl Default for MembankConfig {
    fn default() -> Self {
        Self {
            pool: 3,
            sigma: None,
            coreset_ratio: 0.1,
            k: 1,
            d: None,
            eps: 0.01,
            seed: 0,
        }
    }
}

fn embed(backbone: &Backbone, group: &LayerGroup, pool: usize, image: &Tensor) -> Result<PatchGrid> {
    embed_patches(&backbone.forward_collect(image, &group.indices)?, pool)
}

fn check_train(train: &[Sample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::config("no training images"));
    }
    if let Some(s) = train.iter().find(|s| s.is_anomalous()) {
        return Err(Error::config(format!("training image {} is labeled anomalous", s.name)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCoreModel {
    pub backbone: Backbone,
    pub group: LayerGroup,
    pub bank: MemoryBank,
    pub config: MembankConfig,
}

impl PatchCoreModel {
    pub fn fit(backbone: &Backbone, group: &LayerGroup, train: &[Sample], config: &MembankConfig) -> Result<Self> {
        check_train(train)?;
        group.validate(Some(backbone.spec()))?;
        let backbone = backbone.trim(group.last())?;
        let mut dim = 0;
        let mut patches = Vec::new();
        for s in train {
            let pg = embed(&backbone, group, config.pool, &s.image)?;
            dim = pg.dim;
            patches.extend_from_slice(&pg.vectors);
        }
        let bank = coreset_select(&patches, dim, config.coreset_ratio, config.seed)?;
        Ok(Self {
            backbone,
            group: group.clone(),
            bank,
            config: config.clone(),
        })
    }
}

impl AnomalyDetector for PatchCoreModel {
    fn anomaly_map(&self, image: &Tensor) -> Result<AnomalyMap> {
        let (_, h, w) = image.chw()?;
        let pg = embed(&self.backbone, &self.group, self.config.pool, image)?;
        patchcore_score(&self.bank, &pg, self.config.k, (h, w), self.config.sigma.unwrap_or(default_sigma(w)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PadimModel {
    pub backbone: Backbone,
    pub group: LayerGroup,
    pub field: GaussianField,
    pub config: MembankConfig,
}

impl PadimModel {
    pub fn fit(backbone: &Backbone, group: &LayerGroup, train: &[Sample], config: &MembankConfig) -> Result<Self> {
        check_train(train)?;
        group.validate(Some(backbone.spec()))?;
        let backbone = backbone.trim(group.last())?;
        let grids: Vec<PatchGrid> = train.iter().map(|s| embed(&backbone, group, config.pool, &s.image)).collect::<Result<_>>()?;
        let d = config.d.unwrap_or(grids[0].dim.min(100));
        let field = padim_fit(&grids, d, config.seed, config.eps)?;
        Ok(Self {
            backbone,
            group: group.clone(),
            field,
            config: config.clone(),
        })
    }
}

impl AnomalyDetector for PadimModel {
    fn anomaly_map(&self, image: &Tensor) -> Result<AnomalyMap> {
        let (_, h, w) = image.chw()?;
        let pg = embed(&self.backbone, &self.group, self.config.pool, image)?;
        mahalanobis_map(&self.field, &pg, (h, w), self.config.sigma.unwrap_or(default_sigma(w)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MembankSidecar {
    method: String,
    layer_group: LayerGroup,
    config: MembankConfig,
    #[serde(default)]
    source: Option<BankSource>,
    #[serde(default)]
    bank_rows: Vec<usize>,
    #[serde(default)]
    grid: Option<(usize, usize)>,
    #[serde(default)]
    selected_dims: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub const METHOD_FILE: &str = "method.json";

fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| Error::Load {
        tensor: name.to_string(),
        reason: "missing from method.json".into(),
    })
}

pub fn save_patchcore(m: &PatchCoreModel, dir: &Path) -> Result<()> {
    tensor_io::create_dir(dir)?;
    save_weights(&m.backbone, &dir.join("backbone"))?;
    let bank = tensor_io::write_f32(dir, "bank", &[m.bank.len(), m.bank.dim], &m.bank.vectors)?;
    let sidecar = MembankSidecar {
        method: "patchcore".into(),
        layer_group: m.group.clone(),
        config: m.config.clone(),
        source: Some(m.bank.source.clone()),
        bank_rows: m.bank.rows.clone(),
        grid: None,
        selected_dims: Vec::new(),
        tensors: vec![bank],
    };
    tensor_io::write_json(&dir.join(METHOD_FILE), &sidecar)
}

pub fn load_patchcore(dir: &Path) -> Result<PatchCoreModel> {
    let s: MembankSidecar = serde_json::from_value(tensor_io::read_json_value(&dir.join(METHOD_FILE))?)?;
    if s.method != "patchcore" {
        return Err(Error::config(format!("expected a patchcore model, found {}", s.method)));
    }
    let entry = find(&s.tensors, "bank")?;
    let [n, dim] = entry.shape[..] else {
        return Err(Error::Load {
            tensor: "bank".into(),
            reason: "bank must be rank 2".into(),
        });
    };
    if s.bank_rows.len() != n {
        return Err(Error::Load {
            tensor: "bank".into(),
            reason: format!("{n} rows but {} recorded indices", s.bank_rows.len()),
        });
    }
    Ok(PatchCoreModel {
        backbone: load_weights(&dir.join("backbone"))?,
        group: s.layer_group,
        bank: MemoryBank {
            dim,
            vectors: tensor_io::read_f32(dir, entry)?,
            rows: s.bank_rows,
            source: s.source.unwrap_or(BankSource {
                category: String::new(),
                seed: s.config.seed,
                ratio: s.config.coreset_ratio,
            }),
        },
        config: s.config,
    })
}

pub fn save_padim(m: &PadimModel, dir: &Path) -> Result<()> {
    tensor_io::create_dir(dir)?;
    save_weights(&m.backbone, &dir.join("backbone"))?;
    let f = &m.field;
    let p = f.positions();
    let mean = tensor_io::write_f64(dir, "mean", &[p, f.d], &f.mean)?;
    let inv = tensor_io::write_f64(dir, "cov_inverse", &[p, f.d, f.d], &f.cov_inverse)?;
    let mut config = m.config.clone();
    config.d = Some(f.d);
    config.eps = f.eps;
    let sidecar = MembankSidecar {
        method: "padim".into(),
        layer_group: m.group.clone(),
        config,
        source: None,
        bank_rows: Vec::new(),
        grid: Some((f.grid_h, f.grid_w)),
        selected_dims: f.selected_dims.clone(),
        tensors: vec![mean, inv],
    };
    tensor_io::write_json(&dir.join(METHOD_FILE), &sidecar)
}

pub fn load_padim(dir: &Path) -> Result<PadimModel> {
    let s: MembankSidecar = serde_json::from_value(tensor_io::read_json_value(&dir.join(METHOD_FILE))?)?;
    if s.method != "padim" {
        return Err(Error::config(format!("expected a padim model, found {}", s.method)));
    }
    let (grid_h, grid_w) = s.grid.ok_or_else(|| Error::config("padim method.json lacks the grid size"))?;
    let d = s.selected_dims.len();
    let mean_e = find(&s.tensors, "mean")?;
    let inv_e = find(&s.tensors, "cov_inverse")?;
    let p = grid_h * grid_w;
    if mean_e.shape != [p, d] || inv_e.shape != [p, d, d] {
        return Err(Error::Load {
            tensor: "mean".into(),
            reason: "statistics do not match the recorded grid and dimension".into(),
        });
    }
    Ok(PadimModel {
        backbone: load_weights(&dir.join("backbone"))?,
        group: s.layer_group,
        field: GaussianField {
            grid_h,
            grid_w,
            d,
            selected_dims: s.selected_dims,
            mean: tensor_io::read_f64(dir, mean_e)?,
            cov_inverse: tensor_io::read_f64(dir, inv_e)?,
            eps: s.config.eps,
        },
        config: s.config,
    })
}
