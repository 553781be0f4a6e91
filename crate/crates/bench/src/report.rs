//! Result rows, CSV/JSON writers, plot data and method comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinyvad_core::metrics::EvalResult;
use tinyvad_core::resources::{ResourceReport, MB};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const RESOURCES_CSV: &str = "resources.csv";
pub const RESOURCES_JSON: &str = "resources.json";
pub const FIG_PERFORMANCE: &str = "fig_performance_vs_resources.csv";
pub const FIG_LAYER_GROUPS: &str = "fig_layergroup_by_category.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// One grid cell. Metric fields are empty when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub schema_version: u32,
    pub category: String,
    pub method: String,
    pub backbone: String,
    pub layer_group: String,
    pub seed: u64,
    /// Tapped layers joined by `-`.
    pub taps: String,
    pub split: usize,
    pub size_fraction: Option<f64>,
    pub status: Status,
    pub error: String,
    pub pixel_f1: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub image_f1: Option<f64>,
    pub image_auroc: Option<f64>,
    pub best_threshold: Option<f32>,
    pub backbone_macs: Option<u64>,
    pub scoring_macs: Option<u64>,
    pub inference_macs: Option<u64>,
    pub training_macs: Option<u64>,
    pub param_bytes: Option<u64>,
    pub bank_bytes: Option<u64>,
    pub training_ram_bytes: Option<u64>,
    pub wall_time_s: f64,
}

pub type RowKey = (String, String, String, String, u64);

impl BenchmarkRow {
    pub fn key(&self) -> RowKey {
        (self.category.clone(), self.method.clone(), self.backbone.clone(), self.layer_group.clone(), self.seed)
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn set_metrics(&mut self, r: &EvalResult) {
        self.pixel_f1 = Some(r.pixel_f1);
        self.pixel_auroc = Some(r.pixel_auroc);
        self.image_f1 = Some(r.image_f1);
        self.image_auroc = Some(r.image_auroc);
        self.best_threshold = Some(r.best_threshold);
    }

    pub fn set_resources(&mut self, r: &ResourceReport) {
        self.backbone_macs = Some(r.backbone_macs);
        self.scoring_macs = Some(r.scoring_macs);
        self.inference_macs = Some(r.inference_macs);
        self.training_macs = Some(r.training_macs);
        self.param_bytes = Some(r.param_bytes);
        self.bank_bytes = Some(r.bank_bytes);
        self.training_ram_bytes = Some(r.training_ram_bytes);
    }

    pub fn memory_bytes(&self) -> Option<u64> {
        Some(self.param_bytes? + self.bank_bytes?)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    Ok(())
}

/// Writes through a temporary file so readers never see a partial table.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| BenchError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BenchError::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads a results table; a missing file is an empty table.
pub fn read_rows(path: &Path) -> Result<Vec<BenchmarkRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(path)?.deserialize() {
        let row: BenchmarkRow = r?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(BenchError::config(format!(
                "{} was written with schema version {}, expected {SCHEMA_VERSION}",
                path.display(),
                row.schema_version
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Appends rows to a results table as cells finish.
pub struct RowAppender {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl RowAppender {
    pub fn open(path: &Path) -> Result<Self> {
        create_parent(path)?;
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BenchError::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, row: &BenchmarkRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush().map_err(|e| BenchError::io(&self.path, e))
    }
}

/// Keeps the last row per key, ordered by key.
pub fn dedup_sorted(rows: impl IntoIterator<Item = BenchmarkRow>) -> Vec<BenchmarkRow> {
    let mut by_key: BTreeMap<RowKey, BenchmarkRow> = BTreeMap::new();
    for r in rows {
        by_key.insert(r.key(), r);
    }
    by_key.into_values().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub method: String,
    pub backbone: String,
    pub layer_group: String,
    pub split: usize,
    pub backbone_macs: u64,
    pub scoring_macs: u64,
    pub training_macs: u64,
    pub param_bytes: u64,
    pub bank_bytes: u64,
    pub training_ram_bytes: u64,
}

impl ResourceRow {
    pub fn from_report(method: &str, r: &ResourceReport) -> Self {
        Self {
            method: method.to_string(),
            backbone: r.backbone.clone(),
            layer_group: r.layer_group.clone(),
            split: r.split,
            backbone_macs: r.backbone_macs,
            scoring_macs: r.scoring_macs,
            training_macs: r.training_macs,
            param_bytes: r.param_bytes,
            bank_bytes: r.bank_bytes,
            training_ram_bytes: r.training_ram_bytes,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Mean pixel F1 against memory and compute, one line per configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformancePoint {
    pub method: String,
    pub backbone: String,
    pub layer_group: String,
    pub split: usize,
    pub n: usize,
    pub pixel_f1_mean: f64,
    pub pixel_auroc_mean: f64,
    pub memory_mb: f64,
    pub inference_macs: u64,
    pub training_macs: u64,
    pub training_ram_mb: f64,
}

pub fn performance_points(rows: &[BenchmarkRow]) -> Vec<PerformancePoint> {
    let mut groups: BTreeMap<(String, String, String), Vec<&BenchmarkRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        groups.entry((r.method.clone(), r.backbone.clone(), r.layer_group.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|((method, backbone, layer_group), rs)| {
            let f1: Vec<f64> = rs.iter().filter_map(|r| r.pixel_f1).collect();
            let auroc: Vec<f64> = rs.iter().filter_map(|r| r.pixel_auroc).collect();
            let first = rs[0];
            // Membank sizes follow the training-set size, so report the mean.
            let avg = |f: &dyn Fn(&BenchmarkRow) -> Option<u64>| -> Option<f64> {
                let v: Option<Vec<f64>> = rs.iter().map(|r| f(r).map(|x| x as f64)).collect();
                v.map(|v| mean(&v))
            };
            Some(PerformancePoint {
                method,
                backbone,
                layer_group,
                split: first.split,
                n: f1.len(),
                pixel_f1_mean: mean(&f1),
                pixel_auroc_mean: mean(&auroc),
                memory_mb: avg(&|r| r.memory_bytes())? / MB,
                inference_macs: avg(&|r| r.inference_macs)?.round() as u64,
                training_macs: avg(&|r| r.training_macs)?.round() as u64,
                training_ram_mb: avg(&|r| r.training_ram_bytes)? / MB,
            })
        })
        .collect()
}

/// Pseudo-method names of the averaged rows in [`layer_group_bars`].
pub const ALL_METHODS: &str = "all_methods";
pub const ALL_EXCEPT_PASTE: &str = "all_methods_except_paste";
/// Category name of the bars averaging the per-category means.
pub const ALL_CATEGORIES: &str = "all";

/// Pixel-F1 mean and variance per category and layer group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGroupBar {
    pub category: String,
    pub size_fraction: Option<f64>,
    pub layer_group: String,
    /// A single method, or one of the averaged pseudo-methods.
    pub method: String,
    pub n: usize,
    pub pixel_f1_mean: f64,
    pub pixel_f1_var: f64,
}

/// Per-method bars plus averages over all methods with and without paste,
/// each also averaged over categories.
pub fn layer_group_bars(rows: &[BenchmarkRow]) -> Vec<LayerGroupBar> {
    let mut cells: BTreeMap<(String, String, String), (Option<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let Some(f1) = r.pixel_f1 else { continue };
        let methods = [r.method.as_str(), ALL_METHODS, if r.method == "paste" { "" } else { ALL_EXCEPT_PASTE }];
        for m in methods.into_iter().filter(|m| !m.is_empty()) {
            let e = cells
                .entry((r.category.clone(), r.layer_group.clone(), m.to_string()))
                .or_insert((r.size_fraction, Vec::new()));
            e.1.push(f1);
        }
    }
    let mut bars: Vec<LayerGroupBar> = cells
        .into_iter()
        .map(|((category, layer_group, method), (size_fraction, v))| LayerGroupBar {
            category,
            size_fraction,
            layer_group,
            method,
            n: v.len(),
            pixel_f1_mean: mean(&v),
            pixel_f1_var: variance(&v),
        })
        .collect();
    let mut overall: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for b in &bars {
        overall.entry((b.layer_group.clone(), b.method.clone())).or_default().push(b.pixel_f1_mean);
    }
    bars.extend(overall.into_iter().map(|((layer_group, method), v)| LayerGroupBar {
        category: ALL_CATEGORIES.to_string(),
        size_fraction: None,
        layer_group,
        method,
        n: v.len(),
        pixel_f1_mean: mean(&v),
        pixel_f1_var: variance(&v),
    }));
    bars
}

#[derive(Clone, Debug, Serialize)]
struct ResultsDocument<'a, C: Serialize> {
    schema_version: u32,
    config: &'a C,
    rows: &'a [BenchmarkRow],
}

/// Writes the results tables and plot data for a finished grid.
pub fn write_outputs<C: Serialize>(dir: &Path, config: &C, rows: &[BenchmarkRow], resources: &[ResourceRow]) -> Result<()> {
    write_csv(&dir.join(RESULTS_CSV), rows)?;
    write_json(
        &dir.join(RESULTS_JSON),
        &ResultsDocument {
            schema_version: SCHEMA_VERSION,
            config,
            rows,
        },
    )?;
    write_csv(&dir.join(RESOURCES_CSV), resources)?;
    write_json(&dir.join(RESOURCES_JSON), resources)?;
    write_csv(&dir.join(FIG_PERFORMANCE), &performance_points(rows))?;
    write_csv(&dir.join(FIG_LAYER_GROUPS), &layer_group_bars(rows))
}

/// Relative change of `variant` against `baseline` in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub category: String,
    pub backbone: String,
    pub seed: u64,
    pub baseline_group: String,
    pub variant_group: String,
    /// Empty when both rows exist, otherwise which side is missing.
    pub missing: String,
    /// Reductions: `(baseline − variant) / baseline · 100`.
    pub memory_improvement_pct: Option<f64>,
    pub inference_macs_improvement_pct: Option<f64>,
    pub training_macs_improvement_pct: Option<f64>,
    pub training_ram_improvement_pct: Option<f64>,
    /// `(variant − baseline) / baseline · 100`.
    pub pixel_f1_delta_pct: Option<f64>,
    pub baseline_pixel_f1: Option<f64>,
    pub variant_pixel_f1: Option<f64>,
}

fn reduction(base: Option<u64>, var: Option<u64>) -> Option<f64> {
    let (b, v) = (base? as f64, var? as f64);
    (b != 0.0).then(|| (b - v) / b * 100.0)
}

fn delta(base: Option<f64>, var: Option<f64>) -> Option<f64> {
    let (b, v) = (base?, var?);
    (b != 0.0).then(|| (v - b) / b * 100.0)
}

/// The baseline layer group a variant row is compared against: a paste
/// group pairs with the equivalent group it was derived from.
fn counterpart_group(variant_group: &str) -> &str {
    if variant_group == "paste" {
        "equiv"
    } else {
        variant_group
    }
}

/// Pairs `variant` rows with `baseline` rows of the same category, backbone,
/// seed and corresponding layer group. Unpaired rows appear with gaps.
pub fn report_compare(rows: &[BenchmarkRow], baseline: &str, variant: &str) -> Vec<ComparisonRow> {
    let ok: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let find = |method: &str, cat: &str, bb: &str, seed: u64, group: &str| {
        ok.iter().copied().find(|r| r.method == method && r.category == cat && r.backbone == bb && r.seed == seed && r.layer_group == group)
    };
    let mut out = Vec::new();
    let mut paired_baselines = BTreeSet::new();
    for v in ok.iter().filter(|r| r.method == variant) {
        let group = if baseline == variant { v.layer_group.as_str() } else { counterpart_group(&v.layer_group) };
        let b = find(baseline, &v.category, &v.backbone, v.seed, group);
        if let Some(b) = b {
            paired_baselines.insert(b.key());
        }
        out.push(compare_pair(b, Some(v), group, &v.layer_group));
    }
    for b in ok.iter().filter(|r| r.method == baseline && !paired_baselines.contains(&r.key())) {
        out.push(compare_pair(Some(b), None, &b.layer_group, ""));
    }
    out.sort_by(|a, b| (&a.category, &a.backbone, a.seed, &a.baseline_group).cmp(&(&b.category, &b.backbone, b.seed, &b.baseline_group)));
    out
}

fn compare_pair(b: Option<&BenchmarkRow>, v: Option<&BenchmarkRow>, baseline_group: &str, variant_group: &str) -> ComparisonRow {
    let any = b.or(v).expect("at least one side of a comparison exists");
    let get = |r: Option<&BenchmarkRow>, f: fn(&BenchmarkRow) -> Option<u64>| r.and_then(f);
    let f1 = |r: Option<&BenchmarkRow>| r.and_then(|r| r.pixel_f1);
    ComparisonRow {
        category: any.category.clone(),
        backbone: any.backbone.clone(),
        seed: any.seed,
        baseline_group: baseline_group.to_string(),
        variant_group: variant_group.to_string(),
        missing: match (b, v) {
            (None, _) => "baseline".into(),
            (_, None) => "variant".into(),
            _ => String::new(),
        },
        memory_improvement_pct: reduction(get(b, BenchmarkRow::memory_bytes), get(v, BenchmarkRow::memory_bytes)),
        inference_macs_improvement_pct: reduction(get(b, |r| r.inference_macs), get(v, |r| r.inference_macs)),
        training_macs_improvement_pct: reduction(get(b, |r| r.training_macs), get(v, |r| r.training_macs)),
        training_ram_improvement_pct: reduction(get(b, |r| r.training_ram_bytes), get(v, |r| r.training_ram_bytes)),
        pixel_f1_delta_pct: delta(f1(b), f1(v)),
        baseline_pixel_f1: f1(b),
        variant_pixel_f1: f1(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(category: &str, method: &str, group: &str, seed: u64, f1: f64, macs: u64) -> BenchmarkRow {
        BenchmarkRow {
            schema_version: SCHEMA_VERSION,
            category: category.into(),
            method: method.into(),
            backbone: "tiny_irnet8".into(),
            layer_group: group.into(),
            seed,
            taps: "2-3-6".into(),
            split: 0,
            size_fraction: Some(0.01),
            status: Status::Ok,
            error: String::new(),
            pixel_f1: Some(f1),
            pixel_auroc: Some(0.9),
            image_f1: Some(1.0),
            image_auroc: Some(1.0),
            best_threshold: Some(0.5),
            backbone_macs: Some(macs),
            scoring_macs: Some(0),
            inference_macs: Some(macs),
            training_macs: Some(3 * macs),
            param_bytes: Some(1000),
            bank_bytes: Some(0),
            training_ram_bytes: Some(5000),
            wall_time_s: 1.5,
        }
    }

    #[test]
    fn csv_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_CSV);
        let mut failed = row("a", "padim", "equiv", 0, 0.0, 1);
        failed.status = Status::Failed;
        failed.error = "numeric error: boom, \"quoted\"".into();
        failed.pixel_f1 = None;
        failed.best_threshold = None;
        let rows = vec![row("a", "stfpm", "equiv", 0, 0.4, 100), failed];
        {
            let mut app = RowAppender::open(&path).unwrap();
            app.append(&rows[0]).unwrap();
        }
        let mut app = RowAppender::open(&path).unwrap();
        app.append(&rows[1]).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);
        assert!(read_rows(&dir.path().join("absent.csv")).unwrap().is_empty());
    }

    #[test]
    fn dedup_keeps_last() {
        let a = row("a", "stfpm", "equiv", 0, 0.1, 1);
        let b = row("a", "stfpm", "equiv", 0, 0.2, 1);
        let c = row("0", "stfpm", "equiv", 0, 0.3, 1);
        let out = dedup_sorted([a, b.clone(), c.clone()]);
        assert_eq!(out, vec![c, b]);
    }

    #[test]
    fn identical_methods_compare_to_zero() {
        let rows = vec![row("a", "stfpm", "equiv", 0, 0.4, 100), row("b", "stfpm", "equiv", 0, 0.5, 100)];
        let cmp = report_compare(&rows, "stfpm", "stfpm");
        assert_eq!(cmp.len(), 2);
        for c in cmp {
            assert_eq!(c.missing, "");
            assert_eq!(c.inference_macs_improvement_pct, Some(0.0));
            assert_eq!(c.memory_improvement_pct, Some(0.0));
            assert_eq!(c.training_ram_improvement_pct, Some(0.0));
            assert_eq!(c.pixel_f1_delta_pct, Some(0.0));
        }
    }

    #[test]
    fn paste_pairs_with_equiv_and_gaps_are_explicit() {
        let mut p = row("a", "paste", "paste", 0, 0.3, 75);
        p.param_bytes = Some(900);
        let rows = vec![row("a", "stfpm", "equiv", 0, 0.4, 100), p, row("b", "stfpm", "equiv", 0, 0.4, 100), row("c", "paste", "paste", 0, 0.4, 100)];
        let cmp = report_compare(&rows, "stfpm", "paste");
        assert_eq!(cmp.len(), 3);
        let a = &cmp[0];
        assert_eq!(a.inference_macs_improvement_pct, Some(25.0));
        assert_eq!(a.memory_improvement_pct, Some(10.0));
        let f1 = a.pixel_f1_delta_pct.unwrap();
        assert!((f1 - (0.3 - 0.4) / 0.4 * 100.0).abs() < 1e-12);
        assert!(f1 < 0.0 && a.variant_pixel_f1 < a.baseline_pixel_f1);
        assert_eq!(cmp[1].missing, "variant");
        assert_eq!(cmp[1].inference_macs_improvement_pct, None);
        assert_eq!(cmp[2].missing, "baseline");
    }

    #[test]
    fn figure_tables() {
        let mut rows = vec![
            row("a", "stfpm", "equiv", 0, 0.4, 100),
            row("a", "stfpm", "equiv", 1, 0.6, 100),
            row("a", "paste", "paste", 0, 0.2, 80),
        ];
        let mut bad = row("a", "padim", "equiv", 0, 0.9, 1);
        bad.status = Status::Failed;
        rows.push(bad);
        let pts = performance_points(&rows);
        assert_eq!(pts.len(), 2);
        let s = pts.iter().find(|p| p.method == "stfpm").unwrap();
        assert_eq!(s.n, 2);
        assert!((s.pixel_f1_mean - 0.5).abs() < 1e-12);
        assert_eq!(s.memory_mb, 1000.0 / MB);
        rows.push(row("b", "stfpm", "equiv", 0, 0.8, 100));
        let bars = layer_group_bars(&rows);
        let get = |g: &str, m: &str| bars.iter().find(|b| b.category == "a" && b.layer_group == g && b.method == m).unwrap();
        assert!((get("equiv", "stfpm").pixel_f1_var - 0.01).abs() < 1e-12);
        assert_eq!(get("equiv", ALL_EXCEPT_PASTE).n, 2);
        assert_eq!(get("paste", ALL_METHODS).n, 1);
        assert!(!bars.iter().any(|b| b.layer_group == "paste" && b.method == ALL_EXCEPT_PASTE));
        let all = bars.iter().find(|b| b.category == ALL_CATEGORIES && b.layer_group == "equiv" && b.method == "stfpm").unwrap();
        assert_eq!(all.n, 2);
        assert!((all.pixel_f1_mean - 0.65).abs() < 1e-12);
        assert!((all.pixel_f1_var - 0.0225).abs() < 1e-12);
    }
}
