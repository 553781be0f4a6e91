//! Executes the method × backbone × layer-group × category × seed grid.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tinyvad_core::backbone::archive::{load_weights, save_weights};
use tinyvad_core::backbone::{build_backbone, pretrain_teacher, Backbone, BackboneSpec, GroupMode, LayerGroup, PretrainReport};
use tinyvad_core::data::{load_mvtec, shapes_dataset, synthesize_category, CategoryData};
use tinyvad_core::methods::membank::{self, MembankConfig, PadimModel, PatchCoreModel};
use tinyvad_core::methods::stfpm::{self, FitConfig, TeacherStudentModel};
use tinyvad_core::methods::AnomalyDetector;
use tinyvad_core::metrics::evaluate;
use tinyvad_core::resources::{method_resources, MethodConfig, ResourceReport};

use crate::config::{DatasetConfig, ExperimentConfig, Method, TeacherConfig};
use crate::error::{BenchError, Result};
use crate::report::{self, BenchmarkRow, ResourceRow, RowAppender, RowKey, Status, SCHEMA_VERSION};

/// One grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub spec: BackboneSpec,
    pub category: String,
    pub method: Method,
    pub mode: GroupMode,
}

impl Cell {
    pub fn key(&self) -> RowKey {
        (self.category.clone(), self.method.as_str().into(), self.spec.name.clone(), self.mode.as_str().into(), self.seed)
    }

    /// Model directory relative to the output root.
    pub fn model_dir(&self) -> PathBuf {
        PathBuf::from("models")
            .join(sanitize(&self.category))
            .join(format!("{}-{}-{}-seed{}", self.method, self.mode, sanitize(&self.spec.name), self.seed))
    }

    fn empty_row(&self) -> BenchmarkRow {
        BenchmarkRow {
            schema_version: SCHEMA_VERSION,
            category: self.category.clone(),
            method: self.method.as_str().into(),
            backbone: self.spec.name.clone(),
            layer_group: self.mode.as_str().into(),
            seed: self.seed,
            taps: String::new(),
            split: 0,
            size_fraction: None,
            status: Status::Ok,
            error: String::new(),
            pixel_f1: None,
            pixel_auroc: None,
            image_f1: None,
            image_auroc: None,
            best_threshold: None,
            backbone_macs: None,
            scoring_macs: None,
            inference_macs: None,
            training_macs: None,
            param_bytes: None,
            bank_bytes: None,
            training_ram_bytes: None,
            wall_time_s: 0.0,
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// All cells of `cfg`, ordered by seed, backbone, category, method and group.
pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let pairs = cfg.pairs()?;
    let specs: Vec<BackboneSpec> = cfg.backbones.iter().map(|b| b.resolve()).collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for seed in cfg.seeds() {
        for spec in &specs {
            for category in cfg.dataset.category_names() {
                for &(method, mode) in &pairs {
                    cells.push(Cell {
                        seed,
                        spec: spec.clone(),
                        category: category.clone(),
                        method,
                        mode,
                    });
                }
            }
        }
    }
    let mut seen = HashSet::new();
    if let Some(dup) = cells.iter().find(|c| !seen.insert(c.key())) {
        return Err(BenchError::config(format!("duplicate grid cell {:?}", dup.key())));
    }
    Ok(cells)
}

/// A category's data and its anomaly size (generated data only).
pub fn load_category(dataset: &DatasetConfig, seed: u64, name: &str) -> Result<(CategoryData, Option<f64>)> {
    match dataset {
        DatasetConfig::Mvtec { root, input_size, .. } => Ok((load_mvtec(root, name, input_size.map(|s| (s, s)))?, None)),
        _ => {
            let specs = dataset.generated_specs(seed).unwrap_or_default();
            let spec = specs
                .iter()
                .find(|c| c.name == name)
                .ok_or_else(|| BenchError::config(format!("unknown category `{name}`")))?;
            Ok((synthesize_category(spec)?, Some(spec.anomaly.size_fraction)))
        }
    }
}

fn input_hw(data: &CategoryData) -> Result<(usize, usize)> {
    let first = data
        .train
        .first()
        .ok_or_else(|| BenchError::config(format!("category {} has no training images", data.name)))?;
    let (_, h, w) = first.image.chw()?;
    Ok((h, w))
}

/// The accountant's description of `method` as configured.
pub fn method_config(cfg: &ExperimentConfig, method: Method, spec: &BackboneSpec, group: &LayerGroup, n_train: usize) -> Result<MethodConfig> {
    Ok(match method {
        Method::Stfpm => MethodConfig::TeacherStudent {
            shared_prefix_end: 0,
            batch: cfg.fit.batch,
        },
        Method::Paste => MethodConfig::TeacherStudent {
            shared_prefix_end: group.shared_prefix_end,
            batch: cfg.fit.batch,
        },
        Method::Patchcore => MethodConfig::PatchCore {
            coreset_ratio: cfg.membank.coreset_ratio,
            n_train,
        },
        Method::Padim => {
            let trace = spec.trace(spec.input_hw)?;
            let dim: usize = group.indices.iter().map(|&i| trace[i].out_ch).sum();
            MethodConfig::Padim {
                d: cfg.membank.d.unwrap_or(dim.min(100)),
                n_train,
            }
        }
    })
}

pub fn cell_resources(cfg: &ExperimentConfig, cell: &Cell, group: &LayerGroup, data: &CategoryData) -> Result<ResourceReport> {
    let method = method_config(cfg, cell.method, &cell.spec, group, data.train.len())?;
    Ok(method_resources(&method, &cell.spec, group, input_hw(data)?)?)
}

/// A fitted detector of any method.
#[derive(Clone, Debug)]
pub enum Trained {
    TeacherStudent(TeacherStudentModel),
    PatchCore(PatchCoreModel),
    Padim(PadimModel),
}

impl Trained {
    pub fn detector(&self) -> &dyn AnomalyDetector {
        match self {
            Trained::TeacherStudent(m) => m,
            Trained::PatchCore(m) => m,
            Trained::Padim(m) => m,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Trained::TeacherStudent(m) => stfpm::save_model(m, dir)?,
            Trained::PatchCore(m) => membank::save_patchcore(m, dir)?,
            Trained::Padim(m) => membank::save_padim(m, dir)?,
        }
        Ok(())
    }

    pub fn load(method: Method, dir: &Path) -> Result<Self> {
        Ok(match method {
            Method::Stfpm | Method::Paste => Trained::TeacherStudent(stfpm::load_model(dir)?),
            Method::Patchcore => Trained::PatchCore(membank::load_patchcore(dir)?),
            Method::Padim => Trained::Padim(membank::load_padim(dir)?),
        })
    }
}

/// Fits `method` on the normal training images. Model randomness depends on
/// the run seed only, so methods with identical setups train identically.
pub fn fit_method(cfg: &ExperimentConfig, method: Method, seed: u64, teacher: &Backbone, group: &LayerGroup, data: &CategoryData) -> Result<Trained> {
    let mb = MembankConfig {
        seed,
        ..cfg.membank.clone()
    };
    Ok(match method {
        Method::Stfpm | Method::Paste => {
            let mut m = stfpm::init_model(teacher, group, seed)?;
            m.fit(&data.train, &FitConfig { seed, ..cfg.fit.clone() })?;
            Trained::TeacherStudent(m)
        }
        Method::Patchcore => {
            let mut m = PatchCoreModel::fit(teacher, group, &data.train, &mb)?;
            m.bank.source.category = data.name.clone();
            Trained::PatchCore(m)
        }
        Method::Padim => Trained::Padim(PadimModel::fit(teacher, group, &data.train, &mb)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TeacherStamp {
    spec: BackboneSpec,
    seed: u64,
    teacher: TeacherConfig,
    #[serde(default)]
    report: Option<PretrainReport>,
}

const TEACHER_STAMP: &str = "pretrain.json";

/// The frozen backbone shared by every method of one (backbone, seed).
///
/// Loaded from `teacher.weights` when configured; otherwise pretrained on the
/// synthetic shapes task and cached under `<out>/teachers`.
pub fn obtain_teacher(cfg: &ExperimentConfig, spec: &BackboneSpec, seed: u64, out: &Path) -> Result<Backbone> {
    if let Some(path) = &cfg.teacher.weights {
        let b = load_weights(path)?;
        if b.spec() != spec {
            return Err(BenchError::config(format!("teacher weights at {} do not describe backbone {}", path.display(), spec.name)));
        }
        return Ok(b);
    }
    let dir = out.join("teachers").join(format!("{}-seed{seed}", sanitize(&spec.name)));
    let mut stamp = TeacherStamp {
        spec: spec.clone(),
        seed,
        teacher: cfg.teacher.clone(),
        report: None,
    };
    if let Ok(text) = std::fs::read_to_string(dir.join(TEACHER_STAMP)) {
        if let Ok(old) = serde_json::from_str::<TeacherStamp>(&text) {
            if (TeacherStamp { report: None, ..old }) == stamp {
                if let Ok(b) = load_weights(&dir) {
                    log::info!("reusing teacher {}", dir.display());
                    return Ok(b);
                }
            }
        }
    }
    log::info!("pretraining teacher {} for seed {seed}", spec.name);
    let t = &cfg.teacher;
    let data = shapes_dataset(t.images_per_class, t.image_size, seed);
    let init = build_backbone(spec, seed)?;
    let (teacher, rep) = pretrain_teacher(&init, &data, &tinyvad_core::backbone::PretrainConfig { seed, ..t.pretrain.clone() })?;
    log::info!("teacher {} seed {seed}: train accuracy {:.3}", spec.name, rep.train_accuracy);
    save_weights(&teacher, &dir)?;
    stamp.report = Some(rep);
    report::write_json(&dir.join(TEACHER_STAMP), &stamp)?;
    Ok(teacher)
}

/// Which part of the pipeline a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Fit and save models.
    Train,
    /// Evaluate previously saved models.
    Eval,
    /// Fit and evaluate in one pass.
    Bench,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
    pub resume: bool,
    pub save_models: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<BenchmarkRow>,
    /// Cells executed in this run.
    pub computed: usize,
    pub skipped: usize,
}

/// Runs `f` over `items` on up to `jobs` threads, feeding results to `sink`
/// on the calling thread in completion order.
pub fn parallel_map<T, R>(items: Vec<T>, jobs: usize, f: impl Fn(T) -> R + Sync, mut sink: impl FnMut(R)) -> usize
where
    T: Send,
    R: Send,
{
    let n = items.len();
    let queue = Mutex::new(VecDeque::from(items));
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            let tx = tx.clone();
            let (queue, f) = (&queue, &f);
            s.spawn(move || loop {
                let Some(item) = queue.lock().expect("queue lock").pop_front() else { break };
                if tx.send(f(item)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for r in rx {
            sink(r);
        }
    });
    n
}

fn execute(cfg: &ExperimentConfig, cell: &Cell, phase: Phase, teacher: Option<&Backbone>, opts: &RunOptions) -> BenchmarkRow {
    let start = Instant::now();
    let mut row = cell.empty_row();
    let outcome = (|| -> Result<()> {
        let (data, size) = load_category(&cfg.dataset, cell.seed, &cell.category)?;
        row.size_fraction = size;
        let group = cfg.layer_group(&cell.spec, cell.method, cell.mode)?;
        row.taps = group.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-");
        row.split = if cell.method == Method::Paste { group.shared_prefix_end } else { 0 };
        row.set_resources(&cell_resources(cfg, cell, &group, &data)?);
        let dir = opts.out.join(cell.model_dir());
        let model = match phase {
            Phase::Eval => Trained::load(cell.method, &dir)?,
            Phase::Train | Phase::Bench => {
                let teacher = teacher.expect("teachers are prepared for fitting phases");
                let m = fit_method(cfg, cell.method, cell.seed, teacher, &group, &data)?;
                if phase == Phase::Train || opts.save_models {
                    m.save(&dir)?;
                }
                m
            }
        };
        if phase != Phase::Train {
            row.set_metrics(&evaluate(model.detector(), &data)?);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("cell {:?} failed: {e}", cell.key());
        row.status = Status::Failed;
        row.error = e.to_string();
    }
    row.wall_time_s = start.elapsed().as_secs_f64();
    row
}

/// Results table of each phase.
pub fn results_file(phase: Phase) -> &'static str {
    match phase {
        Phase::Train => "training.csv",
        Phase::Eval | Phase::Bench => report::RESULTS_CSV,
    }
}

/// Executes the grid and writes every output file under `opts.out`.
///
/// With `resume`, cells that already have a successful row are skipped;
/// failed cells are retried.
pub fn run(cfg: &ExperimentConfig, phase: Phase, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let cells = plan(cfg)?;
    std::fs::create_dir_all(&opts.out).map_err(|e| BenchError::io(&opts.out, e))?;
    let table = opts.out.join(results_file(phase));
    let existing = if opts.resume {
        report::read_rows(&table)?
    } else {
        if table.exists() {
            std::fs::remove_file(&table).map_err(|e| BenchError::io(&table, e))?;
        }
        Vec::new()
    };
    let done: HashSet<RowKey> = existing.iter().filter(|r| r.is_ok()).map(BenchmarkRow::key).collect();
    let pending: Vec<&Cell> = cells.iter().filter(|c| !done.contains(&c.key())).collect();
    let skipped = cells.len() - pending.len();
    log::info!("{} cells planned, {} to run, {} already done", cells.len(), pending.len(), skipped);

    let mut teachers: BTreeMap<(String, u64), Backbone> = BTreeMap::new();
    if phase != Phase::Eval {
        let mut needed: Vec<(BackboneSpec, u64)> = Vec::new();
        for c in &pending {
            if !needed.iter().any(|(s, seed)| s == &c.spec && *seed == c.seed) {
                needed.push((c.spec.clone(), c.seed));
            }
        }
        let mut failures = Vec::new();
        parallel_map(
            needed,
            opts.jobs,
            |(spec, seed)| (spec.name.clone(), seed, obtain_teacher(cfg, &spec, seed, &opts.out)),
            |(name, seed, r)| match r {
                Ok(b) => {
                    teachers.insert((name, seed), b);
                }
                Err(e) => failures.push(format!("{name} seed {seed}: {e}")),
            },
        );
        for f in failures {
            log::warn!("teacher unavailable, its cells will fail: {f}");
        }
    }

    let mut appender = RowAppender::open(&table)?;
    let mut fresh = Vec::new();
    let mut write_error = None;
    let computed = parallel_map(
        pending,
        opts.jobs,
        |cell| {
            let teacher = teachers.get(&(cell.spec.name.clone(), cell.seed));
            if phase != Phase::Eval && teacher.is_none() {
                let mut row = cell.empty_row();
                row.status = Status::Failed;
                row.error = "teacher backbone unavailable".into();
                return row;
            }
            execute(cfg, cell, phase, teacher, opts)
        },
        |row| {
            log::info!(
                "{} {} {} seed {}: {:?} pixel F1 {:?}",
                row.category,
                row.method,
                row.layer_group,
                row.seed,
                row.status,
                row.pixel_f1
            );
            if let Err(e) = appender.append(&row) {
                write_error.get_or_insert(e);
            }
            fresh.push(row);
        },
    );
    drop(appender);
    if let Some(e) = write_error {
        return Err(e);
    }

    let planned: HashSet<RowKey> = cells.iter().map(Cell::key).collect();
    let rows: Vec<BenchmarkRow> = report::dedup_sorted(existing.into_iter().chain(fresh))
        .into_iter()
        .filter(|r| planned.contains(&r.key()))
        .collect();
    let mut resources: Vec<ResourceRow> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let rr = ResourceRow {
            method: r.method.clone(),
            backbone: r.backbone.clone(),
            layer_group: r.layer_group.clone(),
            split: r.split,
            backbone_macs: r.backbone_macs.unwrap_or_default(),
            scoring_macs: r.scoring_macs.unwrap_or_default(),
            training_macs: r.training_macs.unwrap_or_default(),
            param_bytes: r.param_bytes.unwrap_or_default(),
            bank_bytes: r.bank_bytes.unwrap_or_default(),
            training_ram_bytes: r.training_ram_bytes.unwrap_or_default(),
        };
        if !resources.contains(&rr) {
            resources.push(rr);
        }
    }
    if phase == Phase::Train {
        report::write_csv(&table, &rows)?;
    } else {
        report::write_outputs(&opts.out, cfg, &rows, &resources)?;
    }
    Ok(RunSummary { rows, computed, skipped })
}
