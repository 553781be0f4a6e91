use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use tinyvad_bench::config::{ExperimentConfig, Method};
use tinyvad_bench::error::{BenchError, Result};
use tinyvad_bench::grid::{self, Phase, RunOptions};
use tinyvad_bench::report::{self, ResourceRow};
use tinyvad_core::backbone::{select_layer_group, BackboneSpec, GroupMode};
use tinyvad_core::data::{default_suite, generate_category, CategorySpec};
use tinyvad_core::resources::method_resources;

#[derive(Parser)]
#[command(name = "tinyvad", version, about = "Anomaly-detection benchmarks on tiny backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GridArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Skip cells that already have a successful row.
    #[arg(long)]
    resume: bool,
    /// Config override as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic categories in MVTec layout.
    Generate {
        /// A category spec or a list of them; the built-in suite when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "TINYVAD_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Fit every grid cell and save the models.
    Train(GridArgs),
    /// Evaluate saved models.
    Eval(GridArgs),
    /// Fit and evaluate the whole grid.
    Bench {
        #[command(flatten)]
        grid: GridArgs,
        /// Also keep fitted models under `<out>/models`.
        #[arg(long)]
        save_models: bool,
    },
    /// Print the analytical resource report of one configuration.
    Resources {
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        method: String,
        #[arg(long)]
        group: String,
        /// Shared-prefix end for the paste method.
        #[arg(long)]
        split: Option<usize>,
        /// Square input size; the backbone's own size when omitted.
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, default_value_t = 40)]
        n_train: usize,
        /// Directory receiving resources.json and resources.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Compare two methods of a results directory.
    Compare {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "stfpm")]
        baseline: String,
        #[arg(long, default_value = "paste")]
        variant: String,
    },
}

fn grid_options(args: &GridArgs) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref(), &args.sets)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let opts = RunOptions {
        out: cfg.output_dir.clone(),
        jobs: args.jobs,
        resume: args.resume,
        save_models: false,
    };
    Ok((cfg, opts))
}

fn run_grid(cfg: &ExperimentConfig, phase: Phase, opts: &RunOptions) -> Result<()> {
    let summary = grid::run(cfg, phase, opts)?;
    let failed = summary.rows.iter().filter(|r| !r.is_ok()).count();
    println!(
        "{} rows ({} computed, {} reused, {failed} failed) in {}",
        summary.rows.len(),
        summary.computed,
        summary.skipped,
        opts.out.display()
    );
    Ok(())
}

fn generate(spec: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let specs: Vec<CategorySpec> = match spec {
        None => default_suite(seed),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| BenchError::io(p, e))?;
            match serde_json::from_str::<Value>(&text)? {
                v @ Value::Array(_) => serde_json::from_value(v)?,
                v => vec![serde_json::from_value(v)?],
            }
        }
    };
    for s in &specs {
        let dir = generate_category(s, out)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn resources(backbone: &str, method: &str, group: &str, split: Option<usize>, input_size: Option<usize>, n_train: usize, out: Option<&Path>, sets: &[String]) -> Result<()> {
    let cfg = ExperimentConfig::load(None, sets)?;
    let spec = BackboneSpec::preset(backbone)?;
    let method = Method::parse(method)?;
    let mode = GroupMode::parse(group)?;
    let split = if method == Method::Paste { split } else { None };
    let g = select_layer_group(&spec, mode, cfg.ref_mac_fractions.as_deref(), split)?;
    let hw = input_size.map_or(spec.input_hw, |s| (s, s));
    let mc = grid::method_config(&cfg, method, &spec, &g, n_train)?;
    let rep = method_resources(&mc, &spec, &g, hw)?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    if let Some(dir) = out {
        let row = ResourceRow::from_report(method.as_str(), &rep);
        report::write_json(&dir.join(report::RESOURCES_JSON), &[&row])?;
        report::write_csv(&dir.join(report::RESOURCES_CSV), &[row])?;
    }
    Ok(())
}

fn compare(results: &Path, baseline: &str, variant: &str) -> Result<()> {
    let rows = report::read_rows(&results.join(report::RESULTS_CSV))?;
    if rows.is_empty() {
        return Err(BenchError::config(format!("no results in {}", results.display())));
    }
    let table = report::report_compare(&rows, baseline, variant);
    let path = results.join(format!("compare_{baseline}_vs_{variant}.csv"));
    report::write_csv(&path, &table)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
    println!("category\tseed\tmemory%\tinference%\ttraining%\tram%\tF1Δ%");
    for r in &table {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}{}",
            r.category,
            r.seed,
            fmt(r.memory_improvement_pct),
            fmt(r.inference_macs_improvement_pct),
            fmt(r.training_macs_improvement_pct),
            fmt(r.training_ram_improvement_pct),
            fmt(r.pixel_f1_delta_pct),
            if r.missing.is_empty() { String::new() } else { format!("\t(missing {})", r.missing) }
        );
    }
    println!("written to {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, out, seed } => generate(spec.as_deref(), &out, seed),
        Command::Train(args) => grid_options(&args).and_then(|(cfg, opts)| run_grid(&cfg, Phase::Train, &opts)),
        Command::Eval(args) => grid_options(&args).and_then(|(cfg, opts)| run_grid(&cfg, Phase::Eval, &opts)),
        Command::Bench { grid, save_models } => grid_options(&grid).and_then(|(cfg, mut opts)| {
            opts.save_models = save_models;
            run_grid(&cfg, Phase::Bench, &opts)
        }),
        Command::Resources {
            backbone,
            method,
            group,
            split,
            input_size,
            n_train,
            out,
            sets,
        } => resources(&backbone, &method, &group, split, input_size, n_train, out.as_deref(), &sets),
        Command::Compare { results, baseline, variant } => compare(&results, &baseline, &variant),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
