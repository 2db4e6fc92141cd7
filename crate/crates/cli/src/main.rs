use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rds_deepc::dataset::{dataset_hash, fmt_f64, read_dataset, read_manifest, write_csv, write_dataset};
use rds_deepc::deepc::NormalForm;
use rds_deepc::experiment::{
    benchmark_timing, emit_report, nominal_operating_point, run_experiment, write_scores, ExperimentConfig, Selector,
};
use rds_deepc::hankel::{build_partitioned, CorruptionMode};
use rds_deepc::plants::{collect_dataset, corrupt_dataset, CorruptionSpec, PlantConfig};
use rds_deepc::sensitivity::{select_low_sensitivity, sensitivity_report};
use rds_deepc::Exec;

#[derive(Parser)]
#[command(name = "rds-deepc", version, about = "Robust data selection for data-enabled predictive control")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment configuration; unspecified fields take plant defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `select`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// dc_motor or cartpole.
    #[arg(long)]
    plant: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Samples per episode.
    #[arg(long)]
    length: Option<usize>,
    /// Fraction of episodes to corrupt.
    #[arg(long)]
    fraction: Option<f64>,
    /// Comma-separated corruption modes.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<CorruptionMode>>,
}

#[derive(Args, Clone, Default)]
struct LissaArgs {
    #[arg(long)]
    lissa_alpha: Option<f64>,
    #[arg(long)]
    lissa_depth: Option<usize>,
    #[arg(long)]
    lissa_samples: Option<usize>,
    /// Replace LiSSA with a direct solve.
    #[arg(long)]
    lissa_direct: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a plant under excitation and write a dataset.
    Collect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Corrupt a seeded subset of a dataset's episodes and label them.
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Input dataset directory or manifest.
        #[arg(long)]
        input: PathBuf,
        /// Nominal output-noise σ of the input data.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Score every Hankel column of a dataset and select the K least sensitive.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run a closed-loop experiment.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        lissa: LissaArgs,
        /// full, random, distance or rds.
        #[arg(long)]
        selector: Option<Selector>,
        /// Comma-separated selection sizes.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Use this dataset instead of collecting one.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Drop labelled-corrupted episodes before building the controller.
        #[arg(long)]
        clean_only: bool,
    },
    /// Time full versus reduced solves on synthetic systems.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4050")]
        t_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "30,60,90")]
        k_list: Vec<usize>,
    },
    /// Gather run directories under `--out` into plot-ready tables.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn base_config(common: &Common, plant: Option<&str>) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if let Some(id) = plant {
                let want = PlantConfig::from_id(id).with_context(|| format!("unknown plant '{id}'"))?;
                if want.id() != cfg.plant.id() {
                    bail!(rds_deepc::Error::InvalidParameter(format!(
                        "--plant {id} conflicts with config plant {}",
                        cfg.plant.id()
                    )));
                }
            }
            cfg
        }
        None => {
            let id = plant.unwrap_or("dc_motor");
            let p = PlantConfig::from_id(id)
                .ok_or_else(|| rds_deepc::Error::InvalidParameter(format!("unknown plant '{id}'")))?;
            ExperimentConfig::defaults_for(p)
        }
    };
    Ok(cfg)
}

fn apply_data(cfg: &mut ExperimentConfig, data: &DataArgs) {
    if let Some(e) = data.episodes {
        cfg.data.episodes = e;
    }
    if let Some(l) = data.length {
        cfg.data.length = l;
    }
    if let Some(f) = data.fraction {
        cfg.corruption.fraction = f;
    }
    if let Some(m) = &data.modes {
        cfg.corruption.modes = m.clone();
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| rds_deepc::Error::InvalidParameter("--out is required".into()).into())
}

fn cmd_collect(common: Common, data: DataArgs) -> Result<()> {
    let mut cfg = base_config(&common, data.plant.as_deref())?;
    apply_data(&mut cfg, &data);
    let seed = common.seed.unwrap_or(cfg.data.seed);
    let out = require_out(&common)?;
    let ds = collect_dataset(
        &cfg.plant,
        &cfg.data.excitation,
        cfg.data.episodes,
        cfg.data.length,
        seed,
        Exec::default(),
    )?;
    let manifest = write_dataset(out, &ds, Some(cfg.plant.id()))?;
    println!("manifest={} episodes={} sha256={}", manifest.display(), ds.episodes.len(), dataset_hash(out)?);
    Ok(())
}

fn cmd_corrupt(common: Common, data: DataArgs, input: PathBuf, sigma: Option<f64>) -> Result<()> {
    let manifest = read_manifest(&input)?;
    let plant = data.plant.clone().or(manifest.plant.clone());
    let mut cfg = base_config(&common, plant.as_deref())?;
    apply_data(&mut cfg, &data);
    let (ds, _) = read_dataset(&input)?;
    let spec = CorruptionSpec {
        seed: common.seed.unwrap_or(cfg.corruption.seed),
        noise_sigma: sigma.unwrap_or(cfg.corruption.noise_sigma),
        ..cfg.corruption.clone()
    };
    let out = require_out(&common)?;
    let corrupted = corrupt_dataset(&ds, &spec)?;
    let path = write_dataset(out, &corrupted, manifest.plant.as_deref())?;
    println!(
        "manifest={} corrupted={} of {} sha256={}",
        path.display(),
        corrupted.corrupted_count(),
        corrupted.episodes.len(),
        dataset_hash(out)?
    );
    Ok(())
}

fn cmd_select(common: Common, input: PathBuf, k: Option<usize>) -> Result<()> {
    let manifest = read_manifest(&input)?;
    let cfg = base_config(&common, manifest.plant.as_deref())?;
    let (ds, _) = read_dataset(&input)?;
    let plant = cfg.plant.build()?;
    let h = build_partitioned(&ds, cfg.deepc.t_ini, cfg.deepc.horizon)?;
    let op = nominal_operating_point(&cfg, &plant);
    let nf = NormalForm::assemble(&h, &cfg.deepc, &op)?;
    let k = k.unwrap_or(cfg.deepc.k).min(h.cols());
    let report = sensitivity_report(&nf, &h, &op, k, Exec::default())?;
    let active = select_low_sensitivity(report.scores.as_slice(), k)?;
    let out = require_out(&common)?;
    let path = if out.extension().is_some_and(|e| e == "csv") {
        out.to_path_buf()
    } else {
        out.join("scores.csv")
    };
    write_scores(&path, &h, &report, &active)?;
    let ratio = h
        .clean_ratio(&active)
        .map(fmt_f64)
        .unwrap_or_else(|| "unavailable".into());
    println!("scores={} columns={} k={} clean_ratio={}", path.display(), h.cols(), k, ratio);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    common: Common,
    data: DataArgs,
    lissa: LissaArgs,
    selector: Option<Selector>,
    k: Option<Vec<usize>>,
    trials: Option<usize>,
    input: Option<PathBuf>,
    clean_only: bool,
) -> Result<()> {
    let mut cfg = base_config(&common, data.plant.as_deref())?;
    apply_data(&mut cfg, &data);
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = selector {
        cfg.selector = s;
    }
    if let Some(k) = k {
        cfg.k_list = k;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if input.is_some() {
        cfg.data.path = input;
    }
    cfg.data.clean_only |= clean_only;
    if lissa.lissa_alpha.is_some() {
        cfg.lissa.alpha = lissa.lissa_alpha;
    }
    if let Some(r) = lissa.lissa_depth {
        cfg.lissa.depth = r;
    }
    if let Some(s) = lissa.lissa_samples {
        cfg.lissa.samples = s;
    }
    cfg.lissa.direct |= lissa.lissa_direct;
    cfg.validate()?;
    let res = run_experiment(&cfg, common.out.as_deref())?;
    println!("plant,selector,k,clean_only,trials,mse_mean,mse_std,clean_ratio_mean,settling_time_mean,diverged");
    for a in &res.summary {
        println!(
            "{},{},{},{},{},{},{},{},{},{}",
            cfg.plant.id(),
            a.selector.as_str(),
            a.k,
            a.clean_only,
            a.trials,
            fmt_f64(a.mse_mean),
            fmt_f64(a.mse_std),
            a.clean_ratio_mean.map(fmt_f64).unwrap_or_default(),
            a.settling_time_mean.map(fmt_f64).unwrap_or_default(),
            a.diverged
        );
    }
    if let Some(out) = &common.out {
        info!("run directory {}", out.display());
    }
    Ok(())
}

fn cmd_benchmark(common: Common, t_list: Vec<usize>, k_list: Vec<usize>) -> Result<()> {
    let report = benchmark_timing(&t_list, &k_list, common.seed.unwrap_or(0))?;
    let header = ["t", "k", "full_ms", "reduced_factor_ms", "reduced_cached_ms", "step_speedup", "factor_speedup"];
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                r.k.to_string(),
                fmt_f64(r.full_ms),
                fmt_f64(r.reduced_factor_ms),
                fmt_f64(r.reduced_cached_ms),
                fmt_f64(r.step_speedup),
                fmt_f64(r.factor_speedup),
            ]
        })
        .collect();
    println!("{}", header.join(","));
    for r in &rows {
        println!("{}", r.join(","));
    }
    println!("full_slope={}", fmt_f64(report.full_slope));
    if let Some(out) = &common.out {
        write_csv(&out.join("benchmark.csv"), &header, rows)?;
        write_csv(&out.join("benchmark_fit.csv"), &["full_slope"], [vec![fmt_f64(report.full_slope)]])?;
    }
    Ok(())
}

fn cmd_report(common: Common) -> Result<()> {
    let root = require_out(&common)?;
    for f in emit_report(root)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<rds_deepc::Error>())
        .map(|e| e.kind())
        .unwrap_or("other");
    let msg = format!("{err:#}").replace('"', "'").replace('\n', " ");
    format!("error kind={kind} message=\"{msg}\"")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let res = match cli.command {
        Command::Collect { common, data } => cmd_collect(common, data),
        Command::Corrupt {
            common,
            data,
            input,
            sigma,
        } => cmd_corrupt(common, data, input, sigma),
        Command::Select { common, input, k } => cmd_select(common, input, k),
        Command::Run {
            common,
            data,
            lissa,
            selector,
            k,
            trials,
            input,
            clean_only,
        } => cmd_run(common, data, lissa, selector, k, trials, input, clean_only),
        Command::Benchmark { common, t_list, k_list } => cmd_benchmark(common, t_list, k_list),
        Command::Report { common } => cmd_report(common),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
