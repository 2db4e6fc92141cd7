use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::Duration;

use log::info;
use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::{ExperimentConfig, ReferenceSpec, Selector};
use crate::dataset::{dataset_digest, fmt_f64, read_dataset, write_csv};
use crate::deepc::{Controller, NormalForm, OperatingPoint};
use crate::error::{Error, Result};
use crate::hankel::{build_partitioned, HankelSystem, TrajectoryDataset};
use crate::online::{locality_distances, OnlineController};
use crate::par::{self, Exec};
use crate::plants::{collect_dataset, corrupt_dataset, Plant};
use crate::sensitivity::{select_low_sensitivity, sensitivity_report, SensitivityReport};

/// One simulated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub u: Vec<f64>,
    /// Noise-free outputs.
    pub y: Vec<f64>,
    pub reference: Vec<f64>,
    pub state: Vec<f64>,
    pub clean_ratio: Option<f64>,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// Samples simulated with zero input to fill the initial buffers.
    pub pre_roll: usize,
    pub diverged: bool,
}

/// Output of one control decision.
pub struct Decision {
    pub u: DVector<f64>,
    pub clean_ratio: Option<f64>,
    pub elapsed: Duration,
}

/// Runs the plant in closed loop with `policy`, after a zero-input pre-roll
/// of `t_ini` samples. Measurement noise is drawn from a stream seeded by
/// `noise_seed`.
pub fn closed_loop(
    cfg: &ExperimentConfig,
    plant: &Plant,
    noise_seed: u64,
    mut policy: impl FnMut(&OperatingPoint) -> Result<Decision>,
) -> Result<Trajectory> {
    let (m, p, dt) = (plant.input_dim(), plant.output_dim(), plant.dt());
    let (t_ini, n) = (cfg.deepc.t_ini, cfg.deepc.horizon);
    let sigma = cfg.data.excitation.noise_sigma;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut x = DVector::from_column_slice(&cfg.initial_state);
    let mut ubuf: VecDeque<DVector<f64>> = VecDeque::with_capacity(t_ini + 1);
    let mut ybuf: VecDeque<DVector<f64>> = VecDeque::with_capacity(t_ini + 1);
    let mut records = Vec::with_capacity(cfg.steps());
    let mut diverged = false;
    for k in 0..cfg.steps() {
        let y = plant.output(&x);
        let meas = y.map(|v| v + noise.sample(&mut rng));
        let (u, clean_ratio, elapsed) = if k < t_ini {
            (DVector::zeros(m), None, Duration::ZERO)
        } else {
            let stack = |b: &VecDeque<DVector<f64>>| DVector::from_iterator(b.len() * b[0].len(), b.iter().flat_map(|v| v.iter().copied()));
            let op = OperatingPoint {
                u_ini: stack(&ubuf),
                y_ini: stack(&ybuf),
                y_ref: DVector::from_iterator(n * p, (k..k + n).flat_map(|i| cfg.reference.at(i, dt, p))),
            };
            let d = policy(&op)?;
            (d.u, d.clean_ratio, d.elapsed)
        };
        records.push(StepRecord {
            t: k as f64 * dt,
            u: u.as_slice().to_vec(),
            y: y.as_slice().to_vec(),
            reference: cfg.reference.at(k, dt, p),
            state: x.as_slice().to_vec(),
            clean_ratio,
            solve_ms: elapsed.as_secs_f64() * 1e3,
        });
        let blown = plant
            .angular_outputs()
            .iter()
            .any(|&i| !(y[i].abs() <= cfg.divergence_bound))
            || u.iter().any(|v| !v.is_finite());
        if blown {
            diverged = true;
            break;
        }
        ubuf.push_back(u.clone());
        ybuf.push_back(meas);
        if ubuf.len() > t_ini {
            ubuf.pop_front();
            ybuf.pop_front();
        }
        x = plant.step(&x, &u);
    }
    Ok(Trajectory {
        records,
        pre_roll: t_ini,
        diverged,
    })
}

/// Per-trial results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub selector: Selector,
    pub k: usize,
    pub trial: usize,
    pub clean_only: bool,
    /// Mean squared tracking error over controlled samples and outputs.
    pub mse: f64,
    /// RMS error of the first angular output, in degrees.
    pub rmse_deg: f64,
    /// Mean clean fraction of the columns in use; `None` without labels.
    pub clean_ratio: Option<f64>,
    /// Stabilization tasks only; infinite when never settled.
    pub settling_time_s: Option<f64>,
    pub max_abs_theta_deg: f64,
    pub final_abs_xc_m: Option<f64>,
    pub diverged: bool,
    pub steps: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
}

impl RunMetrics {
    /// Everything except wall-clock timing.
    pub fn same_outcome(&self, other: &RunMetrics) -> bool {
        let strip = |m: &RunMetrics| RunMetrics {
            mean_solve_ms: 0.0,
            max_solve_ms: 0.0,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

/// Settling time: the first instant after which `|θ|` stays below the
/// threshold until the end. Infinite when the last sample is outside it.
pub fn settling_time(theta_deg: &[f64], dt: f64, threshold_deg: f64, diverged: bool) -> f64 {
    match theta_deg.iter().rposition(|v| v.abs() >= threshold_deg) {
        _ if diverged => f64::INFINITY,
        None => 0.0,
        Some(i) if i + 1 == theta_deg.len() => f64::INFINITY,
        Some(i) => (i + 1) as f64 * dt,
    }
}

pub fn compute_metrics(
    cfg: &ExperimentConfig,
    plant: &Plant,
    traj: &Trajectory,
    selector: Selector,
    k: usize,
    trial: usize,
) -> RunMetrics {
    let controlled = traj.records.get(traj.pre_roll..).unwrap_or(&[]);
    let n = controlled.len().max(1) as f64;
    let p = plant.output_dim() as f64;
    let mse = controlled
        .iter()
        .map(|r| r.y.iter().zip(&r.reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p)
        .sum::<f64>()
        / n;
    let ang = plant.angular_outputs()[0];
    let rmse_deg = (controlled.iter().map(|r| (r.y[ang] - r.reference[ang]).powi(2)).sum::<f64>() / n)
        .sqrt()
        .to_degrees();
    let ratios: Vec<f64> = controlled.iter().filter_map(|r| r.clean_ratio).collect();
    let clean_ratio = (!ratios.is_empty() && ratios.len() == controlled.len())
        .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let theta_deg: Vec<f64> = traj.records.iter().map(|r| r.y[ang].to_degrees()).collect();
    let settling_time_s = matches!(cfg.reference, ReferenceSpec::Zero)
        .then(|| settling_time(&theta_deg, plant.dt(), cfg.settle_threshold_deg, traj.diverged));
    let final_abs_xc_m = match plant {
        Plant::Cartpole(_) => traj.records.last().map(|r| r.y[0].abs()),
        Plant::DcMotor(_) => None,
    };
    let solve: Vec<f64> = controlled.iter().map(|r| r.solve_ms).collect();
    RunMetrics {
        selector,
        k,
        trial,
        clean_only: cfg.data.clean_only,
        mse,
        rmse_deg,
        clean_ratio,
        settling_time_s,
        max_abs_theta_deg: theta_deg.iter().fold(0.0, |a, b| a.max(b.abs())),
        final_abs_xc_m,
        diverged: traj.diverged,
        steps: traj.records.len(),
        mean_solve_ms: solve.iter().sum::<f64>() / solve.len().max(1) as f64,
        max_solve_ms: solve.iter().fold(0.0, |a, b| a.max(*b)),
    }
}

/// Mean and unbiased standard deviation over trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub selector: Selector,
    pub k: usize,
    pub clean_only: bool,
    pub trials: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub rmse_deg_mean: f64,
    pub clean_ratio_mean: Option<f64>,
    pub settling_time_mean: Option<f64>,
    pub diverged: usize,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn aggregate(runs: &[RunMetrics]) -> Vec<Aggregate> {
    let mut keys: Vec<(Selector, usize, bool)> = runs.iter().map(|r| (r.selector, r.k, r.clean_only)).collect();
    keys.dedup();
    keys.into_iter()
        .map(|(selector, k, clean_only)| {
            let group: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| (r.selector, r.k, r.clean_only) == (selector, k, clean_only))
                .collect();
            let col = |f: &dyn Fn(&RunMetrics) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (mse_mean, mse_std) = mean_std(&col(&|r| r.mse));
            let opt_mean = |f: &dyn Fn(&RunMetrics) -> Option<f64>| {
                let v: Option<Vec<f64>> = group.iter().map(|r| f(r)).collect();
                v.map(|v| mean_std(&v).0)
            };
            Aggregate {
                selector,
                k,
                clean_only,
                trials: group.len(),
                mse_mean,
                mse_std,
                rmse_deg_mean: mean_std(&col(&|r| r.rmse_deg)).0,
                clean_ratio_mean: opt_mean(&|r| r.clean_ratio),
                settling_time_mean: opt_mean(&|r| r.settling_time_s),
                diverged: group.iter().filter(|r| r.diverged).count(),
            }
        })
        .collect()
}

/// A finished trial and its trace.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub metrics: RunMetrics,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub trials: Vec<TrialOutcome>,
    pub summary: Vec<Aggregate>,
    pub dataset_sha256: String,
    /// Offline scores, when the selector computed them.
    pub scores: Option<(HankelSystem, SensitivityReport)>,
}

impl ExperimentResult {
    pub fn metrics(&self) -> Vec<RunMetrics> {
        self.trials.iter().map(|t| t.metrics.clone()).collect()
    }
}

/// Collects (or loads) and corrupts the dataset described by `cfg`.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    let ds = match &cfg.data.path {
        Some(p) => read_dataset(p)?.0,
        None => {
            let raw = collect_dataset(
                &cfg.plant,
                &cfg.data.excitation,
                cfg.data.episodes,
                cfg.data.length,
                cfg.data.seed,
                Exec::default(),
            )?;
            corrupt_dataset(&raw, &cfg.corruption)?
        }
    };
    Ok(if cfg.data.clean_only { ds.clean_subset() } else { ds })
}

/// Operating point used for offline scoring: zero buffers and the reference
/// over the first horizon after the pre-roll.
pub fn nominal_operating_point(cfg: &ExperimentConfig, plant: &Plant) -> OperatingPoint {
    let (m, p, dt) = (plant.input_dim(), plant.output_dim(), plant.dt());
    let (t_ini, n) = (cfg.deepc.t_ini, cfg.deepc.horizon);
    let mut op = OperatingPoint::zeros(m, p, t_ini, n);
    op.y_ref = DVector::from_iterator(n * p, (t_ini..t_ini + n).flat_map(|i| cfg.reference.at(i, dt, p)));
    op
}

fn selection_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + trial as u64);
    rng
}

fn trials_for(cfg: &ExperimentConfig) -> usize {
    if cfg.selector == Selector::Random {
        cfg.trials
    } else {
        1
    }
}

/// Runs every `(K, trial)` combination of `cfg` on `data`.
pub fn run_on_dataset(cfg: &ExperimentConfig, data: &TrajectoryDataset) -> Result<ExperimentResult> {
    cfg.validate()?;
    let plant = cfg.plant.build()?;
    if (data.m, data.p) != (plant.input_dim(), plant.output_dim()) {
        return Err(Error::InconsistentDataset {
            m: plant.input_dim(),
            p: plant.output_dim(),
        });
    }
    let h = build_partitioned(data, cfg.deepc.t_ini, cfg.deepc.horizon)?;
    let sha = dataset_digest(data);
    let mut trials = Vec::new();
    let mut scores = None;
    if cfg.online && cfg.selector != Selector::Full {
        for &k in &cfg.k_list {
            let mut loc = cfg.locality.clone();
            loc.k_r = k;
            loc.k_l = loc.k_l.max(k).min(h.cols());
            let ctl = OnlineController::new(h.clone(), cfg.deepc.clone(), loc, cfg.lissa, cfg.selector.online().unwrap())?;
            let outs = par::map_indices(Exec::default(), trials_for(cfg), |trial| {
                let mut rng = selection_rng(cfg.seed, trial);
                let traj = closed_loop(cfg, &plant, cfg.seed, |op| {
                    let t = ctl.step(op, &mut rng)?;
                    Ok(Decision {
                        clean_ratio: ctl.pool.clean_ratio(&t.active_set),
                        u: t.u_applied,
                        elapsed: t.timings.total(),
                    })
                })?;
                Ok(TrialOutcome {
                    metrics: compute_metrics(cfg, &plant, &traj, cfg.selector, k, trial),
                    trajectory: traj,
                })
            });
            for o in outs {
                trials.push(o?);
            }
        }
    } else {
        let op = nominal_operating_point(cfg, &plant);
        let run_set = |active: Vec<usize>, k: usize, trial: usize, nf: Option<NormalForm>| -> Result<TrialOutcome> {
            let reduced = h.select_columns(&active)?;
            let ctl = match nf {
                Some(normal) => Controller {
                    system: reduced,
                    cfg: cfg.deepc.clone(),
                    normal,
                },
                None => Controller::new(reduced, cfg.deepc.clone())?,
            };
            let ratio = ctl.system.clean_ratio(&(0..ctl.cols()).collect::<Vec<_>>());
            let traj = closed_loop(cfg, &plant, cfg.seed, |op| {
                let s = ctl.step(op)?;
                Ok(Decision {
                    u: s.u,
                    clean_ratio: ratio,
                    elapsed: s.solve_time,
                })
            })?;
            Ok(TrialOutcome {
                metrics: compute_metrics(cfg, &plant, &traj, cfg.selector, k, trial),
                trajectory: traj,
            })
        };
        match cfg.selector {
            Selector::Full => {
                let nf = NormalForm::assemble(&h, &cfg.deepc, &op)?;
                trials.push(run_set((0..h.cols()).collect(), h.cols(), 0, Some(nf))?);
            }
            Selector::Rds => {
                let nf = NormalForm::assemble(&h, &cfg.deepc, &op)?;
                let first = cfg.k_list[0].min(h.cols());
                let report = sensitivity_report(&nf, &h, &op, first, Exec::default())?;
                for &k in &cfg.k_list {
                    let active = select_low_sensitivity(report.scores.as_slice(), k)?;
                    trials.push(run_set(active, k, 0, None)?);
                }
                scores = Some((h.clone(), report));
            }
            Selector::Random => {
                for &k in &cfg.k_list {
                    if k > h.cols() {
                        return Err(Error::SelectionTooLarge { k, t: h.cols() });
                    }
                    let outs = par::map_indices(Exec::default(), cfg.trials, |trial| {
                        let mut rng = selection_rng(cfg.seed, trial);
                        let mut active = sample(&mut rng, h.cols(), k).into_vec();
                        active.sort_unstable();
                        run_set(active, k, trial, None)
                    });
                    for o in outs {
                        trials.push(o?);
                    }
                }
            }
            Selector::Distance => {
                let w = cfg.locality.weights(&h)?;
                let counter = Default::default();
                let dist = locality_distances(&h, &op, &w, Exec::default(), &counter)?;
                for &k in &cfg.k_list {
                    let active = select_low_sensitivity(&dist, k)?;
                    trials.push(run_set(active, k, 0, None)?);
                }
            }
        }
    }
    let metrics: Vec<RunMetrics> = trials.iter().map(|t| t.metrics.clone()).collect();
    for m in &metrics {
        info!(
            "{} K={} trial={} mse={:.4e} clean={:?} diverged={}",
            m.selector.as_str(),
            m.k,
            m.trial,
            m.mse,
            m.clean_ratio,
            m.diverged
        );
    }
    Ok(ExperimentResult {
        summary: aggregate(&metrics),
        trials,
        dataset_sha256: sha,
        scores,
    })
}

/// Prepares the data, runs the experiment and, with `out`, writes the run
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    let data = prepare_dataset(cfg)?;
    let res = run_on_dataset(cfg, &data)?;
    if let Some(dir) = out {
        write_run(dir, cfg, &res)?;
    }
    Ok(res)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 17] = [
    "plant",
    "selector",
    "k",
    "trial",
    "clean_only",
    "mse",
    "rmse_deg",
    "clean_ratio",
    "settling_time_s",
    "max_abs_theta_deg",
    "final_abs_xc_m",
    "diverged",
    "steps",
    "mean_solve_ms",
    "max_solve_ms",
    "trace",
    "dataset_sha256",
];

pub const SUMMARY_HEADER: [&str; 11] = [
    "plant",
    "selector",
    "k",
    "clean_only",
    "trials",
    "mse_mean",
    "mse_std",
    "rmse_deg_mean",
    "clean_ratio_mean",
    "settling_time_mean",
    "diverged",
];

pub fn trace_name(m: &RunMetrics) -> String {
    let tag = if m.clean_only { "_clean" } else { "" };
    format!("traces/{}{}_k{}_t{}.csv", m.selector.as_str(), tag, m.k, m.trial)
}

/// Writes the score table `column,episode,offset,g_star,p,score,selected[,clean_label]`.
pub fn write_scores(path: &Path, h: &HankelSystem, report: &SensitivityReport, active: &[usize]) -> Result<()> {
    let labels = h.segment_clean();
    let mut header = vec!["column", "episode", "offset", "g_star", "p", "score", "selected"];
    if labels.is_some() {
        header.push("clean_label");
    }
    let mut selected = vec![false; h.cols()];
    for &j in active {
        selected[j] = true;
    }
    let rows = (0..h.cols()).map(|j| {
        let o = h.origin()[j];
        let mut r = vec![
            j.to_string(),
            o.episode.to_string(),
            o.offset.to_string(),
            fmt_f64(report.g_star[j]),
            fmt_f64(report.p[j]),
            fmt_f64(report.scores[j]),
            (selected[j] as u8).to_string(),
        ];
        if let Some(l) = labels {
            r.push((l[j] as u8).to_string());
        }
        r
    });
    write_csv(path, &header, rows)
}

pub fn write_trace(path: &Path, traj: &Trajectory, m: usize, p: usize, n: usize) -> Result<()> {
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=p).map(|i| format!("y{i}")));
    header.extend((1..=p).map(|i| format!("r{i}")));
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend(["clean_ratio".to_string(), "solve_ms".to_string()]);
    let rows = traj.records.iter().enumerate().map(|(k, r)| {
        let mut row = vec![k.to_string(), fmt_f64(r.t)];
        row.extend(r.u.iter().chain(&r.y).chain(&r.reference).chain(&r.state).map(|v| fmt_f64(*v)));
        row.push(opt(r.clean_ratio));
        row.push(fmt_f64(r.solve_ms));
        row
    });
    write_csv(path, &header, rows)
}

/// Writes `config.toml`, `metrics.csv`, `summary.csv`, `traces/` and, when
/// available, `scores.csv` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, res: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let plant = cfg.plant.build()?;
    let id = cfg.plant.id();
    for t in &res.trials {
        write_trace(
            &dir.join(trace_name(&t.metrics)),
            &t.trajectory,
            plant.input_dim(),
            plant.output_dim(),
            plant.state_dim(),
        )?;
    }
    let rows = res.trials.iter().map(|t| {
        let m = &t.metrics;
        vec![
            id.to_string(),
            m.selector.as_str().to_string(),
            m.k.to_string(),
            m.trial.to_string(),
            m.clean_only.to_string(),
            fmt_f64(m.mse),
            fmt_f64(m.rmse_deg),
            opt(m.clean_ratio),
            opt(m.settling_time_s),
            fmt_f64(m.max_abs_theta_deg),
            opt(m.final_abs_xc_m),
            m.diverged.to_string(),
            m.steps.to_string(),
            fmt_f64(m.mean_solve_ms),
            fmt_f64(m.max_solve_ms),
            trace_name(m),
            res.dataset_sha256.clone(),
        ]
    });
    write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, rows)?;
    let rows = res.summary.iter().map(|a| {
        vec![
            id.to_string(),
            a.selector.as_str().to_string(),
            a.k.to_string(),
            a.clean_only.to_string(),
            a.trials.to_string(),
            fmt_f64(a.mse_mean),
            fmt_f64(a.mse_std),
            fmt_f64(a.rmse_deg_mean),
            opt(a.clean_ratio_mean),
            opt(a.settling_time_mean),
            a.diverged.to_string(),
        ]
    });
    write_csv(&dir.join("summary.csv"), &SUMMARY_HEADER, rows)?;
    if let Some((h, report)) = &res.scores {
        let k = cfg.k_list[0].min(h.cols());
        let active = select_low_sensitivity(report.scores.as_slice(), k)?;
        write_scores(&dir.join("scores.csv"), h, report, &active)?;
    }
    Ok(())
}
