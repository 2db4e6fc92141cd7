//! Plot-ready tables gathered from one or more run directories.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::dataset::{fmt_f64, read_csv, write_csv};
use crate::error::{Error, Result};

pub const REPORT_DIR: &str = "report";
const HIST_BINS: usize = 20;

struct Table {
    path: PathBuf,
    index: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: PathBuf) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingRun(path));
        }
        let (header, rows) = read_csv(&path)?;
        let index = header.into_iter().enumerate().map(|(i, h)| (h, i)).collect();
        Ok(Table { path, index, rows })
    }

    fn get<'a>(&self, row: &'a [String], col: &str) -> Result<&'a str> {
        let i = self
            .index
            .get(col)
            .ok_or_else(|| Error::parse(&self.path, format!("missing column '{col}'")))?;
        Ok(row[*i].as_str())
    }

    fn num(&self, row: &[String], col: &str) -> Result<f64> {
        let s = self.get(row, col)?;
        s.parse()
            .map_err(|_| Error::parse(&self.path, format!("column '{col}': bad number '{s}'")))
    }
}

/// Run directories under `root`: `root` itself if it holds `metrics.csv`,
/// then its immediate subdirectories that do, in name order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    if root.join("metrics.csv").exists() {
        runs.push(root.to_path_buf());
    }
    if root.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.join("metrics.csv").exists())
            .collect();
        subs.sort();
        runs.extend(subs);
    }
    if runs.is_empty() {
        return Err(Error::MissingRun(root.join("metrics.csv")));
    }
    Ok(runs)
}

fn run_name(root: &Path, run: &Path) -> String {
    match run.strip_prefix(root) {
        Ok(p) if p.as_os_str().is_empty() => ".".to_string(),
        Ok(p) => p.to_string_lossy().into_owned(),
        Err(_) => run.to_string_lossy().into_owned(),
    }
}

/// Writes the report tables into `root/report` and returns their paths.
/// Output depends only on the run directories, so re-running is idempotent.
pub fn emit_report(root: &Path) -> Result<Vec<PathBuf>> {
    let runs = find_runs(root)?;
    let out = root.join(REPORT_DIR);
    let mut mse = Vec::new();
    let mut clean = Vec::new();
    let mut tracking = Vec::new();
    let mut scores = Vec::new();
    let mut bins = Vec::new();
    let mut pendulum = Vec::new();

    for run in &runs {
        let name = run_name(root, run);
        let cfg = ExperimentConfig::load(&run.join("config.toml")).map_err(|e| match e {
            Error::Io { path, .. } => Error::MissingRun(path),
            other => other,
        })?;
        let summary = Table::read(run.join("summary.csv"))?;
        for r in &summary.rows {
            let key = |t: &Table| -> Result<Vec<String>> {
                Ok(vec![
                    name.clone(),
                    t.get(r, "plant")?.to_string(),
                    t.get(r, "selector")?.to_string(),
                    t.get(r, "k")?.to_string(),
                    t.get(r, "clean_only")?.to_string(),
                ])
            };
            let mut row = key(&summary)?;
            for c in ["trials", "mse_mean", "mse_std"] {
                row.push(summary.get(r, c)?.to_string());
            }
            mse.push(row);
            let mut row = key(&summary)?;
            row.push(summary.get(r, "clean_ratio_mean")?.to_string());
            clean.push(row);
        }

        let metrics = Table::read(run.join("metrics.csv"))?;
        for r in &metrics.rows {
            let trace = Table::read(run.join(metrics.get(r, "trace")?))?;
            let id = [
                name.clone(),
                metrics.get(r, "selector")?.to_string(),
                metrics.get(r, "k")?.to_string(),
                metrics.get(r, "trial")?.to_string(),
            ];
            let cartpole = metrics.get(r, "plant")? == "cartpole";
            let mut prev_out: Option<bool> = None;
            for tr in &trace.rows {
                let mut row = id.to_vec();
                row.push(trace.get(tr, "step")?.to_string());
                row.push(trace.get(tr, "t")?.to_string());
                if cartpole {
                    let theta = trace.num(tr, "y2")?.to_degrees();
                    let outside = theta.abs() >= cfg.settle_threshold_deg;
                    let crossing = prev_out.is_some_and(|p| p != outside);
                    prev_out = Some(outside);
                    row.extend([
                        fmt_f64(theta),
                        trace.get(tr, "y1")?.to_string(),
                        trace.get(tr, "u1")?.to_string(),
                        fmt_f64(trace.num(tr, "x4")?.to_degrees()),
                        (outside as u8).to_string(),
                        (crossing as u8).to_string(),
                    ]);
                    pendulum.push(row);
                } else {
                    row.extend([
                        trace.get(tr, "y1")?.to_string(),
                        trace.get(tr, "r1")?.to_string(),
                        trace.get(tr, "u1")?.to_string(),
                    ]);
                    tracking.push(row);
                }
            }
        }

        let spath = run.join("scores.csv");
        if spath.exists() {
            let st = Table::read(spath)?;
            let labelled = st.index.contains_key("clean_label");
            let mut logs: Vec<(f64, Option<bool>)> = Vec::new();
            for r in &st.rows {
                let s = st.num(r, "score")?;
                let label = if labelled { Some(st.get(r, "clean_label")? == "1") } else { None };
                scores.push(vec![
                    name.clone(),
                    st.get(r, "column")?.to_string(),
                    fmt_f64(s),
                    fmt_f64(s.abs()),
                    label.map(|c| (c as u8).to_string()).unwrap_or_default(),
                    st.get(r, "selected")?.to_string(),
                ]);
                if s != 0.0 {
                    logs.push((s.abs().log10(), label));
                }
            }
            bins.extend(histogram(&name, &logs));
        }
    }

    let mut written = Vec::new();
    let mut emit = |file: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let p = out.join(file);
        write_csv(&p, header, rows)?;
        written.push(p);
        Ok(())
    };
    emit("mse_vs_k.csv", &["run", "plant", "selector", "k", "clean_only", "trials", "mse_mean", "mse_std"], mse)?;
    emit("clean_ratio_vs_k.csv", &["run", "plant", "selector", "k", "clean_only", "clean_ratio_mean"], clean)?;
    emit("tracking.csv", &["run", "selector", "k", "trial", "step", "t", "y", "reference", "u"], tracking)?;
    emit("score_histogram.csv", &["run", "column", "score", "abs_score", "clean", "selected"], scores)?;
    emit("score_histogram_bins.csv", &["run", "log10_abs_score_lo", "log10_abs_score_hi", "clean", "corrupt", "unlabelled"], bins)?;
    emit(
        "pendulum.csv",
        &["run", "selector", "k", "trial", "step", "t", "theta_deg", "x_c", "force", "theta_dot_deg", "outside_threshold", "crossing"],
        pendulum,
    )?;
    Ok(written)
}

fn histogram(name: &str, logs: &[(f64, Option<bool>)]) -> Vec<Vec<String>> {
    if logs.is_empty() {
        return Vec::new();
    }
    let lo = logs.iter().map(|l| l.0).fold(f64::INFINITY, f64::min);
    let hi = logs.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / HIST_BINS as f64).max(1e-12);
    let mut counts = vec![[0usize; 3]; HIST_BINS];
    for &(v, label) in logs {
        let b = (((v - lo) / width) as usize).min(HIST_BINS - 1);
        let slot = match label {
            Some(true) => 0,
            Some(false) => 1,
            None => 2,
        };
        counts[b][slot] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                name.to_string(),
                fmt_f64(lo + i as f64 * width),
                fmt_f64(lo + (i + 1) as f64 * width),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
            ]
        })
        .collect()
}
