//! Wall-clock comparison of full factor-and-solve against a cached reduced
//! solve on synthetic SPD systems.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deepc::gram;
use crate::error::{Error, Result};
use crate::par::Exec;

/// Rows of the synthetic data matrix, the stacked depth of a
/// single-input single-output system with `L = 20`.
pub const SYNTH_ROWS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub k: usize,
    /// Factorization plus solve at size `T`, ms.
    pub full_ms: f64,
    /// Factorization plus solve at size `K`, ms.
    pub reduced_factor_ms: f64,
    /// Solve with a cached size-`K` factor, ms.
    pub reduced_cached_ms: f64,
    /// `full_ms / reduced_cached_ms`.
    pub step_speedup: f64,
    /// `full_ms / reduced_factor_ms`.
    pub factor_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `log full_ms` against `log T`.
    pub full_slope: f64,
}

fn synthetic(t: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
    let d = DMatrix::from_fn(SYNTH_ROWS, t, |_, _| rng.random_range(-1.0..1.0));
    let mut h = gram(&d, Exec::default());
    for i in 0..t {
        h[(i, i)] += 1.0;
    }
    let b = DVector::from_fn(t, |_, _| rng.random_range(-1.0..1.0));
    (h, b)
}

/// Median wall-clock time of `f`, in ms, repeating short calls until at
/// least `budget_ms` has elapsed per sample.
fn time_ms(mut f: impl FnMut(), samples: usize, budget_ms: f64) -> f64 {
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let start = Instant::now();
        let mut reps = 0usize;
        loop {
            f();
            reps += 1;
            let el = start.elapsed().as_secs_f64() * 1e3;
            if el >= budget_ms {
                out.push(el / reps as f64);
                break;
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out[out.len() / 2]
}

fn factor_solve(h: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    h.clone().cholesky().expect("synthetic system is SPD").solve(b)
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Times every `(T, K)` pair with `K ≤ T`.
pub fn benchmark_timing(t_list: &[usize], k_list: &[usize], seed: u64) -> Result<BenchReport> {
    if t_list.is_empty() || k_list.is_empty() || t_list.iter().chain(k_list).any(|&x| x == 0) {
        return Err(Error::InvalidParameter("benchmark sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let (h, b) = synthetic(t, &mut rng);
        let samples = if t >= 2000 { 1 } else { 3 };
        full.push(time_ms(|| drop(factor_solve(&h, &b)), samples, 20.0));
    }
    let mut rows = Vec::new();
    for (i, &t) in t_list.iter().enumerate() {
        for &k in k_list.iter().filter(|&&k| k <= t) {
            let (hk, bk) = synthetic(k, &mut rng);
            let reduced_factor_ms = if k == t {
                full[i]
            } else {
                time_ms(|| drop(factor_solve(&hk, &bk)), 3, 20.0)
            };
            let chol = hk.clone().cholesky().expect("synthetic system is SPD");
            let reduced_cached_ms = time_ms(|| drop(chol.solve(&bk)), 5, 5.0);
            rows.push(BenchRow {
                t,
                k,
                full_ms: full[i],
                reduced_factor_ms,
                reduced_cached_ms,
                step_speedup: full[i] / reduced_cached_ms,
                factor_speedup: full[i] / reduced_factor_ms,
            });
        }
    }
    let ts: Vec<f64> = t_list.iter().map(|&t| t as f64).collect();
    let full_slope = if t_list.len() > 1 { log_log_slope(&ts, &full) } else { f64::NAN };
    Ok(BenchReport { rows, full_slope })
}
