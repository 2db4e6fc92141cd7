//! Truncated Neumann-series approximation of `H⁻¹ v` (LiSSA).
//!
//! Iterates `p⁽ⁱ⁺¹⁾ = v + (I − αH) p⁽ⁱ⁾` from `p⁽⁰⁾ = v` for `depth` steps and
//! returns `α p⁽ʳ⁾`, averaged over `samples` runs. With a deterministic
//! operator the runs coincide; the averaging only matters for a stochastic
//! `apply`. Each run costs exactly `depth` operator applications.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deepc::WeightedData;
use crate::error::{check_dim, Error, Result};
use crate::par::{self, Exec};

/// Growth of `‖p⁽ⁱ⁾‖ / ‖v‖` beyond which the iteration is declared divergent.
pub const DIVERGENCE_RATIO: f64 = 1e6;

/// A symmetric linear operator `x ↦ H x`.
pub trait HessianOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn trace(&self) -> f64;
    /// Cheap upper bound on `λ_max`.
    fn max_eigen_bound(&self) -> f64;
}

impl HessianOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }

    fn trace(&self) -> f64 {
        DMatrix::trace(self)
    }

    fn max_eigen_bound(&self) -> f64 {
        self.row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `H = DᵀD + λ_g I` applied as two thin products.
#[derive(Debug, Clone, Copy)]
pub struct GramOperator<'a> {
    pub data: &'a WeightedData,
    pub lambda_g: f64,
}

impl HessianOperator for GramOperator<'_> {
    fn dim(&self) -> usize {
        self.data.cols()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.data.apply_gram(x, self.lambda_g)
    }

    fn trace(&self) -> f64 {
        self.data.d.norm_squared() + self.lambda_g * self.dim() as f64
    }

    fn max_eigen_bound(&self) -> f64 {
        // λ_max(DᵀD) = σ_max(D)² ≤ ‖D‖_F²
        self.data.d.norm_squared() + self.lambda_g
    }
}

/// Wraps an operator and counts `apply` calls.
#[derive(Debug)]
pub struct CountingOperator<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O> CountingOperator<O> {
    pub fn new(inner: O) -> Self {
        CountingOperator {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<O: HessianOperator> HessianOperator for CountingOperator<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }

    fn trace(&self) -> f64 {
        self.inner.trace()
    }

    fn max_eigen_bound(&self) -> f64 {
        self.inner.max_eigen_bound()
    }
}

fn default_depth() -> usize {
    50
}

fn default_samples() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaParams {
    /// Scale `α`; `None` computes it from the operator trace.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Bypass the iteration with a direct factorization.
    #[serde(default)]
    pub direct: bool,
}

impl Default for LissaParams {
    fn default() -> Self {
        LissaParams {
            alpha: None,
            depth: default_depth(),
            samples: default_samples(),
            direct: false,
        }
    }
}

impl LissaParams {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.samples == 0 {
            return Err(Error::InvalidParameter(
                "LiSSA depth and samples must be at least 1".into(),
            ));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(format!("LiSSA alpha {a} must be positive")));
            }
        }
        Ok(())
    }

    /// The scale to use for `op`: the configured value, or the trace-based
    /// default clamped to `1 / λ_max-bound` when the default would violate the
    /// convergence condition `α < 2/λ_max` against that bound.
    pub fn resolve_alpha<O: HessianOperator + ?Sized>(&self, op: &O, lambda_g: f64) -> Result<f64> {
        let bound = op.max_eigen_bound();
        if let Some(a) = self.alpha {
            if a * bound >= 2.0 {
                warn!("LiSSA alpha {a:.3e} is not below 2/λ_max bound {:.3e}", 2.0 / bound);
            }
            return Ok(a);
        }
        let a = default_alpha(op.trace(), op.dim(), lambda_g)?;
        Ok(if a * bound < 2.0 { a } else { 1.0 / bound })
    }
}

/// `1 / (trace/K_L + λ_g)`.
pub fn default_alpha(trace: f64, k_l: usize, lambda_g: f64) -> Result<f64> {
    let denom = trace / k_l as f64 + lambda_g;
    if k_l == 0 || !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "default alpha needs a positive denominator, got {denom}"
        )));
    }
    Ok(1.0 / denom)
}

/// `(1 − 1/κ)^r`.
pub fn convergence_bound(kappa: f64, r: usize) -> Result<f64> {
    if !(kappa >= 1.0) {
        return Err(Error::InvalidParameter(format!("condition number {kappa} < 1")));
    }
    Ok((1.0 - 1.0 / kappa).powi(r as i32))
}

fn single_run<O: HessianOperator + ?Sized>(
    op: &O,
    v: &DVector<f64>,
    alpha: f64,
    depth: usize,
    mut observe: impl FnMut(usize, &DVector<f64>),
) -> Result<DVector<f64>> {
    let vn = v.norm();
    let mut p = v.clone();
    observe(0, &p);
    for i in 1..=depth {
        let hp = op.apply(&p);
        // p ← v + p − α H p
        p += v;
        p.axpy(-alpha, &hp, 1.0);
        let pn = p.norm();
        if !pn.is_finite() || (vn > 0.0 && pn > DIVERGENCE_RATIO * vn) {
            return Err(Error::Divergence {
                iteration: i,
                ratio: pn / vn,
            });
        }
        observe(i, &p);
    }
    Ok(p)
}

/// `α · mean_s p⁽ʳ⁾ ≈ H⁻¹ v`.
pub fn lissa_solve<O: HessianOperator + ?Sized>(
    op: &O,
    v: &DVector<f64>,
    alpha: f64,
    depth: usize,
    samples: usize,
    exec: Exec,
) -> Result<DVector<f64>> {
    check_dim("LiSSA vector", op.dim(), v.len())?;
    if depth == 0 || samples == 0 {
        return Err(Error::InvalidParameter(
            "LiSSA depth and samples must be at least 1".into(),
        ));
    }
    let runs = par::map_indices(exec, samples, |_| single_run(op, v, alpha, depth, |_, _| {}));
    let mut acc = DVector::zeros(v.len());
    for r in runs {
        acc += r?;
    }
    Ok(acc * (alpha / samples as f64))
}

/// The scaled iterates `α p⁽ⁱ⁾`, `i = 0..=depth`, of one run.
pub fn lissa_iterates<O: HessianOperator + ?Sized>(
    op: &O,
    v: &DVector<f64>,
    alpha: f64,
    depth: usize,
) -> Result<Vec<DVector<f64>>> {
    check_dim("LiSSA vector", op.dim(), v.len())?;
    let mut out = Vec::with_capacity(depth + 1);
    single_run(op, v, alpha, depth, |_, p| out.push(p * alpha))?;
    Ok(out)
}
