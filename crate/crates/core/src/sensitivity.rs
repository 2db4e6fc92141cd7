//! Per-segment sensitivity scores and low-sensitivity selection.
//!
//! For the unit-weight solution `g*` of `H g = b`, the total derivative of the
//! control cost `f` with respect to the weight of column `j` is
//! `S_j = 2 λ_g g*_j p_j` with `p = H⁻¹ v` and `v = ∇f(g*) = 2(M_f g* − c_f)`.
//! The direct and indirect parts of that derivative are kept alongside for
//! auditing; they are computed from `M p` explicitly, not from the identity
//! that makes them sum to `S_j`.

use nalgebra::DVector;

use crate::deepc::{DeepcConfig, NormalForm, OperatingPoint};
use crate::error::{Error, Result};
use crate::hankel::HankelSystem;
use crate::par::{self, Exec};

#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub g_star: DVector<f64>,
    /// Gradient of the control cost at `g*`.
    pub v: DVector<f64>,
    /// `H⁻¹ v`.
    pub p: DVector<f64>,
    /// Signed scores `2 λ_g g*_j p_j`.
    pub scores: DVector<f64>,
    pub active_set: Vec<usize>,
    /// `g*_j v_j`.
    pub direct: DVector<f64>,
    /// `g*_j (λ_g p_j − [M p]_j)`.
    pub indirect: DVector<f64>,
}

/// `d g* / d w_j = g*_j H⁻¹ (λ_g e_j − m_j)` at unit weights.
pub fn influence_on_coefficients(
    j: usize,
    nf: &NormalForm,
    g_star: &DVector<f64>,
) -> Result<DVector<f64>> {
    let t = nf.dim();
    if j >= t {
        return Err(Error::IndexOutOfRange { index: j, len: t });
    }
    if g_star[j] == 0.0 {
        return Ok(DVector::zeros(t));
    }
    let mut rhs = -nf.m.column(j).into_owned();
    rhs[j] += nf.lambda_g;
    Ok(nf.solve(&rhs) * g_star[j])
}

/// `v = 2 (M_f g − c_f)`, the gradient of the control cost.
pub fn control_gradient(nf: &NormalForm, h: &HankelSystem, op: &OperatingPoint, g: &DVector<f64>) -> DVector<f64> {
    let cf = nf.data.tracking_rhs(h, op);
    (nf.data.apply_tracking_gram(g) - cf) * 2.0
}

/// Elementwise `2 λ_g g_j p_j`.
pub fn compose_scores(g: &DVector<f64>, p: &DVector<f64>, lambda_g: f64, exec: Exec) -> DVector<f64> {
    let s = par::map_indices(exec, g.len(), |j| 2.0 * lambda_g * g[j] * p[j]);
    DVector::from_vec(s)
}

/// Offline scoring with a direct solve for `p`, reusing the factor of `nf`.
pub fn sensitivity_report(
    nf: &NormalForm,
    h: &HankelSystem,
    op: &OperatingPoint,
    k: usize,
    exec: Exec,
) -> Result<SensitivityReport> {
    let g_star = nf.solve_nominal();
    let v = control_gradient(nf, h, op, &g_star);
    let p = nf.solve(&v);
    report_from_parts(nf, g_star, v, p, k, exec)
}

/// Builds a report from `g*`, `v` and a (possibly approximate) `p`.
pub fn report_from_parts(
    nf: &NormalForm,
    g_star: DVector<f64>,
    v: DVector<f64>,
    p: DVector<f64>,
    k: usize,
    exec: Exec,
) -> Result<SensitivityReport> {
    let scores = compose_scores(&g_star, &p, nf.lambda_g, exec);
    let mp = &nf.m * &p;
    let direct = g_star.component_mul(&v);
    let indirect = DVector::from_fn(g_star.len(), |j, _| {
        g_star[j] * (nf.lambda_g * p[j] - mp[j])
    });
    let active_set = select_low_sensitivity(scores.as_slice(), k)?;
    Ok(SensitivityReport {
        g_star,
        v,
        p,
        scores,
        active_set,
        direct,
        indirect,
    })
}

/// Assembles the normal form at `op` and scores every column.
pub fn sensitivity_scores(
    h: &HankelSystem,
    cfg: &DeepcConfig,
    op: &OperatingPoint,
) -> Result<(NormalForm, SensitivityReport)> {
    let nf = NormalForm::assemble(h, cfg, op)?;
    let report = sensitivity_report(&nf, h, op, cfg.k.min(h.cols()), Exec::default())?;
    Ok((nf, report))
}

/// Indices of the `k` smallest `|S_j|`, ties to the lower index, ascending.
pub fn select_low_sensitivity(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let mut idx = smallest_k_by(scores.len(), k, |j| scores[j].abs())?;
    idx.sort_unstable();
    Ok(idx)
}

/// The `k` indices with smallest key, ordered by (key, index).
pub(crate) fn smallest_k_by(n: usize, k: usize, key: impl Fn(usize) -> f64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::SelectionTooLarge { k, t: n });
    }
    let keys: Vec<f64> = (0..n).map(&key).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| keys[*a].total_cmp(&keys[*b]).then(a.cmp(b));
    if k < n && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Restricts the system to the active set (which must be duplicate-free).
pub fn reduce_system(h: &HankelSystem, active_set: &[usize]) -> Result<HankelSystem> {
    h.select_columns(active_set)
}
