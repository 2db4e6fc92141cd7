//! Regularized DeePC: normal-equation assembly, solves, and the weighted cost.
//!
//! The quadratic program
//!
//! ```text
//! min_g ‖Yf g − y_ref‖²_Q + ‖Uf g‖²_R + λ_g‖g‖² + λ_y‖Yp g − y_ini‖² + λ_u‖Up g − u_ini‖²
//! ```
//!
//! has normal equations `(M + λ_g I) g = b` with `M = DᵀD`, where `D` stacks the
//! weighted blocks `[Q^½ Yf; R^½ Uf; λ_y^½ Yp; λ_u^½ Up]`. `D` is kept around so
//! that Hessian-vector products never need the `T × T` matrix.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hankel::HankelSystem;
use crate::par::{self, Exec};

/// A positive-semidefinite cost weight over a stacked horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    /// `q·I`.
    Scalar(f64),
    /// One weight per signal channel, repeated over every horizon step.
    Channels(Vec<f64>),
    /// Full matrix over the stacked horizon (row-major when deserialized).
    Dense(Vec<Vec<f64>>),
}

impl Weight {
    /// The dense `(steps·dim) × (steps·dim)` matrix.
    pub fn matrix(&self, steps: usize, dim: usize) -> Result<DMatrix<f64>> {
        let n = steps * dim;
        match self {
            Weight::Scalar(q) => Ok(DMatrix::from_diagonal_element(n, n, *q)),
            Weight::Channels(w) => {
                check_dim("weight channels", dim, w.len())?;
                Ok(DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| {
                    w[i % dim]
                })))
            }
            Weight::Dense(rows) => {
                check_dim("dense weight rows", n, rows.len())?;
                let mut m = DMatrix::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    check_dim("dense weight cols", n, row.len())?;
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                Ok(m)
            }
        }
    }

    /// A square root `S` with `SᵀS = W`.
    fn sqrt(&self, steps: usize, dim: usize) -> Result<DMatrix<f64>> {
        let w = self.matrix(steps, dim)?;
        match self {
            Weight::Scalar(_) | Weight::Channels(_) => Ok(w.map(f64::sqrt)),
            Weight::Dense(_) => {
                let eig = w.symmetric_eigen();
                let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                Ok(DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
            }
        }
    }

    fn validate(&self, name: &str, steps: usize, dim: usize) -> Result<()> {
        let w = self.matrix(steps, dim)?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} has non-finite entries")));
        }
        if (&w - w.transpose()).amax() > 1e-12 * (1.0 + w.amax()) {
            return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
        }
        let min = w.clone().symmetric_eigen().eigenvalues.min();
        if min < -1e-12 * (1.0 + w.amax()) {
            return Err(Error::InvalidParameter(format!(
                "{name} is not positive semidefinite (eigenvalue {min:.3e})"
            )));
        }
        Ok(())
    }
}

fn default_k() -> usize {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepcConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub q: Weight,
    pub r: Weight,
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub lambda_u: f64,
    /// Selection size for the reduced controller.
    #[serde(default = "default_k")]
    pub k: usize,
}

impl Default for DeepcConfig {
    fn default() -> Self {
        DeepcConfig {
            t_ini: 5,
            horizon: 15,
            q: Weight::Scalar(10.0),
            r: Weight::Scalar(0.01),
            lambda_g: 1.0,
            lambda_y: 1e5,
            lambda_u: 1e5,
            k: default_k(),
        }
    }
}

impl DeepcConfig {
    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.t_ini == 0 || self.horizon == 0 {
            return Err(Error::InvalidParameter("T_ini and N must be positive".into()));
        }
        if !(self.lambda_g > 0.0) {
            return Err(Error::InvalidParameter("lambda_g must be strictly positive".into()));
        }
        if !(self.lambda_y > 0.0 && self.lambda_u > 0.0) {
            return Err(Error::InvalidParameter(
                "lambda_y and lambda_u must be strictly positive".into(),
            ));
        }
        self.q.validate("Q", self.horizon, p)?;
        self.r.validate("R", self.horizon, m)?;
        Ok(())
    }

    fn check_system(&self, h: &HankelSystem) -> Result<()> {
        check_dim("T_ini", self.t_ini, h.t_ini)?;
        check_dim("horizon", self.horizon, h.horizon)?;
        self.validate(h.m, h.p)
    }
}

/// Initial window and reference at which the problem is posed.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
    pub y_ref: DVector<f64>,
}

impl OperatingPoint {
    pub fn zeros(m: usize, p: usize, t_ini: usize, horizon: usize) -> Self {
        OperatingPoint {
            u_ini: DVector::zeros(t_ini * m),
            y_ini: DVector::zeros(t_ini * p),
            y_ref: DVector::zeros(horizon * p),
        }
    }

    pub fn check(&self, h: &HankelSystem) -> Result<()> {
        check_dim("u_ini", h.up.nrows(), self.u_ini.len())?;
        check_dim("y_ini", h.yp.nrows(), self.y_ini.len())?;
        check_dim("y_ref", h.yf.nrows(), self.y_ref.len())
    }
}

/// Weighted, stacked data `D` with `M = DᵀD`, split into the tracking part
/// (rows of `Q^½ Yf` and `R^½ Uf`) and the initial-condition part.
#[derive(Debug, Clone)]
pub struct WeightedData {
    /// `[Q^½ Yf; R^½ Uf; λ_y^½ Yp; λ_u^½ Up]`.
    pub d: DMatrix<f64>,
    /// Number of leading rows of `d` that belong to the control cost `f`.
    pub tracking_rows: usize,
    q_sqrt: DMatrix<f64>,
    lambda_y: f64,
    lambda_u: f64,
}

impl WeightedData {
    pub fn new(h: &HankelSystem, cfg: &DeepcConfig) -> Result<Self> {
        cfg.check_system(h)?;
        let q_sqrt = cfg.q.sqrt(cfg.horizon, h.p)?;
        let r_sqrt = cfg.r.sqrt(cfg.horizon, h.m)?;
        let blocks = [
            &q_sqrt * &h.yf,
            &r_sqrt * &h.uf,
            &h.yp * cfg.lambda_y.sqrt(),
            &h.up * cfg.lambda_u.sqrt(),
        ];
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut d = DMatrix::zeros(rows, h.cols());
        let mut at = 0;
        for b in &blocks {
            d.rows_mut(at, b.nrows()).copy_from(b);
            at += b.nrows();
        }
        Ok(WeightedData {
            d,
            tracking_rows: blocks[0].nrows() + blocks[1].nrows(),
            q_sqrt,
            lambda_y: cfg.lambda_y,
            lambda_u: cfg.lambda_u,
        })
    }

    /// `b = Yfᵀ Q y_ref + λ_y Ypᵀ y_ini + λ_u Upᵀ u_ini`.
    pub fn rhs(&self, h: &HankelSystem, op: &OperatingPoint) -> Result<DVector<f64>> {
        op.check(h)?;
        let mut b = self.tracking_rhs(h, op);
        b.gemv_tr(self.lambda_y, &h.yp, &op.y_ini, 1.0);
        b.gemv_tr(self.lambda_u, &h.up, &op.u_ini, 1.0);
        Ok(b)
    }

    /// `c_f = Yfᵀ Q y_ref`.
    pub fn tracking_rhs(&self, h: &HankelSystem, op: &OperatingPoint) -> DVector<f64> {
        let r = self.q_sqrt.transpose() * (&self.q_sqrt * &op.y_ref);
        h.yf.tr_mul(&r)
    }

    /// `(DᵀD + shift·I) x`, without forming the Gram matrix.
    pub fn apply_gram(&self, x: &DVector<f64>, shift: f64) -> DVector<f64> {
        let dx = &self.d * x;
        let mut out = self.d.tr_mul(&dx);
        out.axpy(shift, x, 1.0);
        out
    }

    /// `M_f x = (Yfᵀ Q Yf + Ufᵀ R Uf) x`.
    pub fn apply_tracking_gram(&self, x: &DVector<f64>) -> DVector<f64> {
        let top = self.d.rows(0, self.tracking_rows);
        top.tr_mul(&(top * x))
    }

    pub fn cols(&self) -> usize {
        self.d.ncols()
    }
}

/// `DᵀD`, column blocks computed under `exec`. The result is exactly symmetric.
pub fn gram(d: &DMatrix<f64>, exec: Exec) -> DMatrix<f64> {
    let t = d.ncols();
    let mut m = DMatrix::zeros(t, t);
    if t == 0 {
        return m;
    }
    let width = if exec.is_parallel() { 64 } else { t };
    par::for_each_chunk_mut(exec, m.as_mut_slice(), t * width, |ci, chunk| {
        let c0 = ci * width;
        let cw = chunk.len() / t;
        let mut view = nalgebra::DMatrixViewMut::from_slice(chunk, t, cw);
        view.gemm_tr(1.0, d, &d.columns(c0, cw), 0.0);
    });
    // mirror the lower triangle so both halves are bit-identical
    for j in 0..t {
        for i in j + 1..t {
            m[(j, i)] = m[(i, j)];
        }
    }
    m
}

/// Normal equations of the regularized problem, factorized once.
#[derive(Clone)]
pub struct NormalForm {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda_g: f64,
    pub data: WeightedData,
    factor: Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for NormalForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NormalForm")
            .field("t", &self.m.nrows())
            .field("lambda_g", &self.lambda_g)
            .finish_non_exhaustive()
    }
}

impl NormalForm {
    /// Builds `M`, `b`, `H = M + λ_g I` and its Cholesky factor.
    pub fn assemble(h: &HankelSystem, cfg: &DeepcConfig, op: &OperatingPoint) -> Result<Self> {
        Self::assemble_with(h, cfg, op, Exec::default())
    }

    pub fn assemble_with(
        h: &HankelSystem,
        cfg: &DeepcConfig,
        op: &OperatingPoint,
        exec: Exec,
    ) -> Result<Self> {
        let data = WeightedData::new(h, cfg)?;
        let b = data.rhs(h, op)?;
        if data.d.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Hankel data or operating point"));
        }
        let m = gram(&data.d, exec);
        let mut hmat = m.clone();
        for i in 0..hmat.nrows() {
            hmat[(i, i)] += cfg.lambda_g;
        }
        let factor = Cholesky::new(hmat).ok_or(Error::NonFinite("Hessian factorization"))?;
        Ok(NormalForm {
            m,
            b,
            lambda_g: cfg.lambda_g,
            data,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `H = M + λ_g I`, materialized on request.
    pub fn hmat(&self) -> DMatrix<f64> {
        let mut h = self.m.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += self.lambda_g;
        }
        h
    }

    pub fn factor(&self) -> &Cholesky<f64, Dyn> {
        &self.factor
    }

    /// `H⁻¹ x` with the cached factor.
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(x)
    }

    /// The nominal solution `g* = H⁻¹ b`.
    pub fn solve_nominal(&self) -> DVector<f64> {
        self.solve(&self.b)
    }

    /// `‖H g − b‖`.
    pub fn residual(&self, g: &DVector<f64>) -> f64 {
        let mut r = &self.m * g;
        r.axpy(self.lambda_g, g, 1.0);
        (r - &self.b).norm()
    }
}

/// Free function form of [`NormalForm::assemble`].
pub fn assemble_normal(h: &HankelSystem, cfg: &DeepcConfig, op: &OperatingPoint) -> Result<NormalForm> {
    NormalForm::assemble(h, cfg, op)
}

pub fn solve_nominal(nf: &NormalForm) -> DVector<f64> {
    nf.solve_nominal()
}

/// Weighted objective `J(g; w)`, control cost `f(g; w)`, and the constant
/// `J(0; w)` that makes `J = gᵀWMWg − 2bᵀWg + λ_g‖g‖² + constant` exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedCost {
    pub j: f64,
    pub f: f64,
    pub constant: f64,
}

/// Evaluates the weighted costs from residuals, independent of `M` and `b`.
pub fn eval_weighted_cost(
    g: &DVector<f64>,
    w: &DVector<f64>,
    h: &HankelSystem,
    cfg: &DeepcConfig,
    op: &OperatingPoint,
) -> Result<WeightedCost> {
    let t = h.cols();
    check_dim("g", t, g.len())?;
    check_dim("w", t, w.len())?;
    op.check(h)?;
    let q = cfg.q.matrix(cfg.horizon, h.p)?;
    let r = cfg.r.matrix(cfg.horizon, h.m)?;
    let wg = g.component_mul(w);

    let ey = &h.yf * &wg - &op.y_ref;
    let eu = &h.uf * &wg;
    let ep = &h.yp * &wg - &op.y_ini;
    let eup = &h.up * &wg - &op.u_ini;

    let f = ey.dot(&(&q * &ey)) + eu.dot(&(&r * &eu));
    let j = f + cfg.lambda_g * g.norm_squared()
        + cfg.lambda_y * ep.norm_squared()
        + cfg.lambda_u * eup.norm_squared();
    let constant = op.y_ref.dot(&(&q * &op.y_ref))
        + cfg.lambda_y * op.y_ini.norm_squared()
        + cfg.lambda_u * op.u_ini.norm_squared();
    Ok(WeightedCost { j, f, constant })
}

/// Solves `(W M W + λ_g I) g = W b` with a fresh factorization.
pub fn solve_weighted(
    w: &DVector<f64>,
    h: &HankelSystem,
    cfg: &DeepcConfig,
    op: &OperatingPoint,
) -> Result<DVector<f64>> {
    check_dim("w", h.cols(), w.len())?;
    let data = WeightedData::new(h, cfg)?;
    let b = data.rhs(h, op)?;
    let mut a = gram(&data.d, Exec::Sequential);
    let t = a.nrows();
    for j in 0..t {
        for i in 0..t {
            a[(i, j)] *= w[i] * w[j];
        }
        a[(j, j)] += cfg.lambda_g;
    }
    let rhs = b.component_mul(w);
    let chol = Cholesky::new(a).ok_or(Error::NonFinite("weighted Hessian factorization"))?;
    Ok(chol.solve(&rhs))
}

/// Output of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub u: DVector<f64>,
    pub g: DVector<f64>,
    pub solve_time: Duration,
}

/// A DeePC controller over a fixed (possibly reduced) Hankel system, with the
/// Hessian factorized once.
#[derive(Debug, Clone)]
pub struct Controller {
    pub system: HankelSystem,
    pub cfg: DeepcConfig,
    pub normal: NormalForm,
}

impl Controller {
    pub fn new(system: HankelSystem, cfg: DeepcConfig) -> Result<Self> {
        let op = OperatingPoint::zeros(system.m, system.p, cfg.t_ini, cfg.horizon);
        let normal = NormalForm::assemble(&system, &cfg, &op)?;
        Ok(Controller {
            system,
            cfg,
            normal,
        })
    }

    pub fn cols(&self) -> usize {
        self.system.cols()
    }

    /// Computes the reduced right-hand side, solves with the cached factor
    /// and returns the first `m` entries of `Uf g`.
    pub fn step(&self, op: &OperatingPoint) -> Result<StepOutput> {
        step_control(&self.system, &self.normal, op)
    }
}

pub fn step_control(h: &HankelSystem, nf: &NormalForm, op: &OperatingPoint) -> Result<StepOutput> {
    check_dim("cached factor size", h.cols(), nf.dim())?;
    let start = Instant::now();
    let b = nf.data.rhs(h, op)?;
    let g = nf.solve(&b);
    let u = h.uf.rows(0, h.m) * &g;
    let solve_time = start.elapsed();
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("control input"));
    }
    Ok(StepOutput { u, g, solve_time })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random small system with unit-scale entries.
    pub fn random_system(seed: u64, t: usize, m: usize, p: usize, t_ini: usize, n: usize) -> HankelSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |r: usize| DMatrix::from_fn(r, t, |_, _| rng.random_range(-1.0..1.0));
        let up = mk(t_ini * m);
        let uf = mk(n * m);
        let yp = mk(t_ini * p);
        let yf = mk(n * p);
        HankelSystem::from_blocks(up, uf, yp, yf, m, p).unwrap()
    }

    pub fn random_op(seed: u64, h: &HankelSystem) -> OperatingPoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let mut v = |n: usize| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        OperatingPoint {
            u_ini: v(h.up.nrows()),
            y_ini: v(h.yp.nrows()),
            y_ref: v(h.yf.nrows()),
        }
    }

    pub fn small_cfg(t_ini: usize, n: usize) -> DeepcConfig {
        DeepcConfig {
            t_ini,
            horizon: n,
            q: Weight::Scalar(1.0),
            r: Weight::Scalar(1.0),
            lambda_g: 0.1,
            lambda_y: 10.0,
            lambda_u: 10.0,
            k: 1,
        }
    }
}
