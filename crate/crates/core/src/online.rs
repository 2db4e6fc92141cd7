//! Two-stage online selection for nonlinear plants.
//!
//! Stage 1 keeps the `K_L` pool columns whose past window is nearest to the
//! live `(y_ini, u_ini)`. Stage 2 solves the local problem, approximates
//! `p_L = H_L⁻¹ v_L` with LiSSA and keeps the `K_R` smallest `|S_j|`. The
//! control input then comes from the `K_R`-column reduced problem.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deepc::{step_control, DeepcConfig, NormalForm, OperatingPoint};
use crate::error::{check_dim, Error, Result};
use crate::hankel::HankelSystem;
use crate::lissa::{lissa_solve, CountingOperator, GramOperator, LissaParams};
use crate::par::{self, Exec};
use crate::sensitivity::{compose_scores, control_gradient, select_low_sensitivity, smallest_k_by};

fn default_k_l() -> usize {
    200
}

fn default_k_r() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityConfig {
    #[serde(default = "default_k_l")]
    pub k_l: usize,
    #[serde(default = "default_k_r")]
    pub k_r: usize,
    /// Per-channel distance weights, outputs first then inputs. `None` uses
    /// the inverse empirical variance of each channel over the pool.
    #[serde(default)]
    pub w_dist: Option<Vec<f64>>,
}

impl Default for LocalityConfig {
    fn default() -> Self {
        LocalityConfig {
            k_l: default_k_l(),
            k_r: default_k_r(),
            w_dist: None,
        }
    }
}

impl LocalityConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.k_l > t {
            return Err(Error::SelectionTooLarge { k: self.k_l, t });
        }
        if self.k_r > self.k_l || self.k_r == 0 {
            return Err(Error::InvalidParameter(format!(
                "need 0 < K_R ≤ K_L, got K_R = {}, K_L = {}",
                self.k_r, self.k_l
            )));
        }
        if let Some(w) = &self.w_dist {
            if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidParameter("distance weights must be positive".into()));
            }
        }
        Ok(())
    }

    /// Expands the channel weights to the stacked `[y_ini; u_ini]` layout.
    pub fn weights(&self, pool: &HankelSystem) -> Result<DistanceWeights> {
        let channels = match &self.w_dist {
            Some(w) => {
                check_dim("distance weight channels", pool.p + pool.m, w.len())?;
                w.clone()
            }
            None => inverse_variance(pool),
        };
        Ok(DistanceWeights::from_channels(&channels, pool.p, pool.m, pool.t_ini))
    }
}

fn inverse_variance(pool: &HankelSystem) -> Vec<f64> {
    let var = |block: &nalgebra::DMatrix<f64>, width: usize, c: usize| {
        let vals: Vec<f64> = (0..block.nrows())
            .filter(|r| r % width == c)
            .flat_map(|r| block.row(r).iter().copied().collect::<Vec<_>>())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
    };
    let inv = |v: f64| if v > 0.0 && v.is_finite() { 1.0 / v } else { 1.0 };
    (0..pool.p)
        .map(|c| inv(var(&pool.yp, pool.p, c)))
        .chain((0..pool.m).map(|c| inv(var(&pool.up, pool.m, c))))
        .collect()
}

/// Diagonal of `W` for the stacked `[Yp(:,j) − y_ini; Up(:,j) − u_ini]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceWeights {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
}

impl DistanceWeights {
    pub fn identity(p: usize, m: usize, t_ini: usize) -> Self {
        DistanceWeights {
            y: DVector::from_element(p * t_ini, 1.0),
            u: DVector::from_element(m * t_ini, 1.0),
        }
    }

    pub fn from_channels(channels: &[f64], p: usize, m: usize, t_ini: usize) -> Self {
        DistanceWeights {
            y: DVector::from_fn(p * t_ini, |i, _| channels[i % p]),
            u: DVector::from_fn(m * t_ini, |i, _| channels[p + i % m]),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        DistanceWeights {
            y: &self.y * c,
            u: &self.u * c,
        }
    }
}

/// `‖[Yp(:,j) − y_ini; Up(:,j) − u_ini]‖_W`.
pub fn locality_distance(
    j: usize,
    h: &HankelSystem,
    op: &OperatingPoint,
    w: &DistanceWeights,
) -> Result<f64> {
    if j >= h.cols() {
        return Err(Error::IndexOutOfRange { index: j, len: h.cols() });
    }
    check_dim("y_ini", h.yp.nrows(), op.y_ini.len())?;
    check_dim("u_ini", h.up.nrows(), op.u_ini.len())?;
    check_dim("output distance weights", h.yp.nrows(), w.y.len())?;
    check_dim("input distance weights", h.up.nrows(), w.u.len())?;
    Ok(distance_unchecked(j, h, op, w))
}

fn distance_unchecked(j: usize, h: &HankelSystem, op: &OperatingPoint, w: &DistanceWeights) -> f64 {
    let mut acc = 0.0;
    for (i, (a, b)) in h.yp.column(j).iter().zip(op.y_ini.iter()).enumerate() {
        acc += w.y[i] * (a - b) * (a - b);
    }
    for (i, (a, b)) in h.up.column(j).iter().zip(op.u_ini.iter()).enumerate() {
        acc += w.u[i] * (a - b) * (a - b);
    }
    acc.sqrt()
}

/// Distances of every pool column, counting evaluations into `counter`.
pub fn locality_distances(
    h: &HankelSystem,
    op: &OperatingPoint,
    w: &DistanceWeights,
    exec: Exec,
    counter: &AtomicUsize,
) -> Result<Vec<f64>> {
    if h.cols() > 0 {
        locality_distance(0, h, op, w)?;
    }
    Ok(par::map_indices(exec, h.cols(), |j| {
        counter.fetch_add(1, Ordering::Relaxed);
        distance_unchecked(j, h, op, w)
    }))
}

/// Per-step work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepCounters {
    pub distance_evals: usize,
    pub operator_applications: usize,
    pub local_cols: usize,
    pub reduced_cols: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub distance: Duration,
    pub local_solve: Duration,
    pub lissa: Duration,
    pub reduced_solve: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.distance + self.local_solve + self.lissa + self.reduced_solve
    }
}

#[derive(Debug, Clone)]
pub struct StageSelection {
    /// Pool indices of the local set, ascending.
    pub local_set: Vec<usize>,
    /// Pool indices of the active set, ascending.
    pub active_set: Vec<usize>,
    /// Scores aligned with `local_set`; empty for selectors that do not score.
    pub scores_local: Vec<f64>,
    pub counters: StepCounters,
    pub timings: StageTimings,
}

/// Stage-2 policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineSelector {
    Rds,
    Distance,
    Random,
}

impl OnlineSelector {
    pub fn as_str(self) -> &'static str {
        match self {
            OnlineSelector::Rds => "rds",
            OnlineSelector::Distance => "distance",
            OnlineSelector::Random => "random",
        }
    }
}

fn local_stage(
    h: &HankelSystem,
    op: &OperatingPoint,
    w: &DistanceWeights,
    k: usize,
    exec: Exec,
) -> Result<(Vec<usize>, usize, Duration)> {
    let start = Instant::now();
    let counter = AtomicUsize::new(0);
    let dist = locality_distances(h, op, w, exec, &counter)?;
    let mut set = smallest_k_by(dist.len(), k, |j| dist[j])?;
    set.sort_unstable();
    Ok((set, counter.into_inner(), start.elapsed()))
}

/// Stages 1 and 2 with precomputed distance weights.
pub fn two_stage_select_weighted(
    h: &HankelSystem,
    op: &OperatingPoint,
    cfg: &DeepcConfig,
    loc: &LocalityConfig,
    lp: &LissaParams,
    w: &DistanceWeights,
    exec: Exec,
) -> Result<StageSelection> {
    loc.validate(h.cols())?;
    lp.validate()?;
    let (local_set, distance_evals, t_dist) = local_stage(h, op, w, loc.k_l, exec)?;
    let local = h.select_columns(&local_set)?;

    let start = Instant::now();
    let nf = NormalForm::assemble_with(&local, cfg, op, Exec::Sequential)?;
    let g = nf.solve_nominal();
    let v = control_gradient(&nf, &local, op, &g);
    let t_local = start.elapsed();

    let start = Instant::now();
    let (p, applications) = if lp.direct {
        (nf.solve(&v), 0)
    } else {
        let opr = CountingOperator::new(GramOperator {
            data: &nf.data,
            lambda_g: nf.lambda_g,
        });
        let alpha = lp.resolve_alpha(&opr, nf.lambda_g)?;
        let p = lissa_solve(&opr, &v, alpha, lp.depth, lp.samples, Exec::Sequential)?;
        (p, opr.calls())
    };
    let t_lissa = start.elapsed();

    let scores = compose_scores(&g, &p, nf.lambda_g, Exec::Sequential);
    let picked = select_low_sensitivity(scores.as_slice(), loc.k_r)?;
    let active_set = picked.iter().map(|&i| local_set[i]).collect();
    Ok(StageSelection {
        local_set,
        active_set,
        scores_local: scores.as_slice().to_vec(),
        counters: StepCounters {
            distance_evals,
            operator_applications: applications,
            local_cols: loc.k_l,
            reduced_cols: 0,
        },
        timings: StageTimings {
            distance: t_dist,
            local_solve: t_local,
            lissa: t_lissa,
            reduced_solve: Duration::ZERO,
        },
    })
}

/// Stages 1 and 2 with the configured (or pool-derived) distance weights.
pub fn two_stage_select(
    h: &HankelSystem,
    op: &OperatingPoint,
    cfg: &DeepcConfig,
    loc: &LocalityConfig,
    lp: &LissaParams,
) -> Result<StageSelection> {
    let w = loc.weights(h)?;
    two_stage_select_weighted(h, op, cfg, loc, lp, &w, Exec::default())
}

/// Everything recorded about one online step.
#[derive(Debug, Clone)]
pub struct OnlineStepTrace {
    pub selector: OnlineSelector,
    pub local_set: Vec<usize>,
    pub active_set: Vec<usize>,
    pub scores_local: Vec<f64>,
    pub u_applied: DVector<f64>,
    pub counters: StepCounters,
    pub timings: StageTimings,
}

/// Online controller state: the pool, its distance weights and settings.
#[derive(Debug, Clone)]
pub struct OnlineController {
    pub pool: HankelSystem,
    pub cfg: DeepcConfig,
    pub loc: LocalityConfig,
    pub lissa: LissaParams,
    pub selector: OnlineSelector,
    pub exec: Exec,
    weights: DistanceWeights,
}

impl OnlineController {
    pub fn new(
        pool: HankelSystem,
        cfg: DeepcConfig,
        loc: LocalityConfig,
        lissa: LissaParams,
        selector: OnlineSelector,
    ) -> Result<Self> {
        cfg.validate(pool.m, pool.p)?;
        loc.validate(pool.cols())?;
        lissa.validate()?;
        let weights = loc.weights(&pool)?;
        Ok(OnlineController {
            pool,
            cfg,
            loc,
            lissa,
            selector,
            exec: Exec::default(),
            weights,
        })
    }

    pub fn weights(&self) -> &DistanceWeights {
        &self.weights
    }

    /// Selects, solves the reduced problem and returns the first input.
    /// `rng` is only consumed by the random selector.
    pub fn step<R: Rng + ?Sized>(&self, op: &OperatingPoint, rng: &mut R) -> Result<OnlineStepTrace> {
        let sel = match self.selector {
            OnlineSelector::Rds => two_stage_select_weighted(
                &self.pool,
                op,
                &self.cfg,
                &self.loc,
                &self.lissa,
                &self.weights,
                self.exec,
            )?,
            OnlineSelector::Distance => {
                let (local_set, evals, t) =
                    local_stage(&self.pool, op, &self.weights, self.loc.k_r, self.exec)?;
                StageSelection {
                    active_set: local_set.clone(),
                    local_set,
                    scores_local: Vec::new(),
                    counters: StepCounters {
                        distance_evals: evals,
                        local_cols: self.loc.k_r,
                        ..Default::default()
                    },
                    timings: StageTimings {
                        distance: t,
                        ..Default::default()
                    },
                }
            }
            OnlineSelector::Random => {
                let mut set = sample(rng, self.pool.cols(), self.loc.k_r).into_vec();
                set.sort_unstable();
                StageSelection {
                    local_set: set.clone(),
                    active_set: set,
                    scores_local: Vec::new(),
                    counters: StepCounters::default(),
                    timings: StageTimings::default(),
                }
            }
        };
        finish_step(&self.pool, op, &self.cfg, self.selector, sel)
    }
}

fn finish_step(
    pool: &HankelSystem,
    op: &OperatingPoint,
    cfg: &DeepcConfig,
    selector: OnlineSelector,
    mut sel: StageSelection,
) -> Result<OnlineStepTrace> {
    let start = Instant::now();
    let reduced = pool.select_columns(&sel.active_set)?;
    let nf = NormalForm::assemble_with(&reduced, cfg, op, Exec::Sequential)?;
    let out = step_control(&reduced, &nf, op)?;
    sel.timings.reduced_solve = start.elapsed();
    sel.counters.reduced_cols = nf.dim();
    Ok(OnlineStepTrace {
        selector,
        local_set: sel.local_set,
        active_set: sel.active_set,
        scores_local: sel.scores_local,
        u_applied: out.u,
        counters: sel.counters,
        timings: sel.timings,
    })
}

/// One step of the full two-stage scheme.
pub fn online_step(
    pool: &HankelSystem,
    op: &OperatingPoint,
    cfg: &DeepcConfig,
    loc: &LocalityConfig,
    lp: &LissaParams,
) -> Result<(DVector<f64>, OnlineStepTrace)> {
    let sel = two_stage_select(pool, op, cfg, loc, lp)?;
    let trace = finish_step(pool, op, cfg, OnlineSelector::Rds, sel)?;
    Ok((trace.u_applied.clone(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepc::testutil::*;
    use crate::sensitivity::sensitivity_scores;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_examples() {
        let h = random_system(1, 10, 1, 2, 3, 4);
        let w = DistanceWeights::identity(2, 1, 3);
        let mut op = random_op(1, &h);
        op.y_ini = h.yp.column(4).into_owned();
        op.u_ini = h.up.column(4).into_owned();
        assert_eq!(locality_distance(4, &h, &op, &w).unwrap(), 0.0);

        op.y_ini = h.yp.column(2).add_scalar(-1.0);
        op.u_ini = h.up.column(2).add_scalar(1.0);
        assert_relative_eq!(locality_distance(2, &h, &op, &w).unwrap(), 9f64.sqrt(), epsilon = 1e-12);
        assert!(locality_distance(10, &h, &op, &w).is_err());
    }

    #[test]
    fn scaling_weights_preserves_ranking() {
        let h = random_system(2, 60, 1, 2, 3, 4);
        let op = random_op(2, &h);
        let loc = LocalityConfig::default();
        let w = loc.weights(&h).unwrap();
        let c = AtomicUsize::new(0);
        let d1 = locality_distances(&h, &op, &w, Exec::Parallel, &c).unwrap();
        let d2 = locality_distances(&h, &op, &w.scaled(4.0), Exec::Sequential, &c).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert_relative_eq!(*b, 2.0 * a, max_relative = 1e-12);
        }
        let r1 = smallest_k_by(60, 20, |j| d1[j]).unwrap();
        let r2 = smallest_k_by(60, 20, |j| d2[j]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(c.into_inner(), 120);
    }

    #[test]
    fn collapses_to_offline_path() {
        let h = random_system(3, 25, 1, 1, 2, 3);
        let op = random_op(3, &h);
        let mut cfg = small_cfg(2, 3);
        cfg.k = 7;
        let loc = LocalityConfig {
            k_l: 25,
            k_r: 7,
            w_dist: None,
        };
        let lp = LissaParams {
            direct: true,
            ..Default::default()
        };
        let sel = two_stage_select(&h, &op, &cfg, &loc, &lp).unwrap();
        let (_, rep) = sensitivity_scores(&h, &cfg, &op).unwrap();
        assert_eq!(sel.active_set, rep.active_set);
        assert_eq!(sel.local_set, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn k_r_equal_k_l_keeps_local_set() {
        let h = random_system(4, 40, 1, 1, 2, 3);
        let op = random_op(4, &h);
        let loc = LocalityConfig {
            k_l: 12,
            k_r: 12,
            w_dist: None,
        };
        let sel = two_stage_select(&h, &op, &small_cfg(2, 3), &loc, &LissaParams::default()).unwrap();
        assert_eq!(sel.active_set, sel.local_set);
    }

    #[test]
    fn zero_operating_point_gives_zero_input() {
        let h = random_system(5, 40, 1, 2, 2, 3);
        let op = OperatingPoint::zeros(1, 2, 2, 3);
        let loc = LocalityConfig {
            k_l: 20,
            k_r: 5,
            w_dist: None,
        };
        let (u, trace) = online_step(&h, &op, &small_cfg(2, 3), &loc, &LissaParams::default()).unwrap();
        assert_eq!(u, DVector::zeros(1));
        assert!(trace.active_set.iter().all(|j| trace.local_set.contains(j)));
    }

    #[test]
    fn counters_and_determinism() {
        let h = random_system(6, 300, 1, 2, 3, 5);
        let op = random_op(6, &h);
        let loc = LocalityConfig {
            k_l: 50,
            k_r: 10,
            w_dist: None,
        };
        let lp = LissaParams {
            depth: 7,
            samples: 3,
            ..Default::default()
        };
        let (u1, t1) = online_step(&h, &op, &small_cfg(3, 5), &loc, &lp).unwrap();
        let (u2, t2) = online_step(&h, &op, &small_cfg(3, 5), &loc, &lp).unwrap();
        assert_eq!(u1, u2);
        assert_eq!(t1.active_set, t2.active_set);
        assert_eq!(t1.scores_local, t2.scores_local);
        assert_eq!(
            t1.counters,
            StepCounters {
                distance_evals: 300,
                operator_applications: 21,
                local_cols: 50,
                reduced_cols: 10,
            }
        );
    }

    #[test]
    fn selectors_respect_sizes() {
        let h = random_system(7, 120, 1, 2, 2, 3);
        let op = random_op(7, &h);
        let loc = LocalityConfig {
            k_l: 30,
            k_r: 6,
            w_dist: Some(vec![1.0, 2.0, 0.5]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for sel in [OnlineSelector::Rds, OnlineSelector::Distance, OnlineSelector::Random] {
            let c = OnlineController::new(h.clone(), small_cfg(2, 3), loc.clone(), LissaParams::default(), sel)
                .unwrap();
            let t = c.step(&op, &mut rng).unwrap();
            assert_eq!(t.active_set.len(), 6);
            assert_eq!(t.counters.reduced_cols, 6);
            assert!(t.active_set.iter().all(|j| t.local_set.contains(j)));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let h = random_system(8, 20, 1, 1, 2, 3);
        let op = random_op(8, &h);
        let bad = LocalityConfig {
            k_l: 21,
            k_r: 5,
            w_dist: None,
        };
        assert!(matches!(
            two_stage_select(&h, &op, &small_cfg(2, 3), &bad, &LissaParams::default()),
            Err(Error::SelectionTooLarge { .. })
        ));
    }
}
