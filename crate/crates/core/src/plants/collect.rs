use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Plant, PlantConfig};
use crate::error::{Error, Result};
use crate::hankel::{TrajectoryDataset, TrajectoryEpisode};
use crate::par::{self, Exec};

/// Input policy and measurement noise used while recording episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Excitation {
    /// Half-width of the uniform white-noise input.
    pub amplitude: f64,
    /// Half-width of a piecewise-constant random level added to the input.
    pub low_freq_amplitude: f64,
    /// Samples per level of the low-frequency component.
    pub hold: usize,
    /// State-feedback gain `K` applied as `u = −K x + excitation`; empty for
    /// open-loop collection.
    pub feedback: Vec<f64>,
    /// Standard deviation of additive output noise.
    pub noise_sigma: f64,
    /// Half-widths of the uniform initial-state distribution; missing
    /// entries start at zero.
    pub initial_state: Vec<f64>,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation {
            amplitude: 1.0,
            low_freq_amplitude: 0.0,
            hold: 10,
            feedback: Vec::new(),
            noise_sigma: 0.0,
            initial_state: Vec::new(),
        }
    }
}

impl Excitation {
    /// Defaults used by the experiments for each plant.
    pub fn for_plant(plant: &PlantConfig) -> Self {
        match plant {
            PlantConfig::DcMotor(_) => Excitation {
                amplitude: 5.0,
                noise_sigma: 0.0005,
                initial_state: vec![1.0],
                ..Default::default()
            },
            PlantConfig::Cartpole(_) => Excitation {
                amplitude: 2.0,
                feedback: vec![-0.89, -2.02, -28.7, -6.3],
                noise_sigma: 0.002,
                initial_state: vec![0.5, 0.0, 35f64.to_radians(), 0.0],
                ..Default::default()
            },
        }
    }

    pub fn validate(&self, plant: &Plant) -> Result<()> {
        let nonneg = [self.amplitude, self.low_freq_amplitude, self.noise_sigma];
        if nonneg.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter("excitation amplitudes and noise must be nonnegative".into()));
        }
        if !self.feedback.is_empty() && self.feedback.len() != plant.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "feedback gain",
                expected: plant.state_dim(),
                actual: self.feedback.len(),
            });
        }
        if self.initial_state.len() > plant.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "initial state ranges",
                expected: plant.state_dim(),
                actual: self.initial_state.len(),
            });
        }
        if self.hold == 0 {
            return Err(Error::InvalidParameter("hold must be at least 1".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..half)
    } else {
        0.0
    }
}

fn episode(plant: &Plant, exc: &Excitation, length: usize, seed: u64) -> Result<TrajectoryEpisode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, exc.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = plant.state_dim();
    let mut x = DVector::from_fn(n, |i, _| exc.initial_state.get(i).copied().unwrap_or(0.0));
    for xi in x.iter_mut() {
        *xi = uniform(&mut rng, *xi);
    }
    let (m, p) = (plant.input_dim(), plant.output_dim());
    let mut u = DMatrix::zeros(m, length);
    let mut y = DMatrix::zeros(p, length);
    let mut level = DVector::zeros(m);
    for k in 0..length {
        if k % exc.hold == 0 {
            level = DVector::from_fn(m, |_, _| uniform(&mut rng, exc.low_freq_amplitude));
        }
        let clean = plant.output(&x);
        for i in 0..p {
            y[(i, k)] = clean[i] + noise.sample(&mut rng);
        }
        let mut uk = DVector::from_fn(m, |i, _| level[i] + uniform(&mut rng, exc.amplitude));
        if !exc.feedback.is_empty() {
            uk[0] -= exc.feedback.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        u.set_column(k, &uk);
        x = plant.step(&x, &uk);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plant state during collection"));
        }
    }
    TrajectoryEpisode::new(u, y)
}

/// Records `episodes` trajectories of `length` samples. Episode `e` draws
/// from its own stream seeded with `seed + e`.
pub fn collect_dataset(
    plant: &PlantConfig,
    exc: &Excitation,
    episodes: usize,
    length: usize,
    seed: u64,
    exec: Exec,
) -> Result<TrajectoryDataset> {
    if episodes == 0 || length == 0 {
        return Err(Error::InvalidParameter("episodes and length must be positive".into()));
    }
    let model = plant.build()?;
    exc.validate(&model)?;
    let eps = par::map_indices(exec, episodes, |e| episode(&model, exc, length, seed.wrapping_add(e as u64)));
    let eps = eps.into_iter().collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(eps, model.input_dim(), model.output_dim(), model.dt())
}
