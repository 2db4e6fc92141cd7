use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{CorruptionMode, EpisodeLabel, TrajectoryDataset};

fn default_modes() -> Vec<CorruptionMode> {
    CorruptionMode::ALL.to_vec()
}

fn default_noise_factor() -> f64 {
    15.0
}

fn default_bias() -> f64 {
    0.5
}

fn default_lag() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Fraction of episodes to corrupt, in `[0, 1)`.
    pub fraction: f64,
    #[serde(default = "default_modes")]
    pub modes: Vec<CorruptionMode>,
    #[serde(default)]
    pub seed: u64,
    /// Nominal output-noise σ already present in the data.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Total noise level of a high-noise episode, as a multiple of σ.
    #[serde(default = "default_noise_factor")]
    pub noise_factor: f64,
    /// Magnitude of the sensor bias.
    #[serde(default = "default_bias")]
    pub bias: f64,
    /// Output delay, in samples, of an input/output mismatch.
    #[serde(default = "default_lag")]
    pub lag: usize,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            fraction: 0.2,
            modes: default_modes(),
            seed: 7,
            noise_sigma: 0.0,
            noise_factor: default_noise_factor(),
            bias: default_bias(),
            lag: default_lag(),
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::InvalidParameter(format!(
                "corruption fraction {} must lie in [0, 1)",
                self.fraction
            )));
        }
        if self.modes.is_empty() && self.fraction > 0.0 {
            return Err(Error::InvalidParameter("no corruption modes given".into()));
        }
        if !(self.noise_factor >= 1.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise factor must be ≥ 1 and σ ≥ 0".into()));
        }
        Ok(())
    }

    /// Number of episodes corrupted out of `episodes`.
    pub fn count(&self, episodes: usize) -> usize {
        (self.fraction * episodes as f64).round() as usize
    }
}

fn delay(y: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let n = y.ncols();
    DMatrix::from_fn(y.nrows(), n, |i, k| y[(i, k.saturating_sub(lag))])
}

/// Corrupts a seeded subset of episodes with one mode each and labels every
/// episode. A zero fraction returns the data unchanged and unlabelled.
pub fn corrupt_dataset(data: &TrajectoryDataset, spec: &CorruptionSpec) -> Result<TrajectoryDataset> {
    spec.validate()?;
    let e = data.episodes.len();
    let count = spec.count(e);
    if count == 0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = sample(&mut rng, e, count).into_vec();
    chosen.sort_unstable();
    let extra = spec.noise_sigma * (spec.noise_factor * spec.noise_factor - 1.0).sqrt();
    let noise = Normal::new(0.0, extra).map_err(|err| Error::InvalidParameter(err.to_string()))?;

    let mut out = data.clone();
    for ep in &mut out.episodes {
        ep.label = Some(EpisodeLabel::CLEAN);
    }
    for &i in &chosen {
        let mode = spec.modes[rng.random_range(0..spec.modes.len())];
        let ep = &mut out.episodes[i];
        match mode {
            CorruptionMode::HighNoise => {
                for v in ep.outputs.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            CorruptionMode::SensorBias => {
                let b = if rng.random_bool(0.5) { spec.bias } else { -spec.bias };
                ep.outputs.add_scalar_mut(b);
            }
            CorruptionMode::IoMismatch => ep.outputs = delay(&ep.outputs, spec.lag),
        }
        ep.label = Some(EpisodeLabel::corrupted(mode));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::build_partitioned;
    use crate::par::Exec;
    use crate::plants::{collect_dataset, DcMotor, DcMotorParams, Excitation, PlantConfig};
    use nalgebra::Vector3;

    fn motor_data(e: usize) -> (TrajectoryDataset, f64) {
        let plant = PlantConfig::DcMotor(DcMotorParams::default());
        let exc = Excitation {
            initial_state: Vec::new(),
            ..Excitation::for_plant(&plant)
        };
        (collect_dataset(&plant, &exc, e, 100, 11, Exec::default()).unwrap(), exc.noise_sigma)
    }

    #[test]
    fn zero_fraction_is_identity() {
        let (ds, _) = motor_data(10);
        let spec = CorruptionSpec {
            fraction: 0.0,
            ..Default::default()
        };
        let out = corrupt_dataset(&ds, &spec).unwrap();
        assert_eq!(out, ds);
        assert!(!out.has_labels());
    }

    #[test]
    fn twenty_percent_of_fifty_is_ten() {
        let (ds, sigma) = motor_data(50);
        let spec = CorruptionSpec {
            noise_sigma: sigma,
            ..Default::default()
        };
        let out = corrupt_dataset(&ds, &spec).unwrap();
        assert_eq!(out.corrupted_count(), 10);
        for (a, b) in ds.episodes.iter().zip(&out.episodes) {
            if !b.label.unwrap().corrupted {
                assert_eq!(a.inputs, b.inputs);
                assert_eq!(a.outputs, b.outputs);
            }
            assert_eq!(a.inputs, b.inputs);
        }
        assert!(corrupt_dataset(&ds, &CorruptionSpec { fraction: 1.0, ..spec }).is_err());
    }

    #[test]
    fn corrupted_residuals_exceed_clean() {
        let (ds, sigma) = motor_data(30);
        let spec = CorruptionSpec {
            noise_sigma: sigma,
            fraction: 0.3,
            ..Default::default()
        };
        let out = corrupt_dataset(&ds, &spec).unwrap();
        let motor = DcMotor::new(DcMotorParams::default()).unwrap();
        let rms = |ep: &crate::hankel::TrajectoryEpisode| {
            let mut x = Vector3::<f64>::zeros();
            let mut acc = 0.0;
            for k in 0..ep.len() {
                acc += (ep.outputs[(0, k)] - x[0]).powi(2);
                x = motor.step(&x, ep.inputs[(0, k)]);
            }
            (acc / ep.len() as f64).sqrt()
        };
        let clean_max = out.episodes.iter().filter(|e| !e.label.unwrap().corrupted).map(rms).fold(0.0, f64::max);
        let bad_min = out.episodes.iter().filter(|e| e.label.unwrap().corrupted).map(rms).fold(f64::INFINITY, f64::min);
        assert!(bad_min > clean_max, "{bad_min} vs {clean_max}");
    }

    #[test]
    fn segment_flags_follow_labels() {
        let (ds, sigma) = motor_data(20);
        let out = corrupt_dataset(&ds, &CorruptionSpec { noise_sigma: sigma, ..Default::default() }).unwrap();
        let h = build_partitioned(&out, 5, 15).unwrap();
        let flags = h.segment_clean().unwrap();
        for (j, o) in h.origin().iter().enumerate() {
            assert_eq!(flags[j], !out.episodes[o.episode].label.unwrap().corrupted);
        }
        assert_eq!(flags.iter().filter(|c| !**c).count(), 4 * 81);
    }

    #[test]
    fn lag_delays_outputs() {
        let y = DMatrix::from_row_slice(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(delay(&y, 2).as_slice(), &[1.0, 1.0, 1.0, 2.0, 3.0]);
    }
}
