use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deepc::{DeepcConfig, Weight};
use crate::error::{Error, Result};
use crate::lissa::LissaParams;
use crate::online::{LocalityConfig, OnlineSelector};
use crate::plants::{CorruptionSpec, Excitation, PlantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Full,
    Random,
    Distance,
    Rds,
}

impl Selector {
    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Full => "full",
            Selector::Random => "random",
            Selector::Distance => "distance",
            Selector::Rds => "rds",
        }
    }

    pub fn online(self) -> Option<OnlineSelector> {
        match self {
            Selector::Full => None,
            Selector::Random => Some(OnlineSelector::Random),
            Selector::Distance => Some(OnlineSelector::Distance),
            Selector::Rds => Some(OnlineSelector::Rds),
        }
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Selector::Full),
            "random" => Ok(Selector::Random),
            "distance" => Ok(Selector::Distance),
            "rds" => Ok(Selector::Rds),
            other => Err(Error::InvalidParameter(format!("unknown selector '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub episodes: usize,
    pub length: usize,
    pub seed: u64,
    pub excitation: Excitation,
    /// Drop episodes labelled corrupted before building the Hankel system.
    #[serde(default)]
    pub clean_only: bool,
    /// Load this dataset instead of collecting one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// `±amplitude` on output `channel`, starting positive; zero elsewhere.
    Square {
        amplitude: f64,
        half_period_s: f64,
        channel: usize,
    },
    Zero,
}

impl ReferenceSpec {
    pub fn amplitude(&self) -> f64 {
        match self {
            ReferenceSpec::Square { amplitude, .. } => amplitude.abs(),
            ReferenceSpec::Zero => 0.0,
        }
    }

    /// Reference for all `p` outputs at sample `k`.
    pub fn at(&self, k: usize, dt: f64, p: usize) -> Vec<f64> {
        let mut r = vec![0.0; p];
        if let ReferenceSpec::Square {
            amplitude,
            half_period_s,
            channel,
        } = self
        {
            let phase = ((k as f64 * dt + 1e-9) / half_period_s).floor() as i64;
            r[*channel] = if phase % 2 == 0 { *amplitude } else { -*amplitude };
        }
        r
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub data: DataConfig,
    pub corruption: CorruptionSpec,
    pub deepc: DeepcConfig,
    pub locality: LocalityConfig,
    pub lissa: LissaParams,
    pub selector: Selector,
    /// Selection sizes; ignored by `full`.
    pub k_list: Vec<usize>,
    /// Trials per size for the random selector.
    pub trials: usize,
    /// Base seed for closed-loop noise and random selection.
    pub seed: u64,
    pub duration_s: f64,
    pub reference: ReferenceSpec,
    /// Plant state at the start of the pre-roll.
    pub initial_state: Vec<f64>,
    /// Use the two-stage online scheme instead of one offline selection.
    pub online: bool,
    pub settle_threshold_deg: f64,
    /// A trial stops as diverged once any output magnitude exceeds this.
    pub divergence_bound: f64,
}

impl ExperimentConfig {
    /// Defaults for the DC-motor tracking or cart-pole stabilization task.
    pub fn defaults_for(plant: PlantConfig) -> Self {
        let excitation = Excitation::for_plant(&plant);
        let sigma = excitation.noise_sigma;
        match plant {
            PlantConfig::DcMotor(_) => ExperimentConfig {
                plant,
                data: DataConfig {
                    episodes: 50,
                    length: 100,
                    seed: 100,
                    excitation,
                    clean_only: false,
                    path: None,
                },
                corruption: CorruptionSpec {
                    noise_sigma: sigma,
                    ..Default::default()
                },
                deepc: DeepcConfig {
                    r: Weight::Scalar(0.001),
                    lambda_g: 0.85,
                    ..DeepcConfig::default()
                },
                locality: LocalityConfig::default(),
                lissa: LissaParams::default(),
                selector: Selector::Rds,
                k_list: vec![30, 60, 90],
                trials: 10,
                seed: 1,
                duration_s: 30.0,
                reference: ReferenceSpec::Square {
                    amplitude: 1.0,
                    half_period_s: 4.0,
                    channel: 0,
                },
                initial_state: vec![0.0; 3],
                online: false,
                settle_threshold_deg: 10.0,
                divergence_bound: 100.0,
            },
            PlantConfig::Cartpole(_) => ExperimentConfig {
                plant,
                data: DataConfig {
                    episodes: 50,
                    length: 100,
                    seed: 1000,
                    excitation,
                    clean_only: false,
                    path: None,
                },
                corruption: CorruptionSpec {
                    noise_sigma: sigma,
                    ..Default::default()
                },
                deepc: DeepcConfig {
                    q: Weight::Channels(vec![1.0, 10.0]),
                    ..DeepcConfig::default()
                },
                locality: LocalityConfig::default(),
                lissa: LissaParams::default(),
                selector: Selector::Rds,
                k_list: vec![30],
                trials: 10,
                seed: 1,
                duration_s: 6.0,
                reference: ReferenceSpec::Zero,
                initial_state: vec![0.0, 0.0, 30f64.to_radians(), 0.0],
                online: true,
                settle_threshold_deg: 10.0,
                divergence_bound: std::f64::consts::FRAC_PI_2,
            },
        }
    }

    /// Parses a TOML document, filling unspecified fields from the defaults
    /// of the plant it names (`plant.kind`, default `dc_motor`).
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        let kind = overlay
            .get("plant")
            .and_then(|p| p.get("kind"))
            .and_then(|k| k.as_str())
            .unwrap_or("dc_motor");
        let plant = PlantConfig::from_id(kind)
            .ok_or_else(|| Error::parse(origin, format!("unknown plant '{kind}'")))?;
        Self::defaults_for(plant).overlay(overlay, origin)
    }

    /// Applies a partial TOML table on top of `self`.
    pub fn overlay(&self, overlay: toml::Table, origin: &Path) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::parse(origin, e.to_string()))?;
        merge(&mut base, overlay);
        let cfg: ExperimentConfig = base.try_into().map_err(|e: toml::de::Error| Error::parse(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let plant = self.plant.build()?;
        self.deepc.validate(plant.input_dim(), plant.output_dim())?;
        self.lissa.validate()?;
        self.corruption.validate()?;
        self.data.excitation.validate(&plant)?;
        if self.initial_state.len() != plant.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: plant.state_dim(),
                actual: self.initial_state.len(),
            });
        }
        if self.selector != Selector::Full && (self.k_list.is_empty() || self.k_list.contains(&0)) {
            return Err(Error::InvalidParameter("k_list must hold positive sizes".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if !(self.duration_s > 0.0) || !(self.divergence_bound > 0.0) {
            return Err(Error::InvalidParameter("duration and divergence bound must be positive".into()));
        }
        if let ReferenceSpec::Square {
            channel,
            half_period_s,
            ..
        } = self.reference
        {
            if channel >= plant.output_dim() || !(half_period_s > 0.0) {
                return Err(Error::InvalidParameter("bad square-wave reference".into()));
            }
        }
        Ok(())
    }

    /// Total simulated samples, pre-roll included.
    pub fn steps(&self) -> usize {
        let dt = self.plant.build().map(|p| p.dt()).unwrap_or(1.0);
        (self.duration_s / dt).round() as usize
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for id in ["dc_motor", "cartpole"] {
            let cfg = ExperimentConfig::defaults_for(PlantConfig::from_id(id).unwrap());
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml_str(&text, Path::new("x")).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_overlay_keeps_defaults() {
        let text = "selector = \"random\"\n[deepc]\nlambda_g = 3.0\n[plant]\nkind = \"cartpole\"\n";
        let cfg = ExperimentConfig::from_toml_str(text, Path::new("x")).unwrap();
        assert_eq!(cfg.selector, Selector::Random);
        assert_eq!(cfg.deepc.lambda_g, 3.0);
        assert_eq!(cfg.deepc.t_ini, 5);
        assert!(cfg.online);
        assert_eq!(cfg.steps(), 300);
    }

    #[test]
    fn bad_values_rejected() {
        let bad = ["[deepc]\nlambda_g = -1.0\n", "[plant]\nkind = \"boat\"\n", "trials = 0\n", "selector = \"best\"\n"];
        for b in bad {
            assert!(ExperimentConfig::from_toml_str(b, Path::new("x")).is_err(), "{b}");
        }
    }

    #[test]
    fn square_reference() {
        let r = ReferenceSpec::Square {
            amplitude: 1.0,
            half_period_s: 4.0,
            channel: 0,
        };
        assert_eq!(r.at(0, 0.05, 1), vec![1.0]);
        assert_eq!(r.at(79, 0.05, 1), vec![1.0]);
        assert_eq!(r.at(80, 0.05, 1), vec![-1.0]);
        assert_eq!(r.at(160, 0.05, 1), vec![1.0]);
        assert_eq!(ReferenceSpec::Zero.at(3, 0.1, 2), vec![0.0, 0.0]);
    }
}
