//! Simulated plants, data collection and corruption injection.

mod cartpole;
mod collect;
mod corrupt;
mod dc_motor;

pub use cartpole::{cartpole_step, CartPoleParams};
pub use collect::{collect_dataset, Excitation};
pub use corrupt::{corrupt_dataset, CorruptionSpec};
pub use dc_motor::{dc_motor_step, DcMotor, DcMotorParams};

use nalgebra::{DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A plant and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    DcMotor(DcMotorParams),
    Cartpole(CartPoleParams),
}

impl PlantConfig {
    pub fn id(&self) -> &'static str {
        match self {
            PlantConfig::DcMotor(_) => "dc_motor",
            PlantConfig::Cartpole(_) => "cartpole",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "dc_motor" | "dcmotor" | "motor" => Some(PlantConfig::DcMotor(DcMotorParams::default())),
            "cartpole" | "cart_pole" | "pendulum" => Some(PlantConfig::Cartpole(CartPoleParams::default())),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Plant> {
        Ok(match self {
            PlantConfig::DcMotor(p) => Plant::DcMotor(DcMotor::new(*p)?),
            PlantConfig::Cartpole(p) => {
                p.validate()?;
                Plant::Cartpole(*p)
            }
        })
    }
}

/// A ready-to-step plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Plant {
    DcMotor(DcMotor),
    Cartpole(CartPoleParams),
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        match self {
            Plant::DcMotor(_) => 3,
            Plant::Cartpole(_) => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        1
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Plant::DcMotor(_) => 1,
            Plant::Cartpole(_) => 2,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            Plant::DcMotor(m) => m.params.dt,
            Plant::Cartpole(p) => p.dt,
        }
    }

    /// Indices of outputs that are angles in radians.
    pub fn angular_outputs(&self) -> &'static [usize] {
        match self {
            Plant::DcMotor(_) => &[0],
            Plant::Cartpole(_) => &[1],
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::DcMotor(m) => {
                let s = m.step(&Vector3::new(x[0], x[1], x[2]), u[0]);
                DVector::from_column_slice(s.as_slice())
            }
            Plant::Cartpole(p) => {
                let s = cartpole_step(&Vector4::new(x[0], x[1], x[2], x[3]), u[0], p).0;
                DVector::from_column_slice(s.as_slice())
            }
        }
    }

    /// Noise-free measurement of the state.
    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::DcMotor(_) => DVector::from_element(1, x[0]),
            Plant::Cartpole(_) => DVector::from_vec(vec![x[0], x[2]]),
        }
    }
}
