//! Robust data selection for data-enabled predictive control.
//!
//! Builds Hankel systems from trajectory data, solves the regularized DeePC
//! problem through its normal equations, scores each data column by the
//! sensitivity of the control cost to its weight, and keeps the least
//! sensitive columns. A two-stage variant (locality filter, then local
//! scoring with a LiSSA inverse-Hessian product) handles nonlinear plants.

pub mod dataset;
pub mod deepc;
pub mod error;
pub mod experiment;
pub mod hankel;
pub mod lissa;
pub mod online;
pub mod par;
pub mod plants;
pub mod sensitivity;

pub use deepc::{Controller, DeepcConfig, NormalForm, OperatingPoint, Weight};
pub use error::{Error, Result};
pub use hankel::{build_partitioned, HankelSystem, TrajectoryDataset, TrajectoryEpisode};
pub use lissa::LissaParams;
pub use online::{LocalityConfig, OnlineController, OnlineSelector};
pub use par::Exec;
pub use sensitivity::{select_low_sensitivity, sensitivity_scores, SensitivityReport};
