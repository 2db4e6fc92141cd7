//! Armature-controlled DC motor, position output.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcMotorParams {
    /// Rotor inertia, kg·m².
    pub j: f64,
    /// Torque constant, N·m/A.
    pub kt: f64,
    /// Viscous friction, N·m·s.
    pub b: f64,
    /// Armature inductance, H.
    pub la: f64,
    /// Armature resistance, Ω.
    pub ra: f64,
    /// Back-EMF constant, V·s.
    pub ke: f64,
    /// Sample period, s.
    pub dt: f64,
}

impl Default for DcMotorParams {
    fn default() -> Self {
        DcMotorParams {
            j: 0.01,
            kt: 0.01,
            b: 0.1,
            la: 0.5,
            ra: 1.0,
            ke: 0.01,
            dt: 0.05,
        }
    }
}

impl DcMotorParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.j, self.kt, self.b, self.la, self.ra, self.ke, self.dt];
        if all.iter().all(|x| *x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("DC motor parameters must be positive: {self:?}")))
        }
    }

    /// Continuous model `ẋ = A x + B V_a` in state `(θ, ω, i_a)`.
    pub fn continuous(&self) -> (Matrix3<f64>, Vector3<f64>) {
        #[rustfmt::skip]
        let a = Matrix3::new(
            0.0, 1.0, 0.0,
            0.0, -self.b / self.j, self.kt / self.j,
            0.0, -self.ke / self.la, -self.ra / self.la,
        );
        (a, Vector3::new(0.0, 0.0, 1.0 / self.la))
    }

    /// `ω` reached under constant `V_a`.
    pub fn steady_speed(&self, va: f64) -> f64 {
        self.kt * va / (self.ra * self.b + self.kt * self.ke)
    }
}

/// Zero-order-hold discretization, precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcMotor {
    pub params: DcMotorParams,
    pub ad: Matrix3<f64>,
    pub bd: Vector3<f64>,
}

impl DcMotor {
    pub fn new(params: DcMotorParams) -> Result<Self> {
        params.validate()?;
        let (a, b) = params.continuous();
        let mut aug = Matrix4::zeros();
        aug.fixed_view_mut::<3, 3>(0, 0).copy_from(&(a * params.dt));
        aug.fixed_view_mut::<3, 1>(0, 3).copy_from(&(b * params.dt));
        let e = aug.exp();
        Ok(DcMotor {
            params,
            ad: e.fixed_view::<3, 3>(0, 0).into_owned(),
            bd: e.fixed_view::<3, 1>(0, 3).into_owned(),
        })
    }

    pub fn step(&self, x: &Vector3<f64>, va: f64) -> Vector3<f64> {
        self.ad * x + self.bd * va
    }
}

/// One sample of the motor; returns the next state and the output `θ`.
pub fn dc_motor_step(state: &Vector3<f64>, va: f64, params: &DcMotorParams) -> Result<(Vector3<f64>, f64)> {
    let motor = DcMotor::new(*params)?;
    let next = motor.step(state, va);
    Ok((next, next[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Complex;

    #[test]
    fn zero_in_zero_out() {
        let (x, y) = dc_motor_step(&Vector3::zeros(), 0.0, &DcMotorParams::default()).unwrap();
        assert_eq!(x, Vector3::zeros());
        assert_eq!(y, 0.0);
    }

    #[test]
    fn constant_voltage_reaches_steady_speed() {
        let p = DcMotorParams::default();
        let m = DcMotor::new(p).unwrap();
        let mut x = Vector3::zeros();
        for _ in 0..2000 {
            x = m.step(&x, 3.0);
        }
        assert_relative_eq!(x[1], p.steady_speed(3.0), max_relative = 1e-9);
    }

    #[test]
    fn discrete_eigenvalues_are_exponentials() {
        let p = DcMotorParams::default();
        let m = DcMotor::new(p).unwrap();
        let (a, _) = p.continuous();
        let mut want: Vec<Complex<f64>> = a.complex_eigenvalues().iter().map(|l| (l * p.dt).exp()).collect();
        let mut got: Vec<Complex<f64>> = m.ad.complex_eigenvalues().iter().copied().collect();
        let key = |c: &Complex<f64>| (c.re, c.im);
        want.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        got.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        for (w, g) in want.iter().zip(&got) {
            assert!((w - g).norm() < 1e-10, "{w} vs {g}");
        }
    }

    #[test]
    fn superposition() {
        let m = DcMotor::new(DcMotorParams::default()).unwrap();
        let u1: Vec<f64> = (0..200).map(|k| (k as f64 * 0.3).sin()).collect();
        let u2: Vec<f64> = (0..200).map(|k| ((k * 7 % 11) as f64) - 5.0).collect();
        let run = |u: &dyn Fn(usize) -> f64| {
            let mut x = Vector3::zeros();
            (0..200)
                .map(|k| {
                    x = m.step(&x, u(k));
                    x[0]
                })
                .collect::<Vec<_>>()
        };
        let y1 = run(&|k| u1[k]);
        let y2 = run(&|k| u2[k]);
        let y12 = run(&|k| u1[k] + u2[k]);
        for k in 0..200 {
            assert!((y12[k] - y1[k] - y2[k]).abs() <= 1e-10 * (1.0 + y12[k].abs()));
        }
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let p = DcMotorParams {
            la: 0.0,
            ..Default::default()
        };
        assert!(DcMotor::new(p).is_err());
    }
}
