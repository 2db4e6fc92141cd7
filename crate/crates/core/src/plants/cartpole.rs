//! Frictionless cart-pole, pole angle measured from upright.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    /// Cart mass, kg.
    pub mc: f64,
    /// Pole mass, kg.
    pub mp: f64,
    /// Pivot-to-mass length, m.
    pub l: f64,
    pub gravity: f64,
    /// Sample and integration step, s.
    pub dt: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            mc: 1.0,
            mp: 0.1,
            l: 0.5,
            gravity: 9.81,
            dt: 0.02,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mc, self.mp, self.l, self.gravity, self.dt];
        if all.iter().all(|x| *x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("cart-pole parameters must be positive: {self:?}")))
        }
    }

    /// Time derivative of `(x_c, ẋ_c, θ, θ̇)` under force `f`.
    pub fn derivative(&self, s: &Vector4<f64>, f: f64) -> Vector4<f64> {
        let (st, ct) = s[2].sin_cos();
        let xdd = (f + self.mp * self.l * s[3] * s[3] * st - self.mp * self.gravity * st * ct)
            / (self.mc + self.mp * st * st);
        let thdd = (self.gravity * st - xdd * ct) / self.l;
        Vector4::new(s[1], xdd, s[3], thdd)
    }

    /// Total mechanical energy, zero potential at the pivot height.
    pub fn energy(&self, s: &Vector4<f64>) -> f64 {
        let (xd, th, thd) = (s[1], s[2], s[3]);
        0.5 * (self.mc + self.mp) * xd * xd
            + self.mp * self.l * xd * thd * th.cos()
            + 0.5 * self.mp * self.l * self.l * thd * thd
            + self.mp * self.gravity * self.l * th.cos()
    }
}

/// One RK4 step of length `dt`; returns the next state and `(x_c, θ)`.
pub fn cartpole_step(state: &Vector4<f64>, f: f64, params: &CartPoleParams) -> (Vector4<f64>, [f64; 2]) {
    let h = params.dt;
    let k1 = params.derivative(state, f);
    let k2 = params.derivative(&(state + k1 * (h / 2.0)), f);
    let k3 = params.derivative(&(state + k2 * (h / 2.0)), f);
    let k4 = params.derivative(&(state + k3 * h), f);
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    (next, [next[0], next[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_equilibrium_is_fixed() {
        let p = CartPoleParams::default();
        let (s, y) = cartpole_step(&Vector4::zeros(), 0.0, &p);
        assert_eq!(s, Vector4::zeros());
        assert_eq!(y, [0.0, 0.0]);
    }

    #[test]
    fn tilted_pole_falls() {
        let p = CartPoleParams::default();
        let mut s = Vector4::new(0.0, 0.0, 30f64.to_radians(), 0.0);
        for _ in 0..10 {
            let th = s[2];
            s = cartpole_step(&s, 0.0, &p).0;
            assert!(s[2] > th);
        }
    }

    #[test]
    fn energy_is_conserved_without_force() {
        let p = CartPoleParams {
            dt: 0.001,
            ..Default::default()
        };
        let mut s = Vector4::new(0.0, 0.1, 0.3, 0.0);
        let e0 = p.energy(&s);
        for _ in 0..1000 {
            s = cartpole_step(&s, 0.0, &p).0;
        }
        assert!(((p.energy(&s) - e0) / e0).abs() < 1e-6);
    }

    #[test]
    fn small_angle_matches_linearization() {
        // θ̈ ≈ g (m_c + m_p) θ / (m_c l) near upright
        let p = CartPoleParams::default();
        let s = Vector4::new(0.0, 0.0, 1e-6, 0.0);
        let d = p.derivative(&s, 0.0);
        let want = p.gravity * (p.mc + p.mp) / (p.mc * p.l) * 1e-6;
        assert!((d[3] - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(CartPoleParams { mc: -1.0, ..Default::default() }.validate().is_err());
    }
}
