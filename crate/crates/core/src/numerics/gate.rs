//! Binary-concrete gate with stretch-and-clip.
//!
//! A logit `ω` and uniform noise `ε` give `ẽ = σ((ln ε − ln(1−ε) + ω)/τ)`; the
//! gate is `clamp(ẽ·(ξ−γ) + γ, 0, 1)`, which reaches exact 0 and 1.

use serde::{Deserialize, Serialize};

use super::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    pub tau: f64,
    pub gamma: f64,
    pub xi: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            tau: 1.0,
            gamma: -0.1,
            xi: 1.1,
        }
    }
}

impl GateParams {
    pub fn new(tau: f64, gamma: f64, xi: f64) -> Result<Self> {
        let p = GateParams { tau, gamma, xi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("gate temperature must be > 0, got {}", self.tau)));
        }
        if !(self.gamma < 0.0 && self.xi > 1.0) {
            return Err(Error::Config(format!(
                "gate stretch needs gamma < 0 < 1 < xi, got gamma={} xi={}",
                self.gamma, self.xi
            )));
        }
        Ok(())
    }

    pub fn with_tau(self, tau: f64) -> Self {
        GateParams { tau, ..self }
    }

    fn stretch_clip(&self, e: f64) -> (f64, bool) {
        let s = e * (self.xi - self.gamma) + self.gamma;
        if s <= 0.0 {
            (0.0, false)
        } else if s >= 1.0 {
            (1.0, false)
        } else {
            (s, true)
        }
    }
}

fn noise_logit(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("gate noise must lie in (0, 1), got {epsilon}")));
    }
    Ok(epsilon.ln() - (1.0 - epsilon).ln())
}

pub fn concrete_gate(omega: f64, epsilon: f64, params: &GateParams) -> Result<f64> {
    let u = (noise_logit(epsilon)? + omega) / params.tau;
    Ok(params.stretch_clip(sigmoid(u)).0)
}

/// `∂gate/∂ω`; zero wherever the clip is active.
pub fn gate_derivative(omega: f64, epsilon: f64, params: &GateParams) -> Result<f64> {
    let u = (noise_logit(epsilon)? + omega) / params.tau;
    let e = sigmoid(u);
    let (_, inside) = params.stretch_clip(e);
    Ok(if inside {
        (params.xi - params.gamma) * e * (1.0 - e) / params.tau
    } else {
        0.0
    })
}

/// Noise-free gate used for reported explanations: `clamp(σ(ω)(ξ−γ)+γ, 0, 1)`.
pub fn deterministic_gate(omega: f64, params: &GateParams) -> f64 {
    params.stretch_clip(sigmoid(omega)).0
}

/// Exponentially annealed temperature for fine-tuning epoch `epoch` of `total`
/// (1-based): `start · (end/start)^(epoch/total)`.
pub fn temperature_at(epoch: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    start * (end / start).powf(epoch as f64 / total as f64)
}

impl Tape {
    /// Sampled gates for a column of logits with frozen noise of the same shape.
    pub fn concrete_gate(&mut self, omega: Var, epsilon: &Tensor, params: &GateParams) -> Result<Var> {
        if let Some(bad) = epsilon.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::Domain(format!("gate noise must lie in (0, 1), got {bad}")));
        }
        let p = *params;
        self.map_with(omega, epsilon, "concrete_gate", move |w, eps| {
            let u = (eps.ln() - (1.0 - eps).ln() + w) / p.tau;
            let e = sigmoid(u);
            match p.stretch_clip(e) {
                (v, true) => (v, (p.xi - p.gamma) * e * (1.0 - e) / p.tau),
                (v, false) => (v, 0.0),
            }
        })
    }

    pub fn deterministic_gate(&mut self, omega: Var, params: &GateParams) -> Var {
        let p = *params;
        self.map(omega, "deterministic_gate", move |w| {
            let e = sigmoid(w);
            match p.stretch_clip(e) {
                (v, true) => (v, (p.xi - p.gamma) * e * (1.0 - e)),
                (v, false) => (v, 0.0),
            }
        })
        .expect("gate output is bounded")
    }
}
