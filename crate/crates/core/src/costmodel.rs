//! Expected process execution costs of alarm decisions.
//!
//! | actual \ decision | alarm at `j` (effective w.p. `alpha(j)`) | no alarm |
//! |-------------------|------------------------------------------|----------|
//! | deviation         | `C_a + (1 - alpha) * C_p`                | `C_p`    |
//! | no deviation      | `C_a + alpha * C_c`                      | `0`      |
//!
//! Adaptation and compensation costs are expressed relative to the penalty:
//! `C_a = lambda * C_p` and `C_c = kappa * C_p`. Effectiveness decays linearly
//! from `alpha_max` at the first prefix to `alpha_min` at the last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_PENALTY: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParameters {
    /// Penalty `C_p` for an unmitigated deviation.
    pub penalty: f64,
    /// Adaptation cost ratio, `C_a = lambda * C_p`.
    pub lambda: f64,
    /// Compensation cost ratio, `C_c = kappa * C_p`.
    pub kappa: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl CostParameters {
    pub fn new(penalty: f64, lambda: f64, kappa: f64, alpha_min: f64) -> Result<Self> {
        let params = CostParameters {
            penalty,
            lambda,
            kappa,
            alpha_min,
            alpha_max: 1.0,
        };
        params.validate()?;
        Ok(params)
    }

    /// Cost cell with the default penalty of 100.
    pub fn with_ratios(lambda: f64, kappa: f64, alpha_min: f64) -> Result<Self> {
        Self::new(DEFAULT_PENALTY, lambda, kappa, alpha_min)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if !(self.penalty.is_finite() && self.penalty > 0.0) {
            return Err(Error::domain(format!(
                "penalty must be positive, got {}",
                self.penalty
            )));
        }
        unit("lambda", self.lambda)?;
        unit("kappa", self.kappa)?;
        unit("alpha_min", self.alpha_min)?;
        if self.alpha_max != 1.0 {
            return Err(Error::domain("alpha_max is fixed at 1"));
        }
        Ok(())
    }

    pub fn adaptation_cost(&self) -> f64 {
        self.lambda * self.penalty
    }

    pub fn compensation_cost(&self) -> f64 {
        self.kappa * self.penalty
    }
}

/// Half-width of the uniform perturbation applied to a cost model that is
/// only approximately known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    pub xi: f64,
}

impl EnvelopeSpec {
    pub fn new(xi: f64) -> Result<Self> {
        if xi.is_finite() && xi >= 0.0 {
            Ok(EnvelopeSpec { xi })
        } else {
            Err(Error::domain(format!(
                "envelope half-width must be >= 0, got {xi}"
            )))
        }
    }
}

/// Adaptation effectiveness at prefix `j` of a case of length `l`.
pub fn alpha_at(j: usize, l: usize, params: &CostParameters) -> Result<f64> {
    if j < 1 || j > l {
        return Err(Error::domain(format!("prefix {j} outside 1..={l}")));
    }
    if j == 1 {
        return Ok(params.alpha_max);
    }
    if j == l {
        return Ok(params.alpha_min);
    }
    let progress = (j - 1) as f64 / (l - 1) as f64;
    Ok(params.alpha_max - (params.alpha_max - params.alpha_min) * progress)
}

/// Expected cost of a case, taken over the Bernoulli effectiveness of the adaptation.
pub fn expected_cost(
    deviation: bool,
    alarm_prefix: Option<usize>,
    l: usize,
    params: &CostParameters,
) -> Result<f64> {
    let Some(j) = alarm_prefix else {
        return Ok(if deviation { params.penalty } else { 0.0 });
    };
    let alpha = alpha_at(j, l, params)?;
    Ok(if deviation {
        params.adaptation_cost() + (1.0 - alpha) * params.penalty
    } else {
        params.adaptation_cost() + alpha * params.compensation_cost()
    })
}

/// Draws `lambda`, `kappa` and `alpha_min` independently from
/// `[x - xi, x + xi]`, clamped to `[0, 1]`. The penalty is left untouched.
pub fn sample_envelope<R: Rng + ?Sized>(
    params: &CostParameters,
    spec: EnvelopeSpec,
    rng: &mut R,
) -> CostParameters {
    let mut perturb = |x: f64| {
        let u: f64 = rng.gen();
        (x + (2.0 * u - 1.0) * spec.xi).clamp(0.0, 1.0)
    };
    let lambda = perturb(params.lambda);
    let kappa = perturb(params.kappa);
    let alpha_min = perturb(params.alpha_min);
    CostParameters {
        lambda,
        kappa,
        alpha_min,
        ..*params
    }
}
