//! Distributionally robust client weighting on the probability simplex:
//! chi-square divergence to uniform, exponentiated mirror ascent, and
//! projection onto the chi-square ball of radius ρ.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// Client weight state owned by the server.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroState {
    pub w: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
}

impl DroState {
    pub fn uniform(n: usize, rho: f64, gamma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("DroState needs at least one client"));
        }
        if rho < 0.0 || gamma < 0.0 {
            return Err(Error::invalid("rho and gamma must be >= 0"));
        }
        Ok(DroState {
            w: vec![1.0 / n as f64; n],
            rho,
            gamma,
        })
    }

    /// Mirror-ascent step on the client losses followed by projection onto
    /// the chi-square ball.
    pub fn update(&mut self, losses: &[f64]) -> Result<()> {
        let stepped = mirror_step(&self.w, losses, self.gamma)?;
        self.w = project_to_ball(&stepped, self.rho)?;
        Ok(())
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("empty weight vector"));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || w.iter().any(|&v| v < -SIMPLEX_TOL) {
        return Err(Error::invalid(format!(
            "weights off the simplex (sum {sum}, min {})",
            w.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    Ok(())
}

/// χ² divergence to uniform: (1/N)·Σ(N·w_i − 1)².
pub fn chi_square_div(w: &[f64]) -> Result<f64> {
    check_simplex(w)?;
    let n = w.len() as f64;
    Ok(w.iter().map(|&v| (n * v - 1.0).powi(2)).sum::<f64>() / n)
}

/// w′_i ∝ w_i·exp(γ·v_i), stabilized by max subtraction. Does not project.
pub fn mirror_step(w: &[f64], v: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_simplex(w)?;
    if v.len() != w.len() {
        return Err(Error::invalid("losses length must match weights"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite client loss"));
    }
    let max = v
        .iter()
        .map(|&x| gamma * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = w
        .iter()
        .zip(v.iter())
        .map(|(&wi, &vi)| wi * (gamma * vi - max).exp())
        .collect();
    let sum: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|x| x / sum).collect())
}

/// Closed-form blend coefficient for the radial projection:
/// along w(t) = (1−t)·w + t·uniform, div(t) = (1−t)²·div(w), so the
/// smallest feasible t is 1 − sqrt(ρ/div(w)).
pub fn blend_coefficient(div: f64, rho: f64) -> f64 {
    if div <= rho {
        0.0
    } else {
        1.0 - (rho / div).sqrt()
    }
}

/// Projection onto {w : χ²(Nw‖1) ≤ ρ} by blending toward uniform, found by
/// bisection on the blend coefficient.
pub fn project_to_ball(w: &[f64], rho: f64) -> Result<Vec<f64>> {
    if rho < 0.0 {
        return Err(Error::invalid("rho must be >= 0"));
    }
    let div = chi_square_div(w)?;
    if div <= rho {
        return Ok(w.to_vec());
    }
    let n = w.len() as f64;
    let uniform = 1.0 / n;
    let blend = |t: f64| -> Vec<f64> {
        w.iter().map(|&wi| (1.0 - t) * wi + t * uniform).collect()
    };
    // Invariant: blend(hi) is feasible, blend(lo) is not. Iterate to an
    // interval narrow enough that the result matches the closed-form blend
    // coefficient well inside 1e-8.
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        if hi - lo <= 1e-14 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let d = chi_square_div(&blend(mid))?;
        if d > rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(blend(hi))
}
