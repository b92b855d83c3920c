//! Closed-form convergence envelope for the non-coherent scheme: an upper
//! bound on the average squared gradient norm after `T` rounds, split into
//! its initialization, detection, SGD/heterogeneity and contraction parts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dither::lambda;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("bound input `{name}` must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("participation ratio r = {0} outside (0, 1]")]
    Participation(f64),
    #[error("dither probability p = {0} outside (0, 1)")]
    Probability(f64),
}

/// Problem constants and protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BoundInputs {
    /// Smoothness constant.
    pub L: f64,
    /// Second-moment bound on stochastic gradients, `G^2`.
    pub G2: f64,
    /// Local gradient variance.
    pub sigma_l2: f64,
    /// Gradient heterogeneity across devices.
    pub sigma_g2: f64,
    pub Q: usize,
    pub T: usize,
    pub n: usize,
    pub eta: f64,
    pub r: f64,
    pub p: f64,
    pub snr_min: f64,
    pub d: usize,
    /// `f(theta_0) - f*`.
    pub f_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundBreakdown {
    pub init_term: f64,
    pub detection_term: f64,
    pub sgd_hetero_term: f64,
    pub contraction_term: f64,
    pub total: f64,
    /// `G~^2 = (8 / lambda^2 - 6) Q^2 G^2`.
    pub g_tilde2: f64,
    /// Effective detection-noise second moment `G_e^2`.
    pub g_e2: f64,
    pub eta_max: f64,
    /// False when `eta > eta_max`, where the bound is not guaranteed.
    pub valid: bool,
}

/// Largest step size covered by the bound, `1 / (sqrt(240) Q L)`.
#[allow(non_snake_case)]
pub fn eta_max(Q: usize, L: f64) -> f64 {
    1.0 / (240f64.sqrt() * Q as f64 * L)
}

fn positive(name: &'static str, value: f64) -> Result<f64, BoundError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(BoundError::NonPositive { name, value })
    }
}

#[allow(non_snake_case)]
pub fn bound_terms(inputs: &BoundInputs) -> Result<BoundBreakdown, BoundError> {
    let L = positive("L", inputs.L)?;
    let G2 = positive("G2", inputs.G2)?;
    let sigma_l2 = positive("sigma_l2", inputs.sigma_l2)?;
    let sigma_g2 = positive("sigma_g2", inputs.sigma_g2)?;
    let Q = positive("Q", inputs.Q as f64)?;
    let T = positive("T", inputs.T as f64)?;
    let n = positive("n", inputs.n as f64)?;
    let eta = positive("eta", inputs.eta)?;
    let snr = positive("snr_min", inputs.snr_min)?;
    let d = positive("d", inputs.d as f64)?;
    let f_gap = positive("f_gap", inputs.f_gap)?;
    let r = inputs.r;
    if !(r > 0.0 && r <= 1.0) {
        return Err(BoundError::Participation(r));
    }
    let p = inputs.p;
    if !(p > 0.0 && p < 1.0) {
        return Err(BoundError::Probability(p));
    }

    let lam = lambda(p);
    let rn = r * n;
    let g_tilde2 = (8.0 / (lam * lam) - 6.0) * Q * Q * G2;
    let g_e2 = rn * rn * g_tilde2 + 4.0 * rn * g_tilde2 / snr + g_tilde2 / (d * snr * snr);

    let init_term = 8.0 * f_gap / (T * eta * Q);
    let detection_term = 4.0 * eta * L * g_e2 / (Q * r * r * n * n);
    let sgd_hetero_term = 4.0 * eta * L * Q * G2 + 40.0 * eta * eta * Q * L * L * (sigma_l2 + 6.0 * Q * sigma_g2);
    let contraction_term = 48.0 * eta * eta * Q * Q * L * L * (1.0 - lam * lam) * G2 / (r * r * lam * lam);
    let max = eta_max(inputs.Q, L);
    Ok(BoundBreakdown {
        init_term,
        detection_term,
        sgd_hetero_term,
        contraction_term,
        total: init_term + detection_term + sgd_hetero_term + contraction_term,
        g_tilde2,
        g_e2,
        eta_max: max,
        valid: eta <= max,
    })
}
