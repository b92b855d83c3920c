//! Binary dithering codec with error-feedback memory.
//!
//! A device holding memory `m` and update `delta` transmits the non-negative
//! vector `g = ((m + delta) * phi)^+`, where `phi` is a shared random sign
//! vector. Only coordinates whose sign agrees with `phi` survive; the rest
//! stay in memory for later rounds. The server multiplies the received
//! power estimate by `eta * phi` to restore signs.

use rand::Rng;
use thiserror::Error;

use crate::labels;
use crate::model::ParamVector;
use crate::rng::{derive_stream, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("dither probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("length mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

/// Shared per-round sign vector, entries in {-1, +1} stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherVector {
    pub signs: Vec<f64>,
    pub round_index: usize,
}

impl DitherVector {
    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }
}

/// Per-device error-feedback accumulator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryState(pub Vec<f64>);

impl MemoryState {
    pub fn zeros(d: usize) -> Self {
        MemoryState(vec![0.0; d])
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Non-negative transmit payload `g`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedVector(pub Vec<f64>);

impl EncodedVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sum_j g_j`, i.e. the squared norm of the amplitudes `sqrt(g)`.
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Contraction factor of the codec, `min(p, 1 - p)`.
pub fn lambda(p: f64) -> f64 {
    p.min(1.0 - p)
}

fn check_p(p: f64) -> Result<(), CodecError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(CodecError::Probability(p))
    }
}

fn check_len(a: usize, b: usize) -> Result<(), CodecError> {
    if a != b {
        return Err(CodecError::Dimension(a, b));
    }
    Ok(())
}

/// The stream the round-`round` dither is drawn from. Devices and server
/// derive it independently from the shared seed.
pub fn dither_stream(master_seed: u64, round: usize) -> RngStream {
    derive_stream(master_seed, &labels!["dither", round])
}

/// I.i.d. signs, `+1` with probability `p`.
pub fn gen_dither(master_seed: u64, round: usize, d: usize, p: f64) -> Result<DitherVector, CodecError> {
    check_p(p)?;
    let mut rng = dither_stream(master_seed, round);
    let signs = (0..d).map(|_| if rng.random::<f64>() < p { 1.0 } else { -1.0 }).collect();
    Ok(DitherVector { signs, round_index: round })
}

/// `g_j = max(0, (m_j + delta_j) * phi_j)`.
pub fn encode(m: &MemoryState, delta: &ParamVector, phi: &DitherVector) -> Result<EncodedVector, CodecError> {
    check_len(m.0.len(), delta.len())?;
    check_len(m.0.len(), phi.len())?;
    let g = m
        .0
        .iter()
        .zip(delta.iter())
        .zip(&phi.signs)
        .map(|((m, d), s)| ((m + d) * s).max(0.0))
        .collect();
    Ok(EncodedVector(g))
}

/// `m' = m + delta - phi * g` for an active device; inactive devices keep `m`.
pub fn update_memory(
    m: &MemoryState,
    delta: &ParamVector,
    phi: &DitherVector,
    g: &EncodedVector,
    active: bool,
) -> Result<MemoryState, CodecError> {
    if !active {
        return Ok(m.clone());
    }
    check_len(m.0.len(), delta.len())?;
    check_len(m.0.len(), phi.len())?;
    check_len(m.0.len(), g.len())?;
    let next = m
        .0
        .iter()
        .zip(delta.iter())
        .zip(phi.signs.iter().zip(&g.0))
        // g is 0 or |m + d| (the sign flip is exact), so each residual is
        // exactly m + d or exactly 0.
        .map(|((m, d), (s, g))| (m + d) - s * g)
        .collect();
    Ok(MemoryState(next))
}

/// `delta_hat_j = eta * phi_j * r_j`.
pub fn decode(r: &[f64], phi: &DitherVector, eta: f64) -> Result<ParamVector, CodecError> {
    check_len(r.len(), phi.len())?;
    Ok(ParamVector::from_vec(r.iter().zip(&phi.signs).map(|(r, s)| eta * s * r).collect()))
}

/// `E_phi ||v - phi * ((v * phi)^+)||^2` in closed form: a positive entry
/// keeps its residual when `phi_j = -1` (probability `1 - p`), a negative one
/// when `phi_j = +1` (probability `p`).
pub fn contraction_expectation(v: &[f64], p: f64) -> Result<f64, CodecError> {
    check_p(p)?;
    Ok(v.iter()
        .map(|&x| {
            if x > 0.0 {
                (1.0 - p) * x * x
            } else if x < 0.0 {
                p * x * x
            } else {
                0.0
            }
        })
        .sum())
}
