//! Round orchestration for the non-coherent scheme and its baselines.
//!
//! Shared randomness (device selection, mini-batches, dithers) is derived
//! from the trial seed alone, so every scheme in a trial sees the same
//! selections and batches for the same model. Fading and noise streams are
//! keyed by scheme name because the coherent baselines draw them differently.

use std::fmt;

use num_complex::Complex64;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    self, average_power, average_power_complex, enforce_budget, ChannelError, ChannelRound, FadingModel, FadingUplink,
    LinkGain, NonCoherentUplink, Transmission,
};
use crate::data::{Dataset, DevicePartition};
use crate::dither::{self, CodecError, DitherVector, MemoryState};
use crate::exec::Exec;
use crate::labels;
use crate::model::{local_update, LocalUpdate, ModelError, Objective, ParamVector};
use crate::rng::{derive_stream, RngStream};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("participation r = {r} with n = {n} does not select a positive whole number of devices")]
    Participation { r: f64, n: usize },
    #[error("model diverged in round {round}")]
    Diverged { round: usize },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
    #[error("channel error: {0}")]
    Channel(#[from] ChannelError),
    #[error("inconsistent round state: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(alias = "fedavg", alias = "ideal")]
    FedAvgIdeal,
    #[serde(alias = "ncairfl")]
    NCAirFL,
    #[serde(alias = "cairfl")]
    CAirFL,
    #[serde(alias = "airfl-mem", alias = "airflmem")]
    AirFLMem,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [SchemeKind::FedAvgIdeal, SchemeKind::NCAirFL, SchemeKind::CAirFL, SchemeKind::AirFLMem];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::FedAvgIdeal => "FedAvgIdeal",
            SchemeKind::NCAirFL => "NCAirFL",
            SchemeKind::CAirFL => "CAirFL",
            SchemeKind::AirFLMem => "AirFLMem",
        }
    }

    pub fn uses_channel(self) -> bool {
        self != SchemeKind::FedAvgIdeal
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Global model, per-device memories and the index of the next round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub theta: ParamVector,
    pub memories: Vec<MemoryState>,
    pub round: usize,
}

impl RoundState {
    pub fn new(theta: ParamVector, n: usize) -> Self {
        let d = theta.len();
        RoundState { theta, memories: vec![MemoryState::zeros(d); n], round: 0 }
    }
}

/// Protocol and physical-layer parameters of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeParams {
    pub n: usize,
    pub r: f64,
    pub local_steps: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub p: f64,
    /// Per-device average power budget in Watts.
    pub powers: Vec<f64>,
    pub sigma2: f64,
    pub fading: FadingModel,
    pub rho_cap: f64,
    pub gamma_th: f64,
    pub exec: Exec,
}

/// Everything about the population that stays fixed across rounds.
#[derive(Clone, Copy)]
pub struct Federation<'a> {
    pub objective: &'a dyn Objective,
    pub data: &'a Dataset,
    pub partitions: &'a [DevicePartition],
    pub gains: &'a [LinkGain],
}

/// Per-round diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub active: Vec<usize>,
    /// Power scale used this round; NaN for the channel-free scheme.
    pub rho: f64,
    /// `(measured (1/d)||x_i||^2, budget P_i)` for each active device.
    pub power: Vec<(f64, f64)>,
    pub sampled_with_replacement: bool,
}

impl RoundReport {
    pub fn power_violations(&self) -> usize {
        self.power.iter().filter(|(used, budget)| used > budget).count()
    }
}

/// Number of devices selected per round, `r * n`, required to be a positive
/// integer.
pub fn active_count(n: usize, r: f64) -> Result<usize, SchemeError> {
    let rn = r * n as f64;
    let k = rn.round();
    if !(r > 0.0 && r <= 1.0) || k < 1.0 || (rn - k).abs() > 1e-9 {
        return Err(SchemeError::Participation { r, n });
    }
    Ok(k as usize)
}

/// Uniform subset of `r * n` devices without replacement, ascending ids.
pub fn sample_devices(n: usize, r: f64, rng: &mut RngStream) -> Result<Vec<usize>, SchemeError> {
    let k = active_count(n, r)?;
    if k == n {
        return Ok((0..n).collect());
    }
    let mut set = index::sample(rng, n, k).into_vec();
    set.sort_unstable();
    Ok(set)
}

/// `theta - delta_hat / (r n)`.
pub fn global_update(theta: &ParamVector, delta_hat: &ParamVector, rn: f64) -> ParamVector {
    ParamVector::from_vec(theta.iter().zip(delta_hat.iter()).map(|(t, dh)| t - dh / rn).collect())
}

fn check_state(state: &RoundState, params: &SchemeParams, fed: &Federation<'_>) -> Result<(), SchemeError> {
    let n = params.n;
    if state.memories.len() != n || fed.partitions.len() != n || fed.gains.len() != n || params.powers.len() != n {
        return Err(SchemeError::State(format!(
            "n = {n}, memories {}, partitions {}, gains {}, powers {}",
            state.memories.len(),
            fed.partitions.len(),
            fed.gains.len(),
            params.powers.len()
        )));
    }
    if state.theta.len() != fed.objective.dim() {
        return Err(SchemeError::State(format!("theta has {} entries, model has {}", state.theta.len(), fed.objective.dim())));
    }
    Ok(())
}

fn select(state: &RoundState, params: &SchemeParams, trial_seed: u64) -> Result<Vec<usize>, SchemeError> {
    let mut rng = derive_stream(trial_seed, &labels!["select", state.round]);
    sample_devices(params.n, params.r, &mut rng)
}

fn local_updates(
    state: &RoundState,
    params: &SchemeParams,
    fed: &Federation<'_>,
    active: &[usize],
    trial_seed: u64,
) -> Result<Vec<LocalUpdate>, SchemeError> {
    let round = state.round;
    params
        .exec
        .map(active, |&i| {
            let mut rng = derive_stream(trial_seed, &labels!["batch", round, i]);
            local_update(fed.objective, &state.theta, fed.data, &fed.partitions[i], params.local_steps, params.eta, params.batch_size, &mut rng)
        })
        .into_iter()
        .map(|u| {
            u.map_err(|e| match e {
                ModelError::NumericOverflow(_) => SchemeError::Diverged { round },
                other => SchemeError::Model(other),
            })
        })
        .collect()
}

fn finish(theta: ParamVector, round: usize) -> Result<ParamVector, SchemeError> {
    if theta.is_finite() {
        Ok(theta)
    } else {
        Err(SchemeError::Diverged { round })
    }
}

/// One round of any scheme. `trial_seed` keys the shared streams.
pub fn run_round(
    kind: SchemeKind,
    state: &RoundState,
    params: &SchemeParams,
    fed: &Federation<'_>,
    trial_seed: u64,
) -> Result<(RoundState, RoundReport), SchemeError> {
    match kind {
        SchemeKind::FedAvgIdeal => run_round_ideal(state, params, fed, trial_seed),
        SchemeKind::NCAirFL => {
            let mut uplink = FadingUplink {
                gains: fed.gains,
                sigma2: params.sigma2,
                fading: params.fading,
                seed: trial_seed,
                scope: kind.name(),
                exec: params.exec,
            };
            run_round_ncairfl(state, params, fed, trial_seed, &mut uplink)
        }
        SchemeKind::CAirFL => run_round_trunc_ci(state, params, fed, trial_seed, false),
        SchemeKind::AirFLMem => run_round_trunc_ci(state, params, fed, trial_seed, true),
    }
}

/// Error-free averaging of the selected devices' model differences.
pub fn run_round_ideal(
    state: &RoundState,
    params: &SchemeParams,
    fed: &Federation<'_>,
    trial_seed: u64,
) -> Result<(RoundState, RoundReport), SchemeError> {
    check_state(state, params, fed)?;
    let active = select(state, params, trial_seed)?;
    let updates = local_updates(state, params, fed, &active, trial_seed)?;
    let mut sum = ParamVector::zeros(state.theta.len());
    for u in &updates {
        for (s, d) in sum.iter_mut().zip(u.delta.iter()) {
            *s += d;
        }
    }
    let rn = active.len() as f64;
    let theta = finish(global_update(&state.theta, &sum, rn), state.round)?;
    let report = RoundReport {
        round: state.round,
        sampled_with_replacement: updates.iter().any(|u| u.sampled_with_replacement),
        active,
        rho: f64::NAN,
        power: Vec::new(),
    };
    Ok((RoundState { theta, memories: state.memories.clone(), round: state.round + 1 }, report))
}

/// Non-coherent round: dithered error-feedback encoding, power-scaled
/// amplitude transmission, and square-law detection. The receiver side sees
/// the channel only through `uplink`.
pub fn run_round_ncairfl(
    state: &RoundState,
    params: &SchemeParams,
    fed: &Federation<'_>,
    trial_seed: u64,
    uplink: &mut dyn NonCoherentUplink,
) -> Result<(RoundState, RoundReport), SchemeError> {
    check_state(state, params, fed)?;
    let d = state.theta.len();
    let round = state.round;
    let active = select(state, params, trial_seed)?;
    let updates = local_updates(state, params, fed, &active, trial_seed)?;
    let phi = dither::gen_dither(trial_seed, round, d, params.p)?;

    let mut memories = state.memories.clone();
    let mut encoded = Vec::with_capacity(active.len());
    for (&i, u) in active.iter().zip(&updates) {
        let g = dither::encode(&state.memories[i], &u.delta, &phi)?;
        memories[i] = dither::update_memory(&state.memories[i], &u.delta, &phi, &g, true)?;
        encoded.push(g);
    }

    let gains: Vec<LinkGain> = active.iter().map(|&i| fed.gains[i]).collect();
    let powers: Vec<f64> = active.iter().map(|&i| params.powers[i]).collect();
    let rho = channel::select_rho(&encoded, &gains, &powers, params.eta, d, params.rho_cap);
    let x: Vec<Vec<f64>> = encoded
        .iter()
        .zip(&gains)
        .map(|(g, &gain)| channel::transmit_signal(g, params.eta, rho, gain))
        .collect::<Result<_, _>>()?;
    let power = x.iter().zip(&powers).map(|(x, &p)| (average_power(x), p)).collect();

    let tx: Vec<Transmission<'_>> = active.iter().zip(&x).map(|(&device, x)| Transmission { device, amplitudes: x }).collect();
    let y = uplink.receive(round, d, &tx)?;
    let stats = channel::square_law(&y, uplink.noise_variance(), rho)?;

    let rn = active.len() as f64;
    let theta = finish(ncairfl_update(&state.theta, &stats.r, &phi, params.eta, rn), round)?;
    let report = RoundReport {
        round,
        sampled_with_replacement: updates.iter().any(|u| u.sampled_with_replacement),
        active,
        rho,
        power,
    };
    Ok((RoundState { theta, memories, round: round + 1 }, report))
}

/// `theta - (eta / (r n)) phi * r`, evaluated in the same order as
/// [`dither::decode`] followed by [`global_update`].
pub fn ncairfl_update(theta: &ParamVector, r: &[f64], phi: &DitherVector, eta: f64, rn: f64) -> ParamVector {
    ParamVector::from_vec(
        theta
            .iter()
            .zip(r)
            .zip(&phi.signs)
            .map(|((t, r), s)| t - (eta * s * r) / rn)
            .collect(),
    )
}

/// Truncated channel inversion with genie transmitter CSI. Device `i` sends
/// `sqrt(rho) v_ij / (sqrt(kappa_i) h_ij)` where `|h_ij| >= gamma_th` and
/// nothing elsewhere, with payload `v = delta / eta` or, with memory,
/// `v = (m + delta) / eta`. The server reads `r_j = Re(y_j) / sqrt(rho)`.
pub fn run_round_trunc_ci(
    state: &RoundState,
    params: &SchemeParams,
    fed: &Federation<'_>,
    trial_seed: u64,
    with_memory: bool,
) -> Result<(RoundState, RoundReport), SchemeError> {
    check_state(state, params, fed)?;
    let d = state.theta.len();
    let round = state.round;
    let scope = if with_memory { SchemeKind::AirFLMem.name() } else { SchemeKind::CAirFL.name() };
    let active = select(state, params, trial_seed)?;
    let updates = local_updates(state, params, fed, &active, trial_seed)?;

    let h: Vec<Vec<Complex64>> = params.exec.map(&active, |&i| {
        let mut rng = derive_stream(trial_seed, &labels![scope, "fading", round, i]);
        params.fading.draw(d, &mut rng)
    });
    let payloads: Vec<Vec<f64>> = active
        .iter()
        .zip(&updates)
        .map(|(&i, u)| {
            let m = &state.memories[i].0;
            u.delta
                .iter()
                .zip(m)
                .map(|(delta, m)| if with_memory { (m + delta) / params.eta } else { delta / params.eta })
                .collect()
        })
        .collect();
    let gains: Vec<LinkGain> = active.iter().map(|&i| fed.gains[i]).collect();
    let powers: Vec<f64> = active.iter().map(|&i| params.powers[i]).collect();
    let masks: Vec<Vec<bool>> = h.iter().map(|row| row.iter().map(|h| h.norm() >= params.gamma_th).collect()).collect();

    let inputs = TruncInputs { payloads: &payloads, h: &h, masks: &masks, gains: &gains };
    let rho = truncated_rho(&inputs, &powers, params.eta, d, params.rho_cap);
    let x: Vec<Vec<Complex64>> = (0..active.len()).map(|i| inputs.signal(i, rho)).collect();
    let power = x.iter().zip(&powers).map(|(x, &p)| (average_power_complex(x), p)).collect();

    let channel_round = ChannelRound { gains, h, sigma2: params.sigma2, rho };
    let mut noise_rng = derive_stream(trial_seed, &labels![scope, "noise", round]);
    let y = channel::superpose_complex(&x, d, &channel_round, &mut noise_rng)?;
    let sqrt_rho = rho.sqrt();
    let delta_hat = ParamVector::from_vec(y.iter().map(|y| params.eta * (y.re / sqrt_rho)).collect());

    let mut memories = state.memories.clone();
    if with_memory {
        for (k, (&i, u)) in active.iter().zip(&updates).enumerate() {
            let m = &state.memories[i].0;
            memories[i] = MemoryState(
                (0..d).map(|j| if masks[k][j] { 0.0 } else { m[j] + u.delta[j] }).collect(),
            );
        }
    }
    let rn = active.len() as f64;
    let theta = finish(global_update(&state.theta, &delta_hat, rn), round)?;
    let report = RoundReport {
        round,
        sampled_with_replacement: updates.iter().any(|u| u.sampled_with_replacement),
        active,
        rho,
        power,
    };
    Ok((RoundState { theta, memories, round: round + 1 }, report))
}

struct TruncInputs<'a> {
    payloads: &'a [Vec<f64>],
    h: &'a [Vec<Complex64>],
    masks: &'a [Vec<bool>],
    gains: &'a [LinkGain],
}

impl TruncInputs<'_> {
    fn signal(&self, i: usize, rho: f64) -> Vec<Complex64> {
        let scale = rho.sqrt() / self.gains[i].kappa.sqrt();
        self.payloads[i]
            .iter()
            .zip(&self.h[i])
            .zip(&self.masks[i])
            .map(|((&v, &h), &keep)| if keep && v != 0.0 { (scale * v) / h } else { Complex64::new(0.0, 0.0) })
            .collect()
    }

    fn power(&self, i: usize, rho: f64) -> f64 {
        average_power_complex(&self.signal(i, rho))
    }
}

/// `min_i P_i kappa_i eta d / sum_{j unmasked} v_ij^2 / |h_ij|^2`, then trimmed
/// so every measured power is within budget. The `eta` factor mirrors the
/// non-coherent scale; for `eta < 1` it leaves headroom below the budget.
fn truncated_rho(inputs: &TruncInputs<'_>, powers: &[f64], eta: f64, d: usize, rho_cap: f64) -> f64 {
    let rho = (0..inputs.payloads.len())
        .filter_map(|i| {
            let energy: f64 = inputs.payloads[i]
                .iter()
                .zip(&inputs.h[i])
                .zip(&inputs.masks[i])
                .filter(|(_, &keep)| keep)
                .map(|((v, h), _)| v * v / h.norm_sqr())
                .sum();
            (energy > 0.0).then(|| powers[i] * inputs.gains[i].kappa * eta * d as f64 / energy)
        })
        .fold(f64::INFINITY, f64::min);
    if !rho.is_finite() {
        return rho_cap;
    }
    enforce_budget(rho.min(rho_cap), powers, |i, r| inputs.power(i, r))
}
