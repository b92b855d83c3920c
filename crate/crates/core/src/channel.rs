//! Physical layer: path loss, small-scale fading, power scaling, OFDM
//! superposition on `d` flat subcarriers, and square-law detection.
//!
//! All powers are in Watts. A device transmitting amplitudes `x` over link
//! gain `kappa` and fading `h` contributes `h * sqrt(kappa) * x` to the
//! received sample; noise is circularly-symmetric Gaussian with variance
//! `sigma2` per subcarrier.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dither::EncodedVector;
use crate::exec::Exec;
use crate::labels;
use crate::rng::{derive_stream, RngStream};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("distance must be positive, got {0} m")]
    Distance(f64),
    #[error("negative payload {value} at subcarrier {index}")]
    NegativePayload { index: usize, value: f64 },
    #[error("power scale must be positive, got {0}")]
    Rho(f64),
    #[error("device/subcarrier layout mismatch: {0}")]
    Layout(String),
}

/// Large-scale power gain of one device's link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkGain {
    pub kappa: f64,
    pub distance_m: f64,
}

/// Free-space gain `c^2 / (4 pi f_c r)^2`.
pub fn path_loss(distance_m: f64, f_c: f64) -> Result<LinkGain, ChannelError> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(ChannelError::Distance(distance_m));
    }
    let denom = 4.0 * PI * f_c * distance_m;
    Ok(LinkGain { kappa: SPEED_OF_LIGHT * SPEED_OF_LIGHT / (denom * denom), distance_m })
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Worst-device receive SNR, `min_i P_i kappa_i / sigma2`.
pub fn snr_min(powers: &[f64], gains: &[LinkGain], sigma2: f64) -> f64 {
    powers.iter().zip(gains).map(|(p, g)| p * g.kappa / sigma2).fold(f64::INFINITY, f64::min)
}

/// Small-scale fading distribution (zero mean, unit variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FadingModel {
    /// `CN(0, 1)`: Rayleigh magnitude, uniform phase.
    #[default]
    Rayleigh,
    /// `h = 1` on every subcarrier.
    Unit,
}

impl FadingModel {
    pub fn sample(self, rng: &mut RngStream) -> Complex64 {
        match self {
            FadingModel::Rayleigh => {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
            }
            FadingModel::Unit => Complex64::new(1.0, 0.0),
        }
    }

    pub fn draw(self, d: usize, rng: &mut RngStream) -> Vec<Complex64> {
        (0..d).map(|_| self.sample(rng)).collect()
    }
}

/// `CN(0, sigma2)` samples.
pub fn draw_noise(d: usize, sigma2: f64, rng: &mut RngStream) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); d];
    add_noise(&mut out, sigma2, rng);
    out
}

fn add_noise(y: &mut [Complex64], sigma2: f64, rng: &mut RngStream) {
    if sigma2 == 0.0 {
        return;
    }
    let s = (sigma2 / 2.0).sqrt();
    for v in y {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(re * s, im * s);
    }
}

/// One round's channel realization for the transmitting devices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRound {
    pub gains: Vec<LinkGain>,
    /// `h[i][j]`: device `i`, subcarrier `j`.
    pub h: Vec<Vec<Complex64>>,
    pub sigma2: f64,
    pub rho: f64,
}

/// Mean power per subcarrier, `(1/d) ||x||^2`.
pub fn average_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn average_power_complex(x: &[Complex64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

#[inline]
fn amplitude(g: f64, eta: f64, rho: f64, kappa: f64) -> f64 {
    if g == 0.0 {
        return 0.0;
    }
    (rho * g / (kappa * eta)).sqrt()
}

/// Non-coherent transmit amplitudes `x_j = sqrt(rho g_j / (kappa eta))`.
pub fn transmit_signal(g: &EncodedVector, eta: f64, rho: f64, gain: LinkGain) -> Result<Vec<f64>, ChannelError> {
    if !(rho > 0.0) {
        return Err(ChannelError::Rho(rho));
    }
    g.0.iter()
        .enumerate()
        .map(|(index, &v)| {
            if v < 0.0 {
                Err(ChannelError::NegativePayload { index, value: v })
            } else {
                Ok(amplitude(v, eta, rho, gain.kappa))
            }
        })
        .collect()
}

fn transmit_power(g: &EncodedVector, eta: f64, rho: f64, gain: LinkGain) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.0.iter().map(|&v| amplitude(v, eta, rho, gain.kappa)).map(|x| x * x).sum::<f64>() / g.len() as f64
}

/// Shrinks `rho` until the floating-point power of every device is within
/// its budget. The closed-form choice meets the budget with equality for the
/// binding device, which rounding can push one ulp over.
pub(crate) fn enforce_budget(mut rho: f64, powers: &[f64], measure: impl Fn(usize, f64) -> f64) -> f64 {
    for _ in 0..64 {
        let worst = powers
            .iter()
            .enumerate()
            .map(|(i, &p)| measure(i, rho) / p)
            .fold(0.0, f64::max);
        if worst <= 1.0 {
            return rho;
        }
        rho *= (1.0 / worst) * (1.0 - 4.0 * f64::EPSILON);
    }
    rho
}

/// Common power scale for the non-coherent uplink: the largest `rho` such
/// that every active device meets `(1/d)||x_i||^2 <= P_i`, i.e.
/// `min_i P_i kappa_i eta d / sum_j g_ij`. Devices with `g = 0` impose no
/// constraint; if none remain the result is `rho_cap`.
pub fn select_rho(encoded: &[EncodedVector], gains: &[LinkGain], powers: &[f64], eta: f64, d: usize, rho_cap: f64) -> f64 {
    let rho = encoded
        .iter()
        .zip(gains)
        .zip(powers)
        .filter_map(|((g, gain), &p)| {
            let total = g.total();
            (total > 0.0).then(|| p * gain.kappa * eta * d as f64 / total)
        })
        .fold(f64::INFINITY, f64::min);
    if !rho.is_finite() {
        return rho_cap;
    }
    enforce_budget(rho.min(rho_cap), powers, |i, r| transmit_power(&encoded[i], eta, r, gains[i]))
}

/// Adds `sum_i h_ij sqrt(kappa_i) x_ij` into `y`.
pub fn superpose_into<T>(y: &mut [Complex64], x_set: &[T], round: &ChannelRound) -> Result<(), ChannelError>
where
    T: AsRef<[f64]>,
{
    check_layout(y.len(), x_set.len(), round)?;
    for ((x, h), gain) in x_set.iter().zip(&round.h).zip(&round.gains) {
        let x = x.as_ref();
        if x.len() != y.len() || h.len() != y.len() {
            return Err(ChannelError::Layout(format!("vector length {} / {} vs {}", x.len(), h.len(), y.len())));
        }
        let sk = gain.kappa.sqrt();
        for ((yj, &xj), &hj) in y.iter_mut().zip(x).zip(h) {
            *yj += hj * (sk * xj);
        }
    }
    Ok(())
}

fn check_layout(d: usize, devices: usize, round: &ChannelRound) -> Result<(), ChannelError> {
    if devices != round.h.len() || devices != round.gains.len() {
        return Err(ChannelError::Layout(format!(
            "{devices} signals, {} fading rows, {} gains (d = {d})",
            round.h.len(),
            round.gains.len()
        )));
    }
    Ok(())
}

/// Received OFDM symbols for real transmit amplitudes, noise drawn from `rng`.
pub fn superpose<T: AsRef<[f64]>>(x_set: &[T], d: usize, round: &ChannelRound, rng: &mut RngStream) -> Result<Vec<Complex64>, ChannelError> {
    let mut y = vec![Complex64::new(0.0, 0.0); d];
    superpose_into(&mut y, x_set, round)?;
    add_noise(&mut y, round.sigma2, rng);
    Ok(y)
}

/// Received symbols for complex (coherently precoded) transmit signals.
pub fn superpose_complex(x_set: &[Vec<Complex64>], d: usize, round: &ChannelRound, rng: &mut RngStream) -> Result<Vec<Complex64>, ChannelError> {
    check_layout(d, x_set.len(), round)?;
    let mut y = vec![Complex64::new(0.0, 0.0); d];
    for ((x, h), gain) in x_set.iter().zip(&round.h).zip(&round.gains) {
        if x.len() != d || h.len() != d {
            return Err(ChannelError::Layout(format!("vector length {} / {} vs {d}", x.len(), h.len())));
        }
        let sk = gain.kappa.sqrt();
        for ((yj, xj), hj) in y.iter_mut().zip(x).zip(h) {
            *yj += hj * (xj * sk);
        }
    }
    add_noise(&mut y, round.sigma2, rng);
    Ok(y)
}

/// Square-law statistic, `r_j = (|y_j|^2 - sigma2) / rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedStats {
    pub r: Vec<f64>,
}

pub fn square_law(y: &[Complex64], sigma2: f64, rho: f64) -> Result<ReceivedStats, ChannelError> {
    if !(rho > 0.0) {
        return Err(ChannelError::Rho(rho));
    }
    Ok(ReceivedStats { r: y.iter().map(|v| (v.norm_sqr() - sigma2) / rho).collect() })
}

/// One device's contribution to a non-coherent uplink slot.
#[derive(Debug, Clone, Copy)]
pub struct Transmission<'a> {
    pub device: usize,
    pub amplitudes: &'a [f64],
}

/// A multiple-access channel as seen by a receiver without channel state:
/// it hands back received symbols and nothing about the fading.
pub trait NonCoherentUplink {
    fn noise_variance(&self) -> f64;
    fn receive(&mut self, round: usize, d: usize, tx: &[Transmission<'_>]) -> Result<Vec<Complex64>, ChannelError>;
}

/// Simulated uplink. Fading for device `i` in round `t` is drawn from the
/// stream `(seed, scope, "fading", t, i)` and noise from
/// `(seed, scope, "noise", t)`; both are discarded after superposition.
#[derive(Debug, Clone)]
pub struct FadingUplink<'a> {
    pub gains: &'a [LinkGain],
    pub sigma2: f64,
    pub fading: FadingModel,
    pub seed: u64,
    pub scope: &'a str,
    pub exec: Exec,
}

impl NonCoherentUplink for FadingUplink<'_> {
    fn noise_variance(&self) -> f64 {
        self.sigma2
    }

    fn receive(&mut self, round: usize, d: usize, tx: &[Transmission<'_>]) -> Result<Vec<Complex64>, ChannelError> {
        let h = self.exec.map(tx, |t| {
            let mut rng = derive_stream(self.seed, &labels![self.scope, "fading", round, t.device]);
            self.fading.draw(d, &mut rng)
        });
        let gains = tx.iter().map(|t| self.gains[t.device]).collect();
        let channel = ChannelRound { gains, h, sigma2: self.sigma2, rho: 1.0 };
        let x: Vec<&[f64]> = tx.iter().map(|t| t.amplitudes).collect();
        let mut noise_rng = derive_stream(self.seed, &labels![self.scope, "noise", round]);
        superpose(&x, d, &channel, &mut noise_rng)
    }
}

/// Per-subcarrier sample mean and standard error of the square-law statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorStats {
    pub draws: usize,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

const MC_CHUNK: usize = 4096;

/// Monte Carlo over fading and noise with fixed payloads `g_set`. Draws are
/// split into fixed-size chunks with their own streams, so the result does
/// not depend on how chunks are scheduled.
#[allow(clippy::too_many_arguments)]
pub fn detector_monte_carlo(
    g_set: &[EncodedVector],
    gains: &[LinkGain],
    eta: f64,
    rho: f64,
    sigma2: f64,
    fading: FadingModel,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<DetectorStats, ChannelError> {
    let d = g_set.first().map_or(0, |g| g.len());
    if g_set.len() != gains.len() {
        return Err(ChannelError::Layout(format!("{} payloads, {} gains", g_set.len(), gains.len())));
    }
    let x: Vec<Vec<f64>> = g_set
        .iter()
        .zip(gains)
        .map(|(g, &gain)| transmit_signal(g, eta, rho, gain))
        .collect::<Result<_, _>>()?;
    let chunks = draws.div_ceil(MC_CHUNK);
    let partials = exec.map_range(chunks, |c| -> Result<Moments, ChannelError> {
        let count = MC_CHUNK.min(draws - c * MC_CHUNK);
        let mut rng = derive_stream(seed, &labels!["detector-mc", c]);
        let mut round = ChannelRound {
            gains: gains.to_vec(),
            h: vec![vec![Complex64::new(0.0, 0.0); d]; gains.len()],
            sigma2,
            rho,
        };
        let mut y = vec![Complex64::new(0.0, 0.0); d];
        let mut acc = Moments::new(d);
        for _ in 0..count {
            for row in round.h.iter_mut() {
                for h in row.iter_mut() {
                    *h = fading.sample(&mut rng);
                }
            }
            y.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            superpose_into(&mut y, &x, &round)?;
            add_noise(&mut y, sigma2, &mut rng);
            acc.push(y.iter().map(|v| (v.norm_sqr() - sigma2) / rho));
        }
        Ok(acc)
    });
    let mut total = Moments::new(d);
    for p in partials {
        total.merge(&p?);
    }
    let n = total.count as f64;
    Ok(DetectorStats {
        draws: total.count,
        mean: total.mean.clone(),
        std_err: total.m2.iter().map(|m2| (m2 / (n - 1.0)).sqrt() / n.sqrt()).collect(),
    })
}

/// Streaming mean / sum-of-squared-deviations per coordinate.
#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments { count: 0, mean: vec![0.0; d], m2: vec![0.0; d] }
    }

    fn push(&mut self, sample: impl Iterator<Item = f64>) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gain(kappa: f64) -> LinkGain {
        LinkGain { kappa, distance_m: 1.0 }
    }

    #[test]
    fn path_loss_at_100m() {
        let g = path_loss(100.0, 2.4e9).unwrap();
        assert!((g.kappa - 9.8806e-9).abs() < 1e-12, "{}", g.kappa);
        let far = path_loss(200.0, 2.4e9).unwrap();
        assert!((g.kappa / far.kappa - 4.0).abs() < 1e-12);
        assert!(path_loss(0.0, 2.4e9).is_err());
        assert!(path_loss(-3.0, 2.4e9).is_err());
    }

    #[test]
    fn dbm_conversion() {
        assert!((dbm_to_watts(-123.0) - 5.0119e-16).abs() < 1e-19);
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn snr_min_of_paper_constants() {
        let g = path_loss(100.0, 2.4e9).unwrap();
        let snr = snr_min(&[2e-8], &[g], dbm_to_watts(-123.0));
        assert!((snr - 0.394).abs() < 1e-3, "{snr}");
        assert!((10.0 * snr.log10() + 4.04).abs() < 0.01);
        let two = snr_min(&[2e-8, 2e-8], &[g, g], dbm_to_watts(-123.0));
        assert_eq!(snr, two);
        let half = snr_min(&[2e-8], &[g], 2.0 * dbm_to_watts(-123.0));
        assert!((half - snr / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rho_hand_example() {
        let g = [EncodedVector(vec![1.0, 1.0]), EncodedVector(vec![4.0, 4.0])];
        let rho = select_rho(&g, &[gain(1.0), gain(4.0)], &[1.0, 1.0], 1.0, 2, 1e12);
        assert_eq!(rho, 1.0);
        let half = select_rho(&g, &[gain(1.0), gain(4.0)], &[0.5, 0.5], 1.0, 2, 1e12);
        // sqrt(0.5)^2 rounds above 0.5, so the scale is trimmed by a few ulps
        assert!(half <= 0.5 && (half - 0.5).abs() < 1e-15, "{half}");
    }

    #[test]
    fn silent_devices_impose_no_constraint() {
        let g = [EncodedVector(vec![0.0, 0.0]), EncodedVector(vec![4.0, 4.0])];
        let rho = select_rho(&g, &[gain(1e-9), gain(4.0)], &[1.0, 1.0], 1.0, 2, 1e12);
        assert_eq!(rho, 1.0);
        let none = [EncodedVector(vec![0.0, 0.0])];
        assert_eq!(select_rho(&none, &[gain(1.0)], &[1.0], 1.0, 2, 7.5), 7.5);
    }

    #[test]
    fn transmit_signal_examples() {
        let x = transmit_signal(&EncodedVector(vec![4.0, 0.0]), 1.0, 1.0, gain(4.0)).unwrap();
        assert_eq!(x, vec![1.0, 0.0]);
        let x4 = transmit_signal(&EncodedVector(vec![4.0, 9.0]), 1.0, 4.0, gain(4.0)).unwrap();
        let x1 = transmit_signal(&EncodedVector(vec![4.0, 9.0]), 1.0, 1.0, gain(4.0)).unwrap();
        assert_eq!(x4, x1.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        assert!(transmit_signal(&EncodedVector(vec![-1.0]), 1.0, 1.0, gain(1.0)).is_err());
        assert!(transmit_signal(&EncodedVector(vec![1.0]), 1.0, 0.0, gain(1.0)).is_err());
    }

    #[test]
    fn square_law_example() {
        let r = square_law(&[Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)], 1.0, 2.0).unwrap();
        assert_eq!(r.r, vec![1.5, -0.5]);
        assert_eq!(square_law(&[Complex64::new(0.0, 0.0)], 0.0, 1.0).unwrap().r, vec![0.0]);
    }

    #[test]
    fn superpose_two_device_hand_example() {
        let round = ChannelRound {
            gains: vec![gain(4.0), gain(1.0)],
            h: vec![
                vec![Complex64::new(1.0, 1.0), Complex64::new(0.0, -1.0)],
                vec![Complex64::new(0.5, 0.0), Complex64::new(2.0, 0.0)],
            ],
            sigma2: 0.0,
            rho: 1.0,
        };
        let x = vec![vec![1.0, 3.0], vec![2.0, 0.5]];
        let mut rng = derive_stream(0, &labels!["unused"]);
        let y = superpose(&x, 2, &round, &mut rng).unwrap();
        // y0 = (1+i)*2*1 + 0.5*1*2 = 3 + 2i ; y1 = (-i)*2*3 + 2*1*0.5 = 1 - 6i
        assert_eq!(y, vec![Complex64::new(3.0, 2.0), Complex64::new(1.0, -6.0)]);
        let empty: Vec<Vec<f64>> = Vec::new();
        let none = ChannelRound { gains: vec![], h: vec![], sigma2: 0.0, rho: 1.0 };
        assert_eq!(superpose(&empty, 3, &none, &mut rng).unwrap(), vec![Complex64::new(0.0, 0.0); 3]);
    }

    #[test]
    fn unit_fading_single_device_recovers_amplitudes() {
        let g = EncodedVector(vec![0.25, 1.0, 0.0]);
        let (eta, rho, kappa) = (0.5, 3.0, 1e-8);
        let x = transmit_signal(&g, eta, rho, gain(kappa)).unwrap();
        let round = ChannelRound { gains: vec![gain(kappa)], h: vec![vec![Complex64::new(1.0, 0.0); 3]], sigma2: 0.0, rho };
        let y = superpose(&[x], 3, &round, &mut derive_stream(0, &labels!["n"])).unwrap();
        for (yj, gj) in y.iter().zip(&g.0) {
            assert!((yj.re - (rho * gj / eta).sqrt()).abs() < 1e-12);
            assert_eq!(yj.im, 0.0);
        }
    }

    #[test]
    fn rho_keeps_every_device_within_budget() {
        let mut rng = derive_stream(5, &labels!["budget"]);
        for _ in 0..200 {
            let d = rng.random_range(1..50);
            let k = rng.random_range(1..5);
            let g: Vec<EncodedVector> = (0..k).map(|_| EncodedVector((0..d).map(|_| rng.random::<f64>() * 1e-3).collect())).collect();
            let gains: Vec<LinkGain> = (0..k).map(|_| gain(rng.random::<f64>() * 1e-6 + 1e-10)).collect();
            let powers: Vec<f64> = (0..k).map(|_| 2e-8 * (0.5 + rng.random::<f64>())).collect();
            let eta = 0.05;
            let rho = select_rho(&g, &gains, &powers, eta, d, 1e12);
            let mut binding = 0.0f64;
            for i in 0..k {
                let x = transmit_signal(&g[i], eta, rho, gains[i]).unwrap();
                let p = average_power(&x);
                assert!(p <= powers[i], "{p} > {}", powers[i]);
                binding = binding.max(p / powers[i]);
            }
            assert!(binding > 1.0 - 1e-12);
        }
    }

    #[test]
    fn rayleigh_fading_has_unit_power() {
        let mut rng = derive_stream(1, &labels!["fading"]);
        let h = FadingModel::Rayleigh.draw(1_000_000, &mut rng);
        let p = h.iter().map(|v| v.norm_sqr()).sum::<f64>() / h.len() as f64;
        assert!((p - 1.0).abs() < 0.01, "{p}");
        let m = h.iter().sum::<Complex64>() / h.len() as f64;
        assert!(m.norm() < 0.01);
    }

    #[test]
    fn monte_carlo_chunks_are_schedule_independent() {
        let g = vec![EncodedVector(vec![0.1, 0.0, 0.3]), EncodedVector(vec![0.2, 0.5, 0.0])];
        let gains = [gain(1e-8), gain(4e-8)];
        let run = |exec| detector_monte_carlo(&g, &gains, 0.1, 1e-7, 1e-16, FadingModel::Rayleigh, 10_000, 3, exec).unwrap();
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }
}
