//! Experiment configuration: TOML with units spelled out in field names.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::channel::{dbm_to_watts, FadingModel};
use crate::data::PartitionMode;
use crate::exec::Exec;
use crate::schemes::{active_count, SchemeKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("invalid `r`: r * n = {r} * {n} is not a positive integer")]
    Participation { r: f64, n: usize },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

/// Transmit budget: one value shared by all devices, or one per device.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PowerSpec {
    Shared(f64),
    PerDevice(Vec<f64>),
}

/// Where the train/test splits come from.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files (optionally gzipped). Relative paths resolve against the
    /// config file's directory.
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Blobs { dims: usize, train_size: usize, test_size: usize, separation: f64 },
    QuadraticRegression { dims: usize, train_size: usize, test_size: usize, noise: f64 },
}

/// Problem constants for the `bound` subcommand.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct BoundSection {
    pub L: f64,
    pub G2: f64,
    pub sigma_l2: f64,
    pub sigma_g2: f64,
    pub f_gap: f64,
    /// Defaults to the first trial's worst-device SNR.
    pub snr_min: Option<f64>,
    /// Defaults to the model's parameter count.
    pub d: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct RawConfig {
    schemes: Option<Vec<SchemeKind>>,
    n: Option<usize>,
    T: Option<usize>,
    Q: Option<usize>,
    r: Option<f64>,
    p: Option<f64>,
    eta: Option<f64>,
    batch_size: Option<usize>,
    P_watts: Option<PowerSpec>,
    sigma2_dbm: Option<f64>,
    f_c_hz: Option<f64>,
    distance_seed: Option<u64>,
    trials: Option<usize>,
    dataset: Option<DatasetSpec>,
    partition_mode: Option<PartitionMode>,
    eval_every: Option<usize>,
    master_seed: Option<u64>,
    output_path: Option<PathBuf>,
    rho_cap: Option<f64>,
    gamma_th: Option<f64>,
    subset_fraction: Option<f64>,
    hidden: Option<usize>,
    fading: Option<FadingModel>,
    parallel: Option<bool>,
    record_wall_ms: Option<bool>,
    bound: Option<BoundSection>,
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq)]
#[allow(non_snake_case)]
pub struct ExperimentConfig {
    pub schemes: Vec<SchemeKind>,
    pub n: usize,
    pub T: usize,
    pub Q: usize,
    pub r: f64,
    pub p: f64,
    pub eta: f64,
    pub batch_size: usize,
    /// One budget per device, Watts.
    pub P_watts: Vec<f64>,
    pub sigma2_dbm: f64,
    /// Noise variance in Watts, converted from `sigma2_dbm`.
    pub sigma2_watts: f64,
    pub f_c_hz: f64,
    pub distance_seed: u64,
    pub trials: usize,
    pub dataset: DatasetSpec,
    pub partition_mode: PartitionMode,
    pub eval_every: usize,
    pub master_seed: u64,
    pub output_path: Option<PathBuf>,
    pub rho_cap: f64,
    pub gamma_th: f64,
    pub subset_fraction: f64,
    pub hidden: usize,
    pub fading: FadingModel,
    pub parallel: bool,
    pub record_wall_ms: bool,
    pub bound: Option<BoundSection>,
}

pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_RHO_CAP: f64 = 1e12;
pub const DEFAULT_HIDDEN: usize = 100;

/// Truncation threshold giving a 10% outage under unit-power Rayleigh
/// fading: `P(|h| < g) = 1 - exp(-g^2) = 0.1`.
pub fn default_gamma_th() -> f64 {
    (-(0.9f64).ln()).sqrt()
}

impl ExperimentConfig {
    pub fn exec(&self) -> Exec {
        Exec::from_flag(self.parallel)
    }

    /// Rounds at which a metrics row is emitted: multiples of `eval_every`
    /// up to `T`, plus `T` itself.
    pub fn eval_rounds(&self) -> Vec<usize> {
        let mut rounds: Vec<usize> = (0..=self.T).step_by(self.eval_every).collect();
        if rounds.last() != Some(&self.T) {
            rounds.push(self.T);
        }
        rounds
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.dataset, DatasetSpec::QuadraticRegression { .. })
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config_str(&text, base)
}

/// Parses TOML text; relative dataset paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    validate(raw, base)
}

fn require<T>(v: Option<T>, field: &'static str) -> Result<T, ConfigError> {
    v.ok_or(ConfigError::Missing(field))
}

fn at_least_one(v: usize, field: &'static str) -> Result<usize, ConfigError> {
    if v == 0 {
        return Err(invalid(field, "must be >= 1"));
    }
    Ok(v)
}

fn positive(v: f64, field: &'static str) -> Result<f64, ConfigError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(field, format!("must be positive and finite, got {v}")));
    }
    Ok(v)
}

fn validate(raw: RawConfig, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let schemes = require(raw.schemes, "schemes")?;
    if schemes.is_empty() {
        return Err(invalid("schemes", "list is empty"));
    }
    let n = at_least_one(require(raw.n, "n")?, "n")?;
    let r = require(raw.r, "r")?;
    if active_count(n, r).is_err() {
        return Err(ConfigError::Participation { r, n });
    }
    let t = at_least_one(require(raw.T, "T")?, "T")?;
    let q = at_least_one(require(raw.Q, "Q")?, "Q")?;
    let p = raw.p.unwrap_or(0.5);
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid("p", format!("must lie in (0, 1), got {p}")));
    }
    let eta = positive(raw.eta.unwrap_or(DEFAULT_ETA), "eta")?;
    let batch_size = at_least_one(require(raw.batch_size, "batch_size")?, "batch_size")?;
    let powers = match require(raw.P_watts, "P_watts")? {
        PowerSpec::Shared(p) => vec![p; n],
        PowerSpec::PerDevice(v) if v.len() == n => v,
        PowerSpec::PerDevice(v) => return Err(invalid("P_watts", format!("{} entries for {n} devices", v.len()))),
    };
    for &p in &powers {
        positive(p, "P_watts")?;
    }
    let sigma2_dbm = require(raw.sigma2_dbm, "sigma2_dbm")?;
    if !sigma2_dbm.is_finite() {
        return Err(invalid("sigma2_dbm", "must be finite"));
    }
    let f_c_hz = positive(require(raw.f_c_hz, "f_c_hz")?, "f_c_hz")?;
    let trials = at_least_one(require(raw.trials, "trials")?, "trials")?;
    let eval_every = at_least_one(raw.eval_every.unwrap_or(1), "eval_every")?;
    let rho_cap = positive(raw.rho_cap.unwrap_or(DEFAULT_RHO_CAP), "rho_cap")?;
    let gamma_th = raw.gamma_th.unwrap_or_else(default_gamma_th);
    if !(gamma_th >= 0.0) {
        return Err(invalid("gamma_th", format!("must be non-negative, got {gamma_th}")));
    }
    let subset_fraction = raw.subset_fraction.unwrap_or(1.0);
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(invalid("subset_fraction", format!("must lie in (0, 1], got {subset_fraction}")));
    }
    let hidden = at_least_one(raw.hidden.unwrap_or(DEFAULT_HIDDEN), "hidden")?;
    let dataset = match require(raw.dataset, "dataset")? {
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => DatasetSpec::Idx {
            train_images: base.join(train_images),
            train_labels: base.join(train_labels),
            test_images: base.join(test_images),
            test_labels: base.join(test_labels),
        },
        s @ (DatasetSpec::Blobs { dims, train_size, test_size, .. }
        | DatasetSpec::QuadraticRegression { dims, train_size, test_size, .. }) => {
            at_least_one(dims, "dataset.dims")?;
            if train_size < 2 || test_size < 2 {
                return Err(invalid("dataset", "train_size and test_size must be >= 2"));
            }
            s
        }
    };
    if let Some(b) = &raw.bound {
        for (field, v) in [("bound.L", b.L), ("bound.G2", b.G2), ("bound.sigma_l2", b.sigma_l2), ("bound.sigma_g2", b.sigma_g2), ("bound.f_gap", b.f_gap)] {
            positive(v, field)?;
        }
    }
    Ok(ExperimentConfig {
        schemes,
        n,
        T: t,
        Q: q,
        r,
        p,
        eta,
        batch_size,
        P_watts: powers,
        sigma2_dbm,
        sigma2_watts: dbm_to_watts(sigma2_dbm),
        f_c_hz,
        distance_seed: require(raw.distance_seed, "distance_seed")?,
        trials,
        dataset,
        partition_mode: raw.partition_mode.unwrap_or(PartitionMode::Iid),
        eval_every,
        master_seed: require(raw.master_seed, "master_seed")?,
        output_path: raw.output_path,
        rho_cap,
        gamma_th,
        subset_fraction,
        hidden,
        fading: raw.fading.unwrap_or_default(),
        parallel: raw.parallel.unwrap_or(true),
        record_wall_ms: raw.record_wall_ms.unwrap_or(false),
        bound: raw.bound,
    })
}
