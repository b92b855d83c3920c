//! Trial loops: data loading, per-trial setup shared by all schemes, round
//! execution and evaluation.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;

use super::config::{ConfigError, DatasetSpec, ExperimentConfig};
use super::metrics::{evaluate, MetricsRecord};
use super::HarnessError;
use crate::bound::{bound_terms, BoundBreakdown, BoundInputs};
use crate::channel::{path_loss, snr_min, LinkGain};
use crate::data::{load_idx, partition, synth_dataset_with_truth, Dataset, DevicePartition, Split, SynthKind, NUM_CLASSES};
use crate::labels;
use crate::model::{Batch, Mlp, MlpShape, Objective, ParamVector, QuadraticRegression};
use crate::rng::{derive_seed, derive_stream};
use crate::schemes::{run_round, Federation, RoundState, SchemeError, SchemeKind, SchemeParams};

/// Samples in the fixed batch used for `train_loss` and `grad_norm_sq`.
pub const PROBE_SIZE: usize = 1024;

/// Train/test splits and the model they are fitted with.
pub struct Environment {
    pub train: Dataset,
    pub test: Dataset,
    pub objective: Box<dyn Objective + Send>,
}

pub fn load_environment(cfg: &ExperimentConfig) -> Result<Environment, HarnessError> {
    let seed = cfg.master_seed;
    let (train, test) = match &cfg.dataset {
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
            (load_idx(train_images, train_labels, Split::Train)?, load_idx(test_images, test_labels, Split::Test)?)
        }
        DatasetSpec::Blobs { dims, train_size, test_size, separation } => {
            synth_pair(SynthKind::Blobs { separation: *separation }, *dims, *train_size, *test_size, seed)?
        }
        DatasetSpec::QuadraticRegression { dims, train_size, test_size, noise } => {
            synth_pair(SynthKind::QuadraticRegression { noise: *noise }, *dims, *train_size, *test_size, seed)?
        }
    };
    let train = train.sample_fraction(cfg.subset_fraction, &mut derive_stream(seed, &labels!["subset", "train"]));
    let test = test.sample_fraction(cfg.subset_fraction, &mut derive_stream(seed, &labels!["subset", "test"]));
    let objective: Box<dyn Objective + Send> = if cfg.is_regression() {
        Box::new(QuadraticRegression { inputs: train.dims() })
    } else {
        Box::new(Mlp::new(MlpShape { inputs: train.dims(), hidden: cfg.hidden, classes: NUM_CLASSES }))
    };
    Ok(Environment { train, test, objective })
}

fn synth_pair(kind: SynthKind, dims: usize, train: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset), HarnessError> {
    let truth = derive_stream(seed, &labels!["dataset", "truth"]);
    let a = synth_dataset_with_truth(kind, dims, train, Split::Train, &mut truth.clone(), &mut derive_stream(seed, &labels!["dataset", "train"]))?;
    let b = synth_dataset_with_truth(kind, dims, test, Split::Test, &mut truth.clone(), &mut derive_stream(seed, &labels!["dataset", "test"]))?;
    Ok((a, b))
}

/// Everything shared by the schemes of one trial.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub trial: usize,
    pub trial_seed: u64,
    pub distances: Vec<f64>,
    pub gains: Vec<LinkGain>,
    pub partitions: Vec<DevicePartition>,
    pub theta0: ParamVector,
    pub probe: Batch,
    pub snr_min: f64,
}

pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    derive_seed(master_seed, &labels!["trial", trial])
}

/// Link distances in metres, uniform on (0, 100].
pub fn draw_distances(distance_seed: u64, trial: usize, n: usize) -> Vec<f64> {
    let mut rng = derive_stream(distance_seed, &labels!["distance", trial]);
    (0..n).map(|_| 100.0 * (1.0 - rng.random::<f64>())).collect()
}

pub fn trial_setup(cfg: &ExperimentConfig, env: &Environment, trial: usize) -> Result<TrialSetup, HarnessError> {
    let seed = trial_seed(cfg.master_seed, trial);
    let distances = draw_distances(cfg.distance_seed, trial, cfg.n);
    let gains = distances.iter().map(|&r| path_loss(r, cfg.f_c_hz)).collect::<Result<Vec<_>, _>>()?;
    let partitions = partition(&env.train, cfg.n, cfg.partition_mode, &mut derive_stream(seed, &labels!["partition"]))?;
    let theta0 = env.objective.init(&mut derive_stream(seed, &labels!["init"]));
    let probe_size = PROBE_SIZE.min(env.train.len());
    let mut idx = index::sample(&mut derive_stream(seed, &labels!["probe"]), env.train.len(), probe_size).into_vec();
    idx.sort_unstable();
    let snr = snr_min(&cfg.P_watts, &gains, cfg.sigma2_watts);
    Ok(TrialSetup { trial, trial_seed: seed, distances, gains, partitions, theta0, probe: env.train.batch(&idx), snr_min: snr })
}

pub fn scheme_params(cfg: &ExperimentConfig) -> SchemeParams {
    SchemeParams {
        n: cfg.n,
        r: cfg.r,
        local_steps: cfg.Q,
        eta: cfg.eta,
        batch_size: cfg.batch_size,
        p: cfg.p,
        powers: cfg.P_watts.clone(),
        sigma2: cfg.sigma2_watts,
        fading: cfg.fading,
        rho_cap: cfg.rho_cap,
        gamma_th: cfg.gamma_th,
        exec: cfg.exec(),
    }
}

/// Records and audit counters of one scheme in one trial.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    /// Transmitted vectors checked against their power budget.
    pub power_checks: usize,
    pub power_violations: usize,
    /// Largest observed `(1/d)||x||^2 / P`.
    pub max_power_ratio: f64,
    /// Rounds in which some device's batch had to be drawn with replacement.
    pub replacement_rounds: usize,
    pub diverged_at: Option<usize>,
}

impl RunOutput {
    fn absorb(&mut self, other: RunOutput) {
        self.records.extend(other.records);
        self.power_checks += other.power_checks;
        self.power_violations += other.power_violations;
        self.max_power_ratio = self.max_power_ratio.max(other.max_power_ratio);
        self.replacement_rounds += other.replacement_rounds;
    }
}

fn metrics_row(
    kind: SchemeKind,
    env: &Environment,
    setup: &TrialSetup,
    round: usize,
    theta: &[f64],
    rho: f64,
    wall_ms: f64,
) -> Result<MetricsRecord, HarnessError> {
    let mut grad = vec![0.0; theta.len()];
    let train_loss = env.objective.loss_grad(theta, setup.probe.view(), &mut grad)?;
    let accuracy = evaluate(env.objective.as_ref(), theta, &env.test)?.accuracy.unwrap_or(0.0);
    Ok(MetricsRecord {
        scheme: kind.name().to_string(),
        trial: setup.trial,
        round,
        train_loss,
        test_accuracy: accuracy,
        grad_norm_sq: grad.iter().map(|g| g * g).sum(),
        rho,
        snr_min: setup.snr_min,
        wall_ms,
    })
}

/// Runs `T` rounds of one scheme and evaluates at the configured rounds.
/// Divergence ends the run with a flagged row (NaN loss and gradient).
pub fn run_scheme_trial(cfg: &ExperimentConfig, env: &Environment, setup: &TrialSetup, kind: SchemeKind) -> Result<RunOutput, HarnessError> {
    let params = scheme_params(cfg);
    let fed = Federation {
        objective: env.objective.as_ref(),
        data: &env.train,
        partitions: &setup.partitions,
        gains: &setup.gains,
    };
    let eval: BTreeSet<usize> = cfg.eval_rounds().into_iter().collect();
    let start = Instant::now();
    let wall = || if cfg.record_wall_ms { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let mut out = RunOutput::default();
    let mut state = RoundState::new(setup.theta0.clone(), cfg.n);
    if eval.contains(&0) {
        out.records.push(metrics_row(kind, env, setup, 0, &state.theta, f64::NAN, wall())?);
    }
    for _ in 0..cfg.T {
        match run_round(kind, &state, &params, &fed, setup.trial_seed) {
            Ok((next, report)) => {
                for &(used, budget) in &report.power {
                    out.power_checks += 1;
                    out.max_power_ratio = out.max_power_ratio.max(used / budget);
                }
                out.power_violations += report.power_violations();
                out.replacement_rounds += usize::from(report.sampled_with_replacement);
                state = next;
                if eval.contains(&state.round) {
                    out.records.push(metrics_row(kind, env, setup, state.round, &state.theta, report.rho, wall())?);
                }
            }
            Err(SchemeError::Diverged { round }) => {
                log::warn!("{kind} diverged in trial {} at round {round}", setup.trial);
                out.records.push(MetricsRecord {
                    scheme: kind.name().to_string(),
                    trial: setup.trial,
                    round: round + 1,
                    train_loss: f64::NAN,
                    test_accuracy: 0.0,
                    grad_norm_sq: f64::NAN,
                    rho: f64::NAN,
                    snr_min: setup.snr_min,
                    wall_ms: wall(),
                });
                out.diverged_at = Some(round);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    log::info!("{kind} trial {} finished after {} rounds", setup.trial, state.round);
    Ok(out)
}

/// Every scheme in every trial, rows in (scheme, trial, round) order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let env = load_environment(cfg)?;
    run_experiment_in(cfg, &env)
}

pub fn run_experiment_in(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput, HarnessError> {
    let exec = cfg.exec();
    let setups = exec.map_range(cfg.trials, |t| trial_setup(cfg, env, t)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(SchemeKind, usize)> = cfg.schemes.iter().flat_map(|&k| (0..cfg.trials).map(move |t| (k, t))).collect();
    let results = exec.map(&jobs, |&(kind, t)| run_scheme_trial(cfg, env, &setups[t], kind));
    let mut total = RunOutput::default();
    for r in results {
        total.absorb(r?);
    }
    Ok(total)
}

/// Per-device view of the first trial's population.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub device: usize,
    pub samples: usize,
    pub labels: Vec<u8>,
    pub distance_m: f64,
    pub kappa: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub devices: Vec<DeviceReport>,
    pub train_size: usize,
    pub test_size: usize,
    pub snr_min: f64,
}

pub fn partition_report(cfg: &ExperimentConfig) -> Result<PartitionReport, HarnessError> {
    let env = load_environment(cfg)?;
    let setup = trial_setup(cfg, &env, 0)?;
    let devices = setup
        .partitions
        .iter()
        .zip(&setup.gains)
        .zip(&cfg.P_watts)
        .map(|((part, gain), p)| DeviceReport {
            device: part.device_id,
            samples: part.len(),
            labels: part.label_set(&env.train),
            distance_m: gain.distance_m,
            kappa: gain.kappa,
            snr_db: 10.0 * (p * gain.kappa / cfg.sigma2_watts).log10(),
        })
        .collect();
    Ok(PartitionReport { devices, train_size: env.train.len(), test_size: env.test.len(), snr_min: setup.snr_min })
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "train_samples={} test_samples={} snr_min={:.6e}", self.train_size, self.test_size, self.snr_min)?;
        writeln!(f, "device,samples,labels,distance_m,kappa,snr_db")?;
        for d in &self.devices {
            let labels: Vec<String> = d.labels.iter().map(u8::to_string).collect();
            writeln!(f, "{},{},{},{:.3},{:.6e},{:.3}", d.device, d.samples, labels.join(" "), d.distance_m, d.kappa, d.snr_db)?;
        }
        Ok(())
    }
}

/// Bound inputs from the `[bound]` section, defaulting `snr_min` to the
/// first trial's worst device and `d` to the model size.
pub fn bound_inputs(cfg: &ExperimentConfig) -> Result<BoundInputs, HarnessError> {
    let b = cfg.bound.as_ref().ok_or(ConfigError::Missing("bound"))?;
    let snr = match b.snr_min {
        Some(s) => s,
        None => {
            let gains = draw_distances(cfg.distance_seed, 0, cfg.n)
                .into_iter()
                .map(|r| path_loss(r, cfg.f_c_hz))
                .collect::<Result<Vec<_>, _>>()?;
            snr_min(&cfg.P_watts, &gains, cfg.sigma2_watts)
        }
    };
    let d = match b.d {
        Some(d) => d,
        None => load_environment(cfg)?.objective.dim(),
    };
    Ok(BoundInputs {
        L: b.L,
        G2: b.G2,
        sigma_l2: b.sigma_l2,
        sigma_g2: b.sigma_g2,
        Q: cfg.Q,
        T: cfg.T,
        n: cfg.n,
        eta: cfg.eta,
        r: cfg.r,
        p: cfg.p,
        snr_min: snr,
        d,
        f_gap: b.f_gap,
    })
}

pub fn bound_report(cfg: &ExperimentConfig) -> Result<(BoundInputs, BoundBreakdown), HarnessError> {
    let inputs = bound_inputs(cfg)?;
    Ok((inputs, bound_terms(&inputs)?))
}
