use ncairfl::channel::{ChannelError, FadingModel, LinkGain, NonCoherentUplink, Transmission};
use ncairfl::data::{partition, synth_dataset, Dataset, DevicePartition, PartitionMode, SynthKind};
use ncairfl::dither::{encode, gen_dither, update_memory, MemoryState};
use ncairfl::exec::Exec;
use ncairfl::labels;
use ncairfl::model::{local_update, BatchView, Mlp, MlpShape, ModelError, Objective, ParamVector, QuadraticRegression};
use ncairfl::rng::{derive_stream, RngStream};
use ncairfl::schemes::{
    ncairfl_update, run_round, run_round_ideal, run_round_ncairfl, run_round_trunc_ci, Federation, RoundState, SchemeKind,
    SchemeParams,
};
use num_complex::Complex64;

const SEED: u64 = 77;

fn params(n: usize, r: f64) -> SchemeParams {
    SchemeParams {
        n,
        r,
        local_steps: 2,
        eta: 0.1,
        batch_size: 8,
        p: 0.5,
        powers: vec![2e-8; n],
        sigma2: 5e-16,
        fading: FadingModel::Rayleigh,
        rho_cap: 1e12,
        gamma_th: 0.3246,
        exec: Exec::Sequential,
    }
}

struct World {
    data: Dataset,
    parts: Vec<DevicePartition>,
    gains: Vec<LinkGain>,
    mlp: Mlp,
    theta: ParamVector,
}

fn world(n: usize) -> World {
    let shape = MlpShape { inputs: 6, hidden: 5, classes: 10 };
    let data = synth_dataset(SynthKind::Blobs { separation: 4.0 }, 6, 40 * n, &mut derive_stream(1, &labels!["d"])).unwrap();
    let parts = partition(&data, n, PartitionMode::Iid, &mut derive_stream(1, &labels!["p"])).unwrap();
    let gains = (0..n).map(|i| LinkGain { kappa: 1e-8 * (1.0 + i as f64), distance_m: 50.0 }).collect();
    let mlp = Mlp::new(shape);
    let theta = mlp.init(&mut derive_stream(1, &labels!["init"]));
    World { data, parts, gains, mlp, theta }
}

impl World {
    fn fed(&self) -> Federation<'_> {
        Federation { objective: &self.mlp, data: &self.data, partitions: &self.parts, gains: &self.gains }
    }
}

#[test]
fn zero_step_size_freezes_ncairfl() {
    let w = world(5);
    let mut p = params(5, 0.4);
    p.eta = 0.0;
    let mut state = RoundState::new(w.theta.clone(), 5);
    for _ in 0..5 {
        state = run_round(SchemeKind::NCAirFL, &state, &p, &w.fed(), SEED).unwrap().0;
        assert_eq!(state.theta, w.theta);
        assert!(state.memories.iter().all(|m| m.0.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn ideal_single_device_single_step_is_sgd() {
    let w = world(1);
    let mut p = params(1, 1.0);
    p.local_steps = 1;
    let (next, report) = run_round_ideal(&RoundState::new(w.theta.clone(), 1), &p, &w.fed(), SEED).unwrap();
    assert_eq!(report.active, vec![0]);
    let u = local_update(&w.mlp, &w.theta, &w.data, &w.parts[0], 1, p.eta, p.batch_size, &mut derive_stream(SEED, &labels!["batch", 0usize, 0usize])).unwrap();
    let mut grad = vec![0.0; w.theta.len()];
    let mut rng = derive_stream(SEED, &labels!["batch", 0usize, 0usize]);
    let (batch, _) = ncairfl::data::sample_batch(&w.data, &w.parts[0], p.batch_size, &mut rng).unwrap();
    w.mlp.loss_grad(&w.theta, batch.view(), &mut grad).unwrap();
    for j in 0..w.theta.len() {
        assert_eq!(next.theta[j], w.theta[j] - u.delta[j]);
        assert!((next.theta[j] - (w.theta[j] - p.eta * grad[j])).abs() < 1e-15);
    }
}

#[test]
fn ideal_two_devices_match_hand_unrolled_average() {
    let w = world(2);
    let p = params(2, 1.0);
    let (next, _) = run_round_ideal(&RoundState::new(w.theta.clone(), 2), &p, &w.fed(), SEED).unwrap();
    let deltas: Vec<ParamVector> = (0..2usize)
        .map(|i| {
            let mut rng = derive_stream(SEED, &labels!["batch", 0usize, i]);
            local_update(&w.mlp, &w.theta, &w.data, &w.parts[i], p.local_steps, p.eta, p.batch_size, &mut rng).unwrap().delta
        })
        .collect();
    for j in 0..w.theta.len() {
        assert_eq!(next.theta[j], w.theta[j] - (0.0 + deltas[0][j] + deltas[1][j]) / 2.0);
    }
}

#[test]
fn identical_devices_track_single_device() {
    // full-batch steps on the same data: only the summation order differs
    let data = synth_dataset(SynthKind::QuadraticRegression { noise: 0.1 }, 4, 30, &mut derive_stream(3, &labels!["q"])).unwrap();
    let obj = QuadraticRegression { inputs: 4 };
    let all = DevicePartition { device_id: 0, sample_indices: (0..30).collect() };
    let mut p = params(3, 1.0);
    p.batch_size = 30;
    let run = |n: usize| {
        let parts = vec![all.clone(); n];
        let gains = vec![LinkGain { kappa: 1e-8, distance_m: 1.0 }; n];
        let fed = Federation { objective: &obj, data: &data, partitions: &parts, gains: &gains };
        let p = SchemeParams { n, powers: vec![2e-8; n], ..p.clone() };
        let mut s = RoundState::new(ParamVector::zeros(5), n);
        for _ in 0..20 {
            s = run_round_ideal(&s, &p, &fed, SEED).unwrap().0;
        }
        s.theta
    };
    let (one, three) = (run(1), run(3));
    for (a, b) in one.iter().zip(three.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn full_inversion_without_noise_matches_ideal() {
    let w = world(4);
    let mut p = params(4, 0.5);
    p.gamma_th = 0.0;
    p.sigma2 = 0.0;
    let s = RoundState::new(w.theta.clone(), 4);
    let (ideal, _) = run_round_ideal(&s, &p, &w.fed(), SEED).unwrap();
    for mem in [false, true] {
        let (ci, report) = run_round_trunc_ci(&s, &p, &w.fed(), SEED, mem).unwrap();
        assert_eq!(report.power_violations(), 0);
        for (a, b) in ci.theta.iter().zip(ideal.theta.iter()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert!(ci.memories.iter().all(|m| m.0.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn infinite_threshold_sends_nothing() {
    let w = world(3);
    let mut p = params(3, 1.0);
    p.gamma_th = f64::INFINITY;
    p.sigma2 = 0.0;
    let s = RoundState::new(w.theta.clone(), 3);
    let (ci, report) = run_round_trunc_ci(&s, &p, &w.fed(), SEED, false).unwrap();
    assert_eq!(ci.theta, w.theta);
    assert_eq!(report.rho, p.rho_cap);
    assert!(report.power.iter().all(|&(used, _)| used == 0.0));

    let (mem1, _) = run_round_trunc_ci(&s, &p, &w.fed(), SEED, true).unwrap();
    let (mem2, _) = run_round_trunc_ci(&mem1, &p, &w.fed(), SEED, true).unwrap();
    for i in 0..3 {
        let d0 = local_update(&w.mlp, &w.theta, &w.data, &w.parts[i], p.local_steps, p.eta, p.batch_size, &mut derive_stream(SEED, &labels!["batch", 0usize, i])).unwrap().delta;
        let d1 = local_update(&w.mlp, &w.theta, &w.data, &w.parts[i], p.local_steps, p.eta, p.batch_size, &mut derive_stream(SEED, &labels!["batch", 1usize, i])).unwrap().delta;
        assert_eq!(mem1.memories[i].0, d0.to_vec());
        let expect: Vec<f64> = d0.iter().zip(d1.iter()).map(|(a, b)| a + b).collect();
        assert_eq!(mem2.memories[i].0, expect);
    }

    // with noise the update is pure noise
    p.sigma2 = 5e-16;
    let (noisy, _) = run_round_trunc_ci(&s, &p, &w.fed(), SEED, false).unwrap();
    assert_ne!(noisy.theta, w.theta);
}

#[test]
fn straddling_fading_matches_hand_inversion() {
    let w = world(2);
    let mut p = params(2, 1.0);
    p.sigma2 = 0.0;
    p.gamma_th = 0.8;
    let s = RoundState::new(w.theta.clone(), 2);
    let (next, report) = run_round_trunc_ci(&s, &p, &w.fed(), SEED, false).unwrap();
    let d = w.theta.len();
    let h: Vec<Vec<Complex64>> = (0..2usize)
        .map(|i| FadingModel::Rayleigh.draw(d, &mut derive_stream(SEED, &labels!["CAirFL", "fading", 0usize, i])))
        .collect();
    let masked = h.iter().flatten().filter(|h| h.norm() < 0.8).count();
    assert!(masked > 0 && masked < 2 * d);
    let v: Vec<Vec<f64>> = (0..2usize)
        .map(|i| {
            let mut rng = derive_stream(SEED, &labels!["batch", 0usize, i]);
            let u = local_update(&w.mlp, &w.theta, &w.data, &w.parts[i], p.local_steps, p.eta, p.batch_size, &mut rng).unwrap();
            u.delta.iter().map(|x| x / p.eta).collect()
        })
        .collect();
    // noiseless masked inversion: r_j = sum_i v_ij [|h_ij| >= gamma]
    for j in 0..d {
        let r: f64 = (0..2).filter(|&i| h[i][j].norm() >= 0.8).map(|i| v[i][j]).sum();
        let expect = w.theta[j] - p.eta * r / 2.0;
        assert!((next.theta[j] - expect).abs() < 1e-12 * (1.0 + expect.abs()), "j = {j}");
    }
    // power scale: eta times the full-budget scale of the binding device
    let energy = |i: usize| -> f64 { (0..d).filter(|&j| h[i][j].norm() >= 0.8).map(|j| v[i][j] * v[i][j] / h[i][j].norm_sqr()).sum() };
    let rho = (0..2).map(|i| 2e-8 * w.gains[i].kappa * p.eta * d as f64 / energy(i)).fold(f64::INFINITY, f64::min);
    assert!((report.rho - rho).abs() < 1e-12 * rho);
}

#[test]
fn inactive_memories_are_kept() {
    let w = world(10);
    let p = params(10, 0.3);
    let mut s = RoundState::new(w.theta.clone(), 10);
    for _ in 0..6 {
        let (next, report) = run_round(SchemeKind::NCAirFL, &s, &p, &w.fed(), SEED).unwrap();
        assert_eq!(report.active.len(), 3);
        for i in 0..10 {
            if !report.active.contains(&i) {
                assert_eq!(next.memories[i], s.memories[i]);
            }
        }
        assert_eq!(report.power_violations(), 0);
        s = next;
    }
    assert!(s.memories.iter().any(|m| m.norm_sq() > 0.0));
}

/// Uplink that records what is sent and answers with scripted symbols.
struct Scripted {
    sent: Vec<(usize, Vec<f64>)>,
    reply: Complex64,
}

impl NonCoherentUplink for Scripted {
    fn noise_variance(&self) -> f64 {
        0.25
    }

    fn receive(&mut self, _round: usize, d: usize, tx: &[Transmission<'_>]) -> Result<Vec<Complex64>, ChannelError> {
        self.sent.extend(tx.iter().map(|t| (t.device, t.amplitudes.to_vec())));
        Ok(vec![self.reply; d])
    }
}

#[test]
fn ncairfl_sees_channel_only_through_received_symbols() {
    let w = world(4);
    let p = params(4, 0.5);
    let s = RoundState::new(w.theta.clone(), 4);
    let mut up = Scripted { sent: Vec::new(), reply: Complex64::new(0.0, 1.5) };
    let (next, report) = run_round_ncairfl(&s, &p, &w.fed(), SEED, &mut up).unwrap();
    assert_eq!(up.sent.iter().map(|(i, _)| *i).collect::<Vec<_>>(), report.active);

    let d = w.theta.len();
    let phi = gen_dither(SEED, 0, d, p.p).unwrap();
    for (i, amps) in &up.sent {
        let mut rng = derive_stream(SEED, &labels!["batch", 0usize, *i]);
        let u = local_update(&w.mlp, &w.theta, &w.data, &w.parts[*i], p.local_steps, p.eta, p.batch_size, &mut rng).unwrap();
        let g = encode(&MemoryState::zeros(d), &u.delta, &phi).unwrap();
        let x = ncairfl::channel::transmit_signal(&g, p.eta, report.rho, w.gains[*i]).unwrap();
        assert_eq!(&x, amps);
        assert_eq!(next.memories[*i], update_memory(&MemoryState::zeros(d), &u.delta, &phi, &g, true).unwrap());
    }
    let r = vec![(2.25 - 0.25) / report.rho; d];
    assert_eq!(next.theta, ncairfl_update(&w.theta, &r, &phi, p.eta, 2.0));
}

/// Constant objective: every gradient is zero.
struct Flat(usize);

impl Objective for Flat {
    fn dim(&self) -> usize {
        self.0
    }
    fn loss(&self, _: &[f64], _: BatchView<'_>) -> Result<f64, ModelError> {
        Ok(1.0)
    }
    fn loss_grad(&self, _: &[f64], _: BatchView<'_>, grad: &mut [f64]) -> Result<f64, ModelError> {
        grad.fill(0.0);
        Ok(1.0)
    }
    fn accuracy(&self, _: &[f64], _: BatchView<'_>) -> Result<Option<f64>, ModelError> {
        Ok(None)
    }
    fn init(&self, _: &mut RngStream) -> ParamVector {
        ParamVector::zeros(self.0)
    }
}

#[test]
fn zero_gradients_leave_zero_mean_noise() {
    let w = world(4);
    let flat = Flat(8);
    let fed = Federation { objective: &flat, data: &w.data, partitions: &w.parts, gains: &w.gains };
    let mut p = params(4, 0.5);
    p.rho_cap = 1e-14;
    let mut s = RoundState::new(ParamVector::zeros(8), 4);
    let mut steps = Vec::new();
    for _ in 0..3000 {
        let (next, report) = run_round(SchemeKind::NCAirFL, &s, &p, &fed, SEED).unwrap();
        assert_eq!(report.rho, p.rho_cap);
        steps.extend(next.theta.iter().zip(s.theta.iter()).map(|(a, b)| a - b));
        s = next;
    }
    let n = steps.len() as f64;
    let mean = steps.iter().sum::<f64>() / n;
    let var = steps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(var > 0.0);
    assert!(mean.abs() < 4.0 * (var / n).sqrt(), "mean {mean}, se {}", (var / n).sqrt());
}

#[test]
fn degenerate_channel_tracks_error_feedback_loop() {
    let w = world(1);
    let mut p = params(1, 1.0);
    p.sigma2 = 0.0;
    p.fading = FadingModel::Unit;
    let d = w.theta.len();
    let mut s = RoundState::new(w.theta.clone(), 1);
    let mut theta = w.theta.clone();
    let mut m = MemoryState::zeros(d);
    for t in 0..50usize {
        s = run_round(SchemeKind::NCAirFL, &s, &p, &w.fed(), SEED).unwrap().0;
        let mut rng = derive_stream(SEED, &labels!["batch", t, 0usize]);
        let u = local_update(&w.mlp, &theta, &w.data, &w.parts[0], p.local_steps, p.eta, p.batch_size, &mut rng).unwrap();
        let phi = gen_dither(SEED, t, d, p.p).unwrap();
        let g = encode(&m, &u.delta, &phi).unwrap();
        m = update_memory(&m, &u.delta, &phi, &g, true).unwrap();
        for j in 0..d {
            theta[j] -= phi.signs[j] * g.0[j];
        }
    }
    for (a, b) in s.theta.iter().zip(theta.iter()) {
        assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn rounds_are_deterministic_and_schedule_independent() {
    let w = world(6);
    for kind in SchemeKind::ALL {
        let run = |exec| {
            let p = SchemeParams { exec, ..params(6, 0.5) };
            let mut s = RoundState::new(w.theta.clone(), 6);
            for _ in 0..4 {
                s = run_round(kind, &s, &p, &w.fed(), SEED).unwrap().0;
            }
            s
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel), "{kind}");
    }
}
