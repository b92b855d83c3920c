use ncairfl::data::{partition, sample_batch, synth_dataset, Dataset, DevicePartition, PartitionMode, SynthKind};
use ncairfl::labels;
use ncairfl::model::{gradient, local_update, Mlp, MlpParams, MlpShape, Objective, ParamVector};
use ncairfl::rng::derive_stream;

const SHAPE: MlpShape = MlpShape { inputs: 12, hidden: 7, classes: 10 };

fn setup() -> (Dataset, Vec<DevicePartition>, Mlp, ParamVector) {
    let data = synth_dataset(SynthKind::Blobs { separation: 3.0 }, SHAPE.inputs, 200, &mut derive_stream(1, &labels!["data"])).unwrap();
    let parts = partition(&data, 4, PartitionMode::Iid, &mut derive_stream(1, &labels!["part"])).unwrap();
    let mlp = Mlp::new(SHAPE);
    let theta = mlp.init(&mut derive_stream(1, &labels!["init"]));
    (data, parts, mlp, theta)
}

#[test]
fn zero_step_size_gives_zero_delta() {
    let (data, parts, mlp, theta) = setup();
    for q in [1, 3, 7] {
        let u = local_update(&mlp, &theta, &data, &parts[0], q, 0.0, 16, &mut derive_stream(2, &labels!["b"])).unwrap();
        assert!(u.delta.iter().all(|&v| v == 0.0));
    }
}

/// Independent unrolled SGD built from `gradient` on `MlpParams`.
fn unrolled(data: &Dataset, part: &DevicePartition, theta: &ParamVector, steps: usize, eta: f64, seed: u64) -> Vec<f64> {
    let mut rng = derive_stream(seed, &labels!["b"]);
    let mut p = MlpParams::from_flat(SHAPE, theta).unwrap();
    for _ in 0..steps {
        let (batch, _) = sample_batch(data, part, 16, &mut rng).unwrap();
        let g = gradient(&p, &batch).unwrap();
        p.w1 = &p.w1 - &(&g.w1 * eta);
        p.b1 = &p.b1 - &(&g.b1 * eta);
        p.w2 = &p.w2 - &(&g.w2 * eta);
        p.b2 = &p.b2 - &(&g.b2 * eta);
    }
    theta.iter().zip(p.flatten().iter()).map(|(a, b)| a - b).collect()
}

#[test]
fn single_step_is_one_sgd_step() {
    let (data, parts, mlp, theta) = setup();
    let eta = 0.1;
    let u = local_update(&mlp, &theta, &data, &parts[1], 1, eta, 16, &mut derive_stream(5, &labels!["b"])).unwrap();
    let (batch, _) = sample_batch(&data, &parts[1], 16, &mut derive_stream(5, &labels!["b"])).unwrap();
    let g = gradient(&MlpParams::from_flat(SHAPE, &theta).unwrap(), &batch).unwrap().flatten();
    for (d, g) in u.delta.iter().zip(g.iter()) {
        // equal up to the rounding of theta0 - (theta0 - eta g)
        assert!((d - eta * g).abs() <= 1e-15, "{d} vs {}", eta * g);
    }
}

#[test]
fn three_steps_match_unrolled_loop() {
    let (data, parts, mlp, theta) = setup();
    let u = local_update(&mlp, &theta, &data, &parts[2], 3, 0.2, 16, &mut derive_stream(9, &labels!["b"])).unwrap();
    let oracle = unrolled(&data, &parts[2], &theta, 3, 0.2, 9);
    for (a, b) in u.delta.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn delta_obeys_telescoping_bound() {
    let (data, parts, mlp, theta) = setup();
    for (k, q) in [1usize, 2, 5, 10].into_iter().enumerate() {
        let eta = 0.05 * (k + 1) as f64;
        let u = local_update(&mlp, &theta, &data, &parts[3], q, eta, 8, &mut derive_stream(k as u64, &labels!["b"])).unwrap();
        assert_eq!(u.grad_norms.len(), q);
        let norm = u.delta.norm_sq().sqrt();
        assert!(norm <= eta * q as f64 * u.max_grad_norm() * (1.0 + 1e-12));
    }
}

#[test]
fn oversized_batch_is_flagged() {
    let (data, parts, mlp, theta) = setup();
    let u = local_update(&mlp, &theta, &data, &parts[0], 2, 0.1, 500, &mut derive_stream(3, &labels!["b"])).unwrap();
    assert!(u.sampled_with_replacement);
    let ok = local_update(&mlp, &theta, &data, &parts[0], 2, 0.1, 50, &mut derive_stream(3, &labels!["b"])).unwrap();
    assert!(!ok.sampled_with_replacement);
}
