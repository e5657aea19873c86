mod support;

use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use visuomotor_core::kinematics::{fk_position, KinematicChain};
use visuomotor_core::nn::Module;
use visuomotor_core::trajvae::*;
use visuomotor_core::vaed::TrainConfig;

fn tiny() -> TrajVaeConfig {
    TrajVaeConfig {
        horizon: 5,
        joints: 3,
        action_dim: 2,
        hidden: vec![7, 6, 4],
    }
}

fn desk() -> (KinematicChain, TrajGenConfig) {
    let cfg = TrajGenConfig::default();
    (KinematicChain::desk_arm(cfg.hover_height), cfg)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut model = TrajVae::<f64>::new(tiny(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = Array2::from_shape_fn((4, 15), |_| rng.random_range(-1.0..1.0));
    model.fit_normalization(&u);
    let e = Array2::from_shape_fn((4, 2), |_| StandardNormal.sample(&mut rng));
    for beta in [0.0, 0.3] {
        let (_, grads) = model.loss_and_grad(&u, &e, beta).unwrap();
        let mut probe = model.clone();
        let worst = support::grad::directional_check(
            &model.flat_params(),
            &grads.flat_params(),
            24,
            1e-6,
            3,
            |p| {
                probe.set_flat_params(p);
                probe.loss(&u, &e, beta).unwrap().total
            },
        );
        assert!(worst < 1e-4, "beta {beta}: relative error {worst}");
    }
}

#[test]
fn decoder_jacobian_matches_finite_differences() {
    let model = TrajVae::<f64>::new(TrajVaeConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let jac = model.decoder_jacobian(&a).unwrap();
        let h = 1e-6;
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for k in 0..5 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[k] += h;
            am[k] -= h;
            let up = model.decode_action(&ap).unwrap();
            let um = model.decode_action(&am).unwrap();
            for i in 0..72 {
                let fd = (up.data[i] - um.data[i]) / (2.0 * h);
                err += (fd - jac[(i, k)]).powi(2);
                norm += fd * fd;
            }
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 1e-4, "relative error {rel}");
    }
}

#[test]
fn decoding_is_deterministic() {
    let model = TrajVae::<f32>::new(TrajVaeConfig::default(), 5).unwrap();
    let a = [0.1, -0.4, 0.9, 0.0, 2.0];
    assert_eq!(
        model.decode_action(&a).unwrap(),
        model.decode_action(&a).unwrap()
    );
    let u = model.decode_action(&a).unwrap();
    assert_eq!(
        model.encode_traj(&u).unwrap(),
        model.encode_traj(&u).unwrap()
    );
}

#[test]
fn single_target_reaches_within_a_millimetre() {
    let (chain, cfg) = desk();
    let ws = Workspace {
        x: [0.44, 0.46],
        y: [-0.01, 0.01],
    };
    let set = generate_training_trajectories(&chain, &ws, (1, 1), &DESK_START, &cfg).unwrap();
    assert_eq!(set.len(), 1);
    let p = fk_position(&chain, set.trajectories[0].last()).unwrap();
    assert!((p - Vector3::new(0.45, 0.0, cfg.hover_height)).norm() < 1e-3);
}

#[test]
fn grid_coverage_start_and_limits() {
    let (chain, cfg) = desk();
    let set =
        generate_training_trajectories(&chain, &Workspace::default(), (10, 10), &DESK_START, &cfg)
            .unwrap();
    assert!(set.len() >= 95, "only {} reachable", set.len());
    assert_eq!(set.len() + set.unreachable.len(), 100);
    for (traj, target) in set.trajectories.iter().zip(&set.targets) {
        assert_eq!(traj.steps, 24);
        assert_eq!(traj.step(0), &DESK_START[..]);
        for t in 0..traj.steps {
            assert!(chain.within_limits(traj.step(t)));
        }
        let p = fk_position(&chain, traj.last()).unwrap();
        assert!((p - Vector3::from(*target)).norm() < 1e-3);
    }
}

#[test]
fn unreachable_targets_are_reported() {
    let (chain, cfg) = desk();
    let targets = [[0.45, 0.0, cfg.hover_height], [2.0, 0.0, cfg.hover_height]];
    let set = trajectories_for_targets(&chain, &targets, &DESK_START, &cfg).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.unreachable, vec![targets[1]]);
}

#[test]
fn trajectory_file_round_trip() {
    let (chain, cfg) = desk();
    let set =
        generate_training_trajectories(&chain, &Workspace::default(), (3, 2), &DESK_START, &cfg)
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.traj");
    set.write(&path).unwrap();
    let back = TrajectorySet::read(&path).unwrap();
    assert_eq!(back.targets, set.targets);
    assert_eq!(back.grid, set.grid);
    for (a, b) in back.trajectories.iter().zip(&set.trajectories) {
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

fn small_run(seed: u64) -> (TrajectorySet, TrainedTrajVae, BetaSchedule) {
    let (chain, cfg) = desk();
    let set =
        generate_training_trajectories(&chain, &Workspace::default(), (6, 5), &DESK_START, &cfg)
            .unwrap();
    let schedule = BetaSchedule {
        interval: 40,
        ..Default::default()
    };
    let config = TrajVaeConfig {
        hidden: vec![32, 16, 8],
        ..Default::default()
    };
    let opt = TrainConfig {
        epochs: 150,
        batch_size: 8,
        learning_rate: 2e-3,
        seed,
        ..Default::default()
    };
    let trained = train_trajectory_vae(&set, &config, &schedule, &opt, |_| {}).unwrap();
    (set, trained, schedule)
}

#[test]
fn training_log_reproducibility_and_round_trip() {
    let (set, a, schedule) = small_run(11);
    for e in &a.log {
        assert_eq!(e.beta, beta_at(&schedule, e.epoch));
    }
    let (_, b, _) = small_run(11);
    assert_eq!(
        a.model.to_checkpoint().to_bytes(),
        b.model.to_checkpoint().to_bytes()
    );

    let final_rmse = a.log.last().unwrap().rmse();
    let rmse = reconstruction_rmse(&a.model, &set).unwrap();
    let total = (rmse.iter().map(|r| r * r).sum::<f64>() / rmse.len() as f64).sqrt();
    assert!(
        total < final_rmse * 1.1,
        "round trip {total} vs logged {final_rmse}"
    );

    // Continuity of the trained encoder.
    let u = &set.trajectories[3];
    let mut v = u.clone();
    v.data[40] += 1e-8;
    let mu_u = a.model.encode_traj(u).unwrap().mu;
    let mu_v = a.model.encode_traj(&v).unwrap().mu;
    assert!(mu_u.iter().zip(&mu_v).all(|(x, y)| (x - y).abs() < 1e-3));
}

#[test]
fn training_rejects_tiny_sets() {
    let (chain, cfg) = desk();
    let set = trajectories_for_targets(&chain, &[[0.45, 0.0, 0.1]], &DESK_START, &cfg).unwrap();
    let r = train_trajectory_vae(
        &set,
        &TrajVaeConfig::default(),
        &BetaSchedule::default(),
        &TrainConfig::default(),
        |_| {},
    );
    assert!(r.is_err());
}

proptest! {
    #[test]
    fn beta_ladder_is_monotone_and_bounded(
        start_exp in -10i32..-4,
        decades in 0i32..5,
        interval in 1usize..1000,
        e in 0usize..100_000,
    ) {
        let s = BetaSchedule {
            beta_start: 10f64.powi(start_exp),
            beta_end: 10f64.powi(start_exp + decades),
            interval,
        };
        let (b0, b1) = (beta_at(&s, e), beta_at(&s, e + 1));
        prop_assert!(b0 <= b1);
        prop_assert!(s.beta_start <= b0 && b0 <= s.beta_end);
        if (e + 1) % interval != 0 {
            prop_assert_eq!(b0, b1);
        }
    }
}
