use mlirl_core::env::{FeatureMap, Mdp, TabularPolicy};
use mlirl_core::net::{NetFunction, TwoLayerNet};
use mlirl_core::rng::rng_from_seed;
use mlirl_core::soft_q::{default_stepsize, run_soft_q_learning, SamplingMode, SoftQConfig};
use ndarray::{array, Array2, Array3};

/// One state, one action, constant reward `c` through a reward net with a
/// single aligned unit: `r(x) = relu(x_0) = c` for `x = e_0`.
fn scalar_problem(c: f64, dim: usize) -> (Mdp, FeatureMap, TwoLayerNet) {
    let mdp = Mdp::new(Array3::ones((1, 1, 1)), array![1.0], 0.9, array![[c]]).unwrap();
    let mut x = Array2::zeros((1, dim));
    x[[0, 0]] = 1.0;
    let psi = FeatureMap::new(1, x).unwrap();
    let mut w = Array2::zeros((1, dim));
    w[[0, 0]] = c;
    let reward = TwoLayerNet::from_parts(vec![1.0], w.clone(), w, 1.0).unwrap();
    (mdp, psi, reward)
}

fn scalar_run(iterations: usize, sampling: SamplingMode) -> (f64, TwoLayerNet) {
    let (mdp, psi, reward) = scalar_problem(1.0, 8);
    let q0 = TwoLayerNet::init(2048, 8, 50.0, &mut rng_from_seed(1)).unwrap();
    let cfg = SoftQConfig::new(iterations).with_sampling(sampling);
    let out = run_soft_q_learning(
        &mdp,
        &psi,
        &TabularPolicy::uniform(1, 1),
        &reward,
        q0.clone(),
        &cfg,
        &mut rng_from_seed(2),
    )
    .unwrap();
    (out.forward(psi.row(0)).unwrap(), q0)
}

#[test]
fn scalar_output_stays_in_reachable_range() {
    let (q, q0) = scalar_run(10_000, SamplingMode::ExactStationary);
    let x = {
        let mut x = ndarray::Array1::zeros(8);
        x[0] = 1.0;
        x
    };
    let start = q0.value(x.view());
    // |Q(W) - Q(W_0)| <= ||W - W_0|| / sqrt(m) <= B / sqrt(m)
    let reach = 50.0 / (2048f64).sqrt();
    assert!((q - start).abs() <= reach + 1e-12);
    // every residual is negative, so each step raises Q toward 10
    assert!(q > start, "{q} vs {start}");
}

#[test]
#[ignore = "unreachable: with the 1/m output scale the ball caps |Q| near B/sqrt(m) ~ 1.1, far from 10"]
fn scalar_fixed_point_is_recovered() {
    let (q, _) = scalar_run(100_000, SamplingMode::ExactStationary);
    assert!((q - 10.0).abs() <= 0.1, "{q}");
}

#[test]
fn chain_rollout_mode_runs_and_is_deterministic() {
    let a = scalar_run(1000, SamplingMode::ChainRollout { burn_in: 10 }).0;
    let b = scalar_run(1000, SamplingMode::ChainRollout { burn_in: 10 }).0;
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(default_stepsize(100), 0.1);
}
