use fgrm_core::model::{self, ModelConfig};
use fgrm_core::scenes::{generate_scene, SceneSample, SceneSpec};
use fgrm_core::tuner::{
    self, apply_update, fgrm_step_with_fisher, fisher_diagonal, kl_penalty, leave_one_out, Batch,
    FisherDiagonal, FisherMode, KlKind, RewardMode, TunerConfig, TunerState,
};
use fgrm_tensor::ParameterSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (ModelConfig, Vec<SceneSample>, ParameterSet) {
    let spec = SceneSpec { height: 8, width: 8, seed: 5, ..SceneSpec::default() };
    let cfg = ModelConfig { height: 8, width: 8, widths: vec![4], seed: 5, ..ModelConfig::default() };
    let data = (0..8).map(|i| generate_scene(&spec, i)).collect();
    let params = model::init_params(&cfg).unwrap();
    (cfg, data, params)
}

fn config(reward: RewardMode) -> TunerConfig {
    TunerConfig {
        reward,
        beta: 0.0,
        lr: 1e-2,
        samples: 4,
        epochs: 1,
        monitor_images: 4,
        ..TunerConfig::default()
    }
}

/// φ − θ after one step with the given Fisher override.
fn step_delta(reward: RewardMode, fisher: Option<&FisherDiagonal>, fisher_mode: FisherMode) -> Vec<f64> {
    let (cfg, data, reference) = setup();
    let ood: Vec<SceneSample> = data
        .iter()
        .map(|s| fgrm_core::scenes::corrupt(s, Default::default()).unwrap())
        .collect();
    let batch = Batch {
        id: data.iter().take(4).collect(),
        ood: if reward == RewardMode::Ood { ood.iter().take(4).collect() } else { Vec::new() },
    };
    let tc = TunerConfig { fisher: fisher_mode, ..config(reward) };
    let mut policy = reference.clone();
    let mut state = TunerState::new(&tc);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    fgrm_step_with_fisher(&cfg, &mut policy, &reference, &batch, &tc, &mut state, &mut rng, fisher).unwrap();
    policy.flatten().iter().zip(reference.flatten()).map(|(a, b)| a - b).collect()
}

#[test]
fn constant_fisher_scales_the_uniform_step() {
    let (_, _, params) = setup();
    for reward in [RewardMode::Id, RewardMode::Ood] {
        let uniform = step_delta(reward, None, FisherMode::Uniform);
        assert!(uniform.iter().any(|d| d.abs() > 0.0));
        let ones = FisherDiagonal::uniform(&params);
        assert_eq!(step_delta(reward, Some(&ones), FisherMode::Squared), uniform);
        let c = 2.5;
        let mut scaled = ones.clone();
        scaled.weights.iter_mut().flatten().for_each(|w| *w = c);
        let delta = step_delta(reward, Some(&scaled), FisherMode::Squared);
        let max = uniform.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        for (d, u) in delta.iter().zip(&uniform) {
            assert!((d - c * u).abs() <= 1e-12 * max, "{d} vs {}", c * u);
        }
    }
}

#[test]
fn kl_gradient_never_reaches_the_reference() {
    let (cfg, data, reference) = setup();
    let mut policy = reference.clone();
    policy.iter_mut().for_each(|p| p.values.iter_mut().for_each(|v| *v *= 1.1));
    let refs: Vec<&SceneSample> = data.iter().take(2).collect();
    let input = model::batch_input(&cfg, &refs).unwrap();
    let pb = policy.bind();
    let rb = reference.bind();
    for kind in [KlKind::Categorical, KlKind::Dirichlet] {
        pb.zero_grad();
        rb.zero_grad();
        let p = model::forward(&cfg, &pb, &input).unwrap();
        let r = model::forward(&cfg, &rb, &input).unwrap();
        let kl = kl_penalty(&p, &r, kind).unwrap();
        assert!(kl.item() > 0.0);
        kl.backward().unwrap();
        assert!(rb.grads().iter().flatten().all(|g| *g == 0.0), "{kind:?}");
        assert!(pb.grads().iter().flatten().any(|g| *g != 0.0), "{kind:?}");
    }
}

#[test]
fn fisher_weights_ignore_batch_order() {
    let (cfg, data, params) = setup();
    let forward: Vec<&SceneSample> = data.iter().collect();
    let reversed: Vec<&SceneSample> = data.iter().rev().collect();
    for mode in [FisherMode::Squared, FisherMode::Reciprocal] {
        let tc = TunerConfig { fisher: mode, ..TunerConfig::default() };
        let a = fisher_diagonal(&cfg, &params, &forward, &tc).unwrap();
        let b = fisher_diagonal(&cfg, &params, &reversed, &tc).unwrap();
        for (x, y) in a.weights.iter().flatten().zip(b.weights.iter().flatten()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12), "{mode:?}: {x} vs {y}");
        }
    }
}

/// π(0) = σ(θ); the reward is 1 for action 0, so dE[R]/dθ = σ(θ)(1 − σ(θ)).
#[test]
fn one_parameter_bandit_moves_toward_the_rewarded_action() {
    let m = 4000;
    for (seed, theta0) in [(1u64, -1.0f64), (2, 0.0), (3, 1.5)] {
        let mut params = ParameterSet::new();
        params.insert("theta", &[1], vec![theta0]).unwrap();
        let p0 = 1.0 / (1.0 + (-theta0).exp());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actions: Vec<usize> = (0..m).map(|_| usize::from(rng.random::<f64>() >= p0)).collect();
        let rewards: Vec<Vec<f64>> = actions.iter().map(|&a| vec![f64::from(u8::from(a == 0))]).collect();
        let adv = leave_one_out(&rewards);
        let bound = params.bind();
        let theta = bound.get("theta").unwrap();
        // log π(0) = −softplus(−θ), log π(1) = −softplus(θ)
        let log_pi0 = theta.neg().softplus().neg();
        let log_pi1 = theta.softplus().neg();
        let (w0, w1) = actions.iter().zip(&adv).fold((0.0, 0.0), |(w0, w1), (&a, r)| {
            if a == 0 { (w0 + r[0], w1) } else { (w0, w1 + r[0]) }
        });
        let objective = log_pi0
            .scale(w0 / m as f64)
            .add(&log_pi1.scale(w1 / m as f64))
            .unwrap()
            .sum();
        objective.backward().unwrap();
        let grads = bound.grads();
        let analytic = p0 * (1.0 - p0);
        assert!(grads[0][0] > 0.0);
        assert!((grads[0][0] - analytic).abs() < 0.15 * analytic, "{} vs {analytic}", grads[0][0]);
        let mut state = TunerState::new(&TunerConfig { lr: 0.5, ..TunerConfig::default() });
        apply_update(&mut params, &grads, &[vec![0.0]], 1.0, &mut state).unwrap();
        assert!(params.get("theta").unwrap().values[0] > theta0);
    }
}

#[test]
fn zero_epochs_returns_the_reference() {
    let (cfg, data, reference) = setup();
    let val: Vec<&SceneSample> = data.iter().collect();
    let tc = TunerConfig { epochs: 0, ..config(RewardMode::Id) };
    let (tuned, log) = tuner::tune(&cfg, &reference, &val, &tc).unwrap();
    assert!(log.is_empty());
    assert_eq!(tuned, reference);
}

#[test]
fn same_seed_reproduces_logs_and_parameters() {
    let (cfg, data, reference) = setup();
    let val: Vec<&SceneSample> = data.iter().collect();
    for reward in [RewardMode::Id, RewardMode::Ood] {
        let tc = TunerConfig { beta: 0.5, fisher: FisherMode::Squared, ..config(reward) };
        let (a, la) = tuner::tune(&cfg, &reference, &val, &tc).unwrap();
        let (b, lb) = tuner::tune(&cfg, &reference, &val, &tc).unwrap();
        assert_eq!(tuner::log_to_csv(&la), tuner::log_to_csv(&lb));
        let bits = |p: &ParameterSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la.len(), 2);
        assert!(la.last().unwrap().ece.is_some());
        assert_eq!(la.last().unwrap().pr.is_some(), reward == RewardMode::Ood);
    }
}
