use fgrm_core::model::{self, evidential_loss, one_hot, uncertainty_maps, DirichletPrediction, ModelConfig};
use fgrm_core::scenes::{generate_scene, SceneSpec};
use fgrm_tensor::{grad_check, GradCheckOptions, ParameterSet, Tensor};
use proptest::prelude::*;

/// Single-pixel prediction with concentrations `alpha`.
fn pixel(alpha: &[f64]) -> DirichletPrediction {
    DirichletPrediction::from_alpha(Tensor::new(&[1, alpha.len(), 1, 1], alpha.to_vec()).unwrap()).unwrap()
}

fn loss(alpha: &[f64], label: usize) -> f64 {
    let mask = one_hot(&[label], alpha.len(), 1, 1, 1).unwrap();
    evidential_loss(&pixel(alpha), &mask).unwrap().item()
}

fn alphas(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    k.prop_flat_map(|k| prop::collection::vec(1.0f64..50.0, k))
}

proptest! {
    #[test]
    fn mean_preserves_argmax(alpha in alphas(2..=6)) {
        let pred = pixel(&alpha);
        let by_alpha = alpha
            .iter()
            .enumerate()
            .fold(0, |best, (i, &a)| if a > alpha[best] { i } else { best });
        prop_assert_eq!(pred.labels()[0], by_alpha);
    }

    #[test]
    fn uniform_prior_loss_is_label_independent(k in 2usize..=8, label in 0usize..8) {
        let label = label % k;
        // ψ(K) − ψ(1) = H_{K−1}
        let harmonic: f64 = (1..k).map(|j| 1.0 / j as f64).sum();
        prop_assert!((loss(&vec![1.0; k], label) - harmonic).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_with_true_class_evidence(alpha in alphas(2..=5), label in 0usize..5, bump in 0.01f64..10.0) {
        let label = label % alpha.len();
        let mut more = alpha.clone();
        more[label] += bump;
        prop_assert!(loss(&more, label) < loss(&alpha, label));
    }

    #[test]
    fn uncertainties_lie_in_unit_interval(alpha in alphas(2..=6)) {
        let u = uncertainty_maps(&pixel(&alpha));
        prop_assert!((0.0..=1.0).contains(&u.aleatoric[0]));
        prop_assert!(u.epistemic[0] > 0.0 && u.epistemic[0] <= 1.0);
        let s: f64 = alpha.iter().sum();
        prop_assert!((u.epistemic[0] - alpha.len() as f64 / s).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn forward_and_loss_pass_grad_check(seed in 0u64..1000) {
        let spec = SceneSpec { height: 8, width: 8, seed, ..SceneSpec::default() };
        let cfg = ModelConfig { height: 8, width: 8, widths: vec![3, 3], seed, ..ModelConfig::default() };
        let samples = [generate_scene(&spec, 0), generate_scene(&spec, 1)];
        let refs: Vec<_> = samples.iter().collect();
        let input = model::batch_input(&cfg, &refs).unwrap();
        let labels: Vec<usize> = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let mask = one_hot(&labels, 3, 2, 8, 8).unwrap();
        let params: ParameterSet = model::init_params(&cfg).unwrap();
        let report = grad_check(
            |b| evidential_loss(&model::forward(&cfg, b, &input)?, &mask),
            &params,
            GradCheckOptions::default(),
        )
        .unwrap();
        prop_assert!(report.max_rel_error() <= 1e-4, "max rel error {}", report.max_rel_error());
    }
}
