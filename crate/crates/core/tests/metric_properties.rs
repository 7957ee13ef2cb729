use fgrm_core::metrics::{dice, discrete_mi, ece, ood_ratios, reliability_bins, uncertainty_error_mi};
use proptest::prelude::*;

fn scored_pixels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200).prop_map(|v| v.into_iter().unzip())
}

fn label_pair(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..k, 0..k), 1..200).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn ece_is_permutation_invariant((conf, correct) in scored_pixels(), bins in 1usize..20, seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..conf.len()).collect();
        // deterministic shuffle from the seed
        let mut state = seed | 1;
        for i in (1..idx.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            idx.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let c2: Vec<f64> = idx.iter().map(|&i| conf[i]).collect();
        let k2: Vec<bool> = idx.iter().map(|&i| correct[i]).collect();
        let a = ece(&conf, &correct, bins).unwrap();
        let b = ece(&c2, &k2, bins).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ece_is_bounded_by_worst_bin((conf, correct) in scored_pixels(), bins in 1usize..20) {
        let r = reliability_bins(&conf, &correct, bins).unwrap();
        let worst = r
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.accuracy - b.mean_conf).abs())
            .fold(0.0, f64::max);
        prop_assert!(r.ece() <= worst + 1e-12);
        prop_assert!(r.ece() >= 0.0);
    }

    #[test]
    fn single_bin_ece_is_global_gap((conf, correct) in scored_pixels()) {
        let n = conf.len() as f64;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / n;
        let mean_conf = conf.iter().sum::<f64>() / n;
        prop_assert!((ece(&conf, &correct, 1).unwrap() - (acc - mean_conf).abs()).abs() < 1e-12);
    }

    #[test]
    fn discrete_mi_is_symmetric_and_non_negative((a, b) in label_pair(5)) {
        let ab = discrete_mi(&a, &b).unwrap();
        let ba = discrete_mi(&b, &a).unwrap();
        prop_assert!(ab >= -1e-15);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_mi_is_non_negative((u, err) in scored_pixels(), levels in 2usize..16) {
        prop_assert!(uncertainty_error_mi(&u, &err, levels).unwrap().nats >= -1e-15);
    }

    #[test]
    fn binary_uncertainty_mi_swaps_roles((u, e) in prop::collection::vec((any::<bool>(), any::<bool>()), 2..200)
        .prop_map(|v| v.into_iter().unzip::<bool, bool, Vec<bool>, Vec<bool>>()))
    {
        let as_f = |v: &[bool]| v.iter().map(|&x| f64::from(u8::from(x))).collect::<Vec<_>>();
        let ue = uncertainty_error_mi(&as_f(&u), &e, 2).unwrap();
        let eu = uncertainty_error_mi(&as_f(&e), &u, 2).unwrap();
        if !ue.degenerate && !eu.degenerate {
            prop_assert!((ue.nats - eu.nats).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_is_symmetric((p, g) in label_pair(4), class in 0usize..4) {
        prop_assert_eq!(dice(&p, &g, class, 4).unwrap(), dice(&g, &p, class, 4).unwrap());
    }

    #[test]
    fn dice_is_relabel_invariant((p, g) in label_pair(4), class in 0usize..4, shift in 1usize..4) {
        let perm = |v: &[usize]| v.iter().map(|&l| (l + shift) % 4).collect::<Vec<_>>();
        let d = dice(&p, &g, class, 4).unwrap();
        prop_assert_eq!(d, dice(&perm(&p), &perm(&g), (class + shift) % 4, 4).unwrap());
    }

    #[test]
    fn ood_ratios_scale_with_ood_maps(
        id in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 64), 1..4),
        noise in prop::collection::vec(0.0f64..1.0, 64),
        c in 0.1f64..10.0,
    ) {
        let ood: Vec<Vec<f64>> = id.iter().map(|m| m.iter().zip(&noise).map(|(a, b)| a + b).collect()).collect();
        let scaled: Vec<Vec<f64>> = ood.iter().map(|m| m.iter().map(|v| v * c).collect()).collect();
        let base = ood_ratios(&ood, &id, 8, 8, 4).unwrap();
        let r = ood_ratios(&scaled, &id, 8, 8, 4).unwrap();
        prop_assert!((r.pr - c * base.pr).abs() <= 1e-12 * r.pr.abs().max(1.0));
        prop_assert!((r.br - c * base.br).abs() <= 1e-12 * r.br.abs().max(1.0));
    }
}
