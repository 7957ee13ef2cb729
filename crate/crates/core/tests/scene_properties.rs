use fgrm_core::scenes::{corrupt, generate_scene, split, Corruption, CorruptionKind, SceneSpec};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = SceneSpec> {
    (any::<u64>(), 2usize..=4, 0.0f64..4.0, 0.0f64..0.1).prop_map(|(seed, classes, width, noise)| SceneSpec {
        seed,
        classes,
        ambiguity_width: width,
        noise,
        ..SceneSpec::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_a_pure_function(spec in spec(), index in 0usize..1000) {
        prop_assert_eq!(generate_scene(&spec, index), generate_scene(&spec, index));
    }

    #[test]
    fn labels_are_valid_and_classes_balanced(spec in spec(), index in 0usize..1000) {
        let s = generate_scene(&spec, index);
        prop_assert!(s.mask.iter().all(|&l| l < spec.classes));
        prop_assert_eq!(s.band.len(), s.pixels());
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        for f in s.class_fractions(spec.classes) {
            prop_assert!(f >= spec.min_class_fraction, "fraction {f}");
        }
    }

    #[test]
    fn corruption_keeps_labels(spec in spec(), index in 0usize..100, blur in any::<bool>(), severity in 1u8..=5) {
        let s = generate_scene(&spec, index);
        let kind = if blur { CorruptionKind::GaussianBlur } else { CorruptionKind::GaussianNoise };
        let c = corrupt(&s, Corruption { kind, severity }).unwrap();
        prop_assert_eq!(&c.mask, &s.mask);
        prop_assert_eq!(&c.band, &s.band);
        prop_assert!(c.provenance.is_ood());
        prop_assert_eq!(c, corrupt(&s, Corruption { kind, severity }).unwrap());
    }

    #[test]
    fn distance_grows_with_severity(spec in spec(), index in 0usize..100, blur in any::<bool>()) {
        let s = generate_scene(&spec, index);
        let kind = if blur { CorruptionKind::GaussianBlur } else { CorruptionKind::GaussianNoise };
        let dist: Vec<f64> = (1..=5)
            .map(|severity| {
                let c = corrupt(&s, Corruption { kind, severity }).unwrap();
                c.image.iter().zip(&s.image).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .collect();
        prop_assert!(dist.windows(2).all(|w| w[1] > w[0]), "{dist:?}");
    }

    #[test]
    fn splits_partition_the_dataset(n in 10usize..500, seed in any::<u64>()) {
        let s = split(n, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.test.len(), n.div_ceil(5));
        prop_assert_eq!(s.val.len(), (n - n.div_ceil(5)).div_ceil(5));
    }
}

#[test]
fn blur_fixes_constant_images() {
    let spec = SceneSpec { noise: 0.0, ..SceneSpec::default() };
    let mut s = generate_scene(&spec, 0);
    s.image.iter_mut().for_each(|v| *v = 0.4);
    let c = corrupt(&s, Corruption { kind: CorruptionKind::GaussianBlur, severity: 5 }).unwrap();
    assert!(c.image.iter().all(|v| (v - 0.4).abs() < 1e-12));
}
