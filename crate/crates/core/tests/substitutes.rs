mod common;

use gan_unlearning::substitution::{substitute_other_class, substitute_truncation, LatentStats};
use ndarray::Array1;
use proptest::prelude::*;

#[test]
fn substitute_identities_hold_exactly() {
    common::substitute_oracle(1000, 21).unwrap();
}

fn stats(means: Vec<Vec<f64>>) -> LatentStats {
    let k = means.len();
    let d = means[0].len();
    let global = (0..d).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k as f64).collect();
    LatentStats { global_mean: global, class_means: means, class_counts: vec![1; k] }
}

proptest! {
    #[test]
    fn truncation_distance_grows_with_lambda(
        z0 in prop::collection::vec(-3.0f64..3.0, 4),
        means in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..5),
        l1 in 0.0f64..1.0,
        l2 in 0.0f64..1.0,
    ) {
        let s = stats(means);
        let z0 = Array1::from(z0);
        let mean = Array1::from(s.global_mean.clone());
        let dist = |l: f64| (&substitute_truncation(z0.view(), &s, l).unwrap() - &mean).mapv(|v| v * v).sum().sqrt();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        prop_assert!(dist(lo) <= dist(hi) + 1e-12);
    }

    #[test]
    fn other_class_never_returns_the_unlearned_label(
        z0 in prop::collection::vec(-3.0f64..3.0, 3),
        means in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..6),
        y0 in 0usize..6,
    ) {
        let s = stats(means);
        let y0 = y0 % s.num_classes();
        let (code, y) = substitute_other_class(Array1::from(z0).view(), y0, &s).unwrap();
        prop_assert_ne!(y, y0);
        prop_assert_eq!(code.to_vec(), s.class_means[y].clone());
    }
}
