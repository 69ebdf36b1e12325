mod common;

use ciffuse::metrics::{corpus_error_rate, edit_distance};
use common::edit_distance_exhaustive;
use proptest::prelude::*;

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..3, 0..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_exhaustive_search(a in seq(), b in seq()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance_exhaustive(&a, &b));
    }

    #[test]
    fn is_symmetric(a in seq(), b in seq()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
    }

    #[test]
    fn obeys_triangle_inequality(a in seq(), b in seq(), c in seq()) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }

    #[test]
    fn corpus_rate_is_length_weighted_mean(pairs in prop::collection::vec((seq(), prop::collection::vec(0u8..3, 1..=6)), 1..8)) {
        let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
        let weighted: f64 = pairs
            .iter()
            .map(|(h, r)| 100.0 * edit_distance(h, r) as f64 / r.len() as f64 * r.len() as f64 / total as f64)
            .sum();
        prop_assert!((corpus_error_rate(&pairs).unwrap() - weighted).abs() < 1e-9);
    }
}
