mod common;

use ciffuse::autodiff::Tape;
use ciffuse::cif::{cif, integrate_and_fire, CifMode};
use ciffuse::Tensor;
use common::cif_scalar;
use proptest::prelude::*;

fn h_ac() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=20, 1usize..=8).prop_flat_map(|(t, d)| {
        (
            Just(t),
            Just(d),
            prop::collection::vec(-4.0f64..4.0, t * (d + 1)),
        )
    })
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn training_mode_matches_scalar_simulation((t, d, data) in h_ac(), n_frac in 0.0f64..1.0) {
        let n_star = 1 + (n_frac * t as f64) as usize;
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![t, d + 1], data).unwrap());
        let out = cif(h, CifMode::Train { n_star }).unwrap();
        prop_assert_eq!(out.fired_count, n_star);
        let resized = out.alpha_resized.unwrap().value();
        prop_assert!((resized.sum() - n_star as f64).abs() < 1e-9);
        let content = h.value();
        let content: Vec<Vec<f64>> = (0..t).map(|r| content.row(r)[..d].to_vec()).collect();
        let expect = cif_scalar(resized.data(), &content, n_star);
        prop_assert!(max_diff(&rows(&out.integrated.value()), &expect) < 1e-9);
    }

    #[test]
    fn inference_mode_matches_scalar_simulation((t, d, data) in h_ac()) {
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![t, d + 1], data).unwrap());
        let out = cif(h, CifMode::Infer).unwrap();
        let alpha = out.alpha.value();
        prop_assert_eq!(out.fired_count, ciffuse::cif::round_length(alpha.sum()));
        let content = h.value();
        let content: Vec<Vec<f64>> = (0..t).map(|r| content.row(r)[..d].to_vec()).collect();
        let expect = cif_scalar(alpha.data(), &content, out.fired_count);
        prop_assert!(max_diff(&rows(&out.integrated.value()), &expect) < 1e-9);
    }

    /// With unit content every integrated vector holds its own weight, so cells
    /// carry exactly the weight mass and each full cell carries 1.
    #[test]
    fn weight_mass_is_conserved(weights in prop::collection::vec(0.0f64..1.0, 1..20), n_frac in 0.0f64..1.0) {
        let t = weights.len();
        let cells = 1 + (n_frac * 2.0 * t as f64) as usize;
        let tape = Tape::new();
        let w = tape.constant(Tensor::vector(weights.clone()));
        let ones = tape.constant(Tensor::full(&[t, 1], 1.0));
        let out = integrate_and_fire(w, ones, cells).unwrap().value();
        let total: f64 = weights.iter().sum();
        prop_assert!((out.sum() - total.min(cells as f64)).abs() < 1e-9);
        for u in 0..cells {
            let full = ((u + 1) as f64) <= total;
            prop_assert!(out.row(u)[0] <= 1.0 + 1e-12);
            if full {
                prop_assert!((out.row(u)[0] - 1.0).abs() < 1e-9);
            }
        }
    }

    /// A frame never contributes to a cell earlier than one it already fed:
    /// the alignment is monotonic in both axes.
    #[test]
    fn alignment_is_monotonic(weights in prop::collection::vec(0.0f64..1.5, 1..20), cells in 1usize..10) {
        let t = weights.len();
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(weights)).cif_assign(cells).unwrap().value();
        let mut last_cell = 0;
        for frame in 0..t {
            let touched: Vec<usize> = (0..cells).filter(|&u| a.at(u, frame) > 0.0).collect();
            if let (Some(&first), Some(&last)) = (touched.first(), touched.last()) {
                prop_assert!(first >= last_cell);
                prop_assert_eq!(last - first + 1, touched.len());
                last_cell = last;
            }
        }
    }
}
