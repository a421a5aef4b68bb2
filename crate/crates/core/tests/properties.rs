use proptest::prelude::*;
use stos_core::linalg::{is_lower_triangular, matrix_power, spectral_norm};
use stos_core::spatial::{build_lollipop, build_ring};
use stos_core::temporal::{build_causal, build_dilated, layer_product, power, row_normalize};

fn sizes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..24).prop_flat_map(|t| (Just(t), 1..=t))
}

proptest! {
    #[test]
    fn causal_powers_stay_lower_triangular((t, p) in sizes(), l in 1usize..6) {
        let r = build_causal(t, p, None).unwrap();
        let m = power(&r, l);
        prop_assert!(is_lower_triangular(&m));
        prop_assert!(m.iter().all(|&v| v >= 0.0));
        // the receptive field of l layers spans l (P - 1) steps
        let reach = (l * (p - 1)).min(t - 1);
        prop_assert!(m[[reach, 0]] > 0.0);
        if reach + 1 < t {
            prop_assert_eq!(m[[reach + 1, 0]], 0.0);
        }
    }

    #[test]
    fn normalized_powers_are_row_stochastic((t, p) in sizes(), l in 1usize..40) {
        let rn = row_normalize(&build_causal(t, p, None).unwrap()).unwrap();
        let m = power(&rn, l);
        for row in m.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dilated_stack_matches_explicit_product(t in 2usize..20, p in 2usize..4, layers in 1usize..5) {
        let ops: Vec<_> = (1..=layers).map(|l| build_dilated(t, p, l, usize::MAX).unwrap()).collect();
        let product = layer_product(&ops).unwrap();
        let mut expected = ops[0].entries().clone();
        for op in &ops[1..] {
            expected = expected.dot(op.entries());
        }
        prop_assert_eq!(product, expected);
    }

    #[test]
    fn spectral_norm_is_submultiplicative((t, p) in sizes(), l in 1usize..4) {
        let r = build_causal(t, p, None).unwrap();
        let single = spectral_norm(r.entries().view()).unwrap();
        let stacked = spectral_norm(matrix_power(r.entries(), l).view()).unwrap();
        prop_assert!(stacked <= single.powi(l as i32) * (1.0 + 1e-9));
    }

    #[test]
    fn ring_and_lollipop_diameters(n in 3usize..40, clique in 2usize..10, path in 1usize..10) {
        prop_assert_eq!(build_ring(n).unwrap().diameter(), Some(n / 2));
        prop_assert_eq!(build_lollipop(clique, path).unwrap().diameter(), Some(path + 1));
    }
}
