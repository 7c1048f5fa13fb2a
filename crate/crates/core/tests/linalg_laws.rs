use degenhedge::linalg::{min_norm_solve, pseudoinverse, range_projection, rank, DEFAULT_RANK_TOL};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `n x d` matrix of rank `r` as a product of two random factors.
fn low_rank() -> impl Strategy<Value = (DMatrix<f64>, usize)> {
    (1usize..=6, 1usize..=6)
        .prop_flat_map(|(n, d)| (Just(n), Just(d), 0..=n.min(d)))
        .prop_flat_map(|(n, d, r)| {
            (
                prop::collection::vec(-1.0f64..1.0, n * r),
                prop::collection::vec(-1.0f64..1.0, r * d),
                Just((n, d, r)),
            )
        })
        .prop_map(|(a, b, (n, d, r))| {
            if r == 0 {
                return (DMatrix::zeros(n, d), 0);
            }
            (DMatrix::from_vec(n, r, a) * DMatrix::from_vec(r, d, b), r)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn projection_laws((sigma, r) in low_rank()) {
        let p = range_projection(&sigma, DEFAULT_RANK_TOL).unwrap();
        let pm = &p.matrix;
        let st = sigma.transpose();
        prop_assert_eq!(p.rank, r);
        prop_assert!(max_abs(&(pm * pm - pm)) <= 1e-10);
        prop_assert!(max_abs(&(pm - pm.transpose())) <= 1e-10);
        prop_assert!(max_abs(&(pm * &st - &st)) <= 1e-10);
        prop_assert!(max_abs(&(&sigma * pm - &sigma)) <= 1e-10);
    }

    #[test]
    fn penrose_conditions((a, r) in low_rank()) {
        let pi = pseudoinverse(&a, DEFAULT_RANK_TOL).unwrap();
        let scale = pi.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert_eq!(rank(&a, DEFAULT_RANK_TOL).unwrap(), r);
        prop_assert!(max_abs(&(&a * &pi * &a - &a)) <= 1e-9 * scale);
        prop_assert!(max_abs(&(&pi * &a * &pi - &pi)) <= 1e-9 * scale * scale);
        let api = &a * &pi;
        let pia = &pi * &a;
        prop_assert!(max_abs(&(&api - api.transpose())) <= 1e-9 * scale);
        prop_assert!(max_abs(&(&pia - pia.transpose())) <= 1e-9 * scale);
    }

    #[test]
    fn min_norm_solution_has_no_null_component(
        (a, _) in low_rank(),
        seed in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let rhs = DVector::from_fn(a.nrows(), |i, _| seed[i]);
        let sol = min_norm_solve(&a, &rhs, DEFAULT_RANK_TOL).unwrap();
        let row_space = range_projection(&a, DEFAULT_RANK_TOL).unwrap();
        let off = &sol.x - row_space.apply(&sol.x);
        prop_assert!(off.norm() <= 1e-9 * (1.0 + sol.x.norm()));
    }
}
