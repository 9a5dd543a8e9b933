mod common;

use mslca::block::{sym_eig_matrix, MatrixPower};
use mslca::population::{build_t, cca_equivalence, verify_constraints, DEFAULT_GROUP_TOL};
use mslca::{solve_mslca, BlockStructure, CovarianceModel, Dataset};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrum_matches_cholesky_pencil(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = common::random_dims(&mut rng, 8);
        let model = common::random_model(&mut rng, &dims);
        let sol = solve_mslca(&model, DEFAULT_GROUP_TOL).unwrap();
        let oracle = common::pencil_spectrum(model.v().entries(), &dims);
        for (a, b) in sol.rho.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_solves_generalized_problem(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = common::random_dims(&mut rng, 8);
        let model = common::random_model(&mut rng, &dims);
        let sol = solve_mslca(&model, DEFAULT_GROUP_TOL).unwrap();
        let v = model.v().entries();
        let phi = common::block_diag(
            &(0..dims.len()).map(|k| model.block(k, k)).collect::<Vec<_>>(),
        );
        let psi = v - &phi;
        for j in 0..sol.q() {
            let a = sol.alpha.column(j);
            let resid = &psi * a - &phi * a * sol.rho[j];
            prop_assert!(resid.amax() < 1e-9 * (1.0 + v.amax()));
        }
        let c = verify_constraints(&model, &sol.alpha);
        prop_assert!(c.normalization < 1e-9 && c.orthogonality < 1e-9);
    }

    #[test]
    fn whitened_model_has_same_spectrum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = common::random_dims(&mut rng, 8);
        let model = common::random_model(&mut rng, &dims);
        let w = common::cholesky_whitened(model.v().entries(), &dims);
        let wm = CovarianceModel::new(model.structure().clone(), w).unwrap();
        prop_assert!(wm.is_whitened(1e-12));
        let a = solve_mslca(&model, DEFAULT_GROUP_TOL).unwrap();
        let b = solve_mslca(&wm, DEFAULT_GROUP_TOL).unwrap();
        prop_assert!((&a.rho - &b.rho).amax() < 1e-9);
    }

    #[test]
    fn t_has_zero_diagonal_blocks_and_trace(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = common::random_dims(&mut rng, 8);
        let model = common::random_model(&mut rng, &dims);
        let t = build_t(&model).unwrap();
        for k in 0..dims.len() {
            prop_assert!(t.block(k, k).amax() == 0.0);
        }
        prop_assert!(t.is_symmetric());
        let eig = sym_eig_matrix(t.entries()).unwrap();
        prop_assert!(eig.eigenvalues.sum().abs() < 1e-10);
    }

    #[test]
    fn two_block_cca(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::random_model(&mut rng, &[3, 2]);
        let eq = cca_equivalence(&model, DEFAULT_GROUP_TOL).unwrap();
        prop_assert!(eq.spectrum_error < 1e-9);
        prop_assert!(eq.pairing_error < 1e-9);
        prop_assert!(eq.block_norm_error < 1e-9);
        // classical CCA from the Cholesky route
        let w = common::cholesky_whitened(model.v().entries(), &[3, 2]);
        let s = w.view((0, 3), (3, 2)).clone_owned();
        let sv = s.svd(false, false).singular_values;
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in eq.canonical_correlations.iter().zip(&sv) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn block_power_names_block() {
    let s = BlockStructure::new(vec![1, 2]).unwrap();
    let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    let err = CovarianceModel::new(s, v).unwrap_err();
    assert!(err.to_string().contains("block 2"), "{err}");
}

#[test]
fn dataset_rows_keep_order() {
    let s = BlockStructure::new(vec![1, 1]).unwrap();
    let d = Dataset::new(s, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
    assert_eq!(d.row(1).values().as_slice(), &[3.0, 4.0]);
    let model = CovarianceModel::new(
        BlockStructure::new(vec![1, 1]).unwrap(),
        DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 9.0]),
    )
    .unwrap();
    let r = model.block_power(1, MatrixPower::InverseSqrt).unwrap();
    assert!((r[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
}
