mod common;

use common::*;
use ehmfm::eval::*;
use ehmfm::simgen::{generate, true_params, ScenarioVariant, SimScenario};
use ehmfm::{FitConfig, Mode, ModelParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn flat_mu(p: &ModelParams) -> Vec<f64> {
    p.mu.iter().flat_map(|m| m.iter().copied()).collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (s, &e) in perm.iter().enumerate() {
        inv[e] = s;
    }
    inv
}

#[test]
fn relabeled_truth_recovers_exactly() {
    let (_, truth) = generate(&SimScenario::baseline(Mode::Discrete).with_subjects(30), 6).unwrap();
    for perm in permutations(3) {
        // estimated state s is true state perm[s]
        let est = truth.params.permuted(&perm);
        let inv = inverse(&perm);
        let decoded: Vec<Vec<usize>> = truth.states.iter().map(|p| p.iter().map(|&s| inv[s]).collect()).collect();
        let rep = recovery_report(&est, &decoded, &truth.params, &truth.states, false, 0).unwrap();
        assert_eq!(rep.permutation, inv);
        assert_eq!((rep.aad_pi, rep.aad_mu, rep.aad_lambda, rep.aad_psi, rep.aad_b), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(rep.misclassification, 0.0);
        assert!(rep.b_error.theta().iter().all(|&v| v == 0.0));
        let bias = transition_bias(&[rep.clone(), rep]);
        assert!(bias.iter().all(|b| b.bias.mean == 0.0 && b.bias.sd == 0.0));
    }
}

#[test]
fn rotated_loadings_need_procrustes() {
    let truth = true_params(ScenarioVariant::Baseline, Mode::Discrete).unwrap();
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let rot = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
    let mut est = truth.clone();
    for l in est.lambda.iter_mut() {
        *l = &*l * &rot;
    }
    let paths = vec![vec![0, 1, 2, 0]];
    let plain = recovery_report(&est, &paths, &truth, &paths, false, 0).unwrap();
    let rotated = recovery_report(&est, &paths, &truth, &paths, true, 0).unwrap();
    assert!(plain.aad_lambda > 0.05);
    assert!(rotated.aad_lambda < 1e-12);
}

fn tiny_panel() -> ehmfm::PanelDataset {
    generate(&SimScenario::baseline(Mode::Discrete).with_subjects(30), 12).unwrap().0
}

#[test]
fn single_candidate_wins() {
    let data = tiny_panel();
    let rep = select_model(&data, &[2], &[1], &FitConfig::new(Mode::Discrete, 2, 1), &[0]).unwrap();
    assert_eq!(rep.candidates.len(), 1);
    assert_eq!(rep.best_aic, Some((2, 1)));
    assert_eq!(rep.best_bic, Some((2, 1)));
    assert_eq!(rep.failures(), 0);
}

#[test]
fn winner_ignores_grid_order() {
    let data = tiny_panel();
    let base = FitConfig::new(Mode::Discrete, 2, 1);
    let a = select_model(&data, &[2, 3], &[1, 2], &base, &[0]).unwrap();
    let b = select_model(&data, &[3, 2], &[2, 1], &base, &[0]).unwrap();
    assert_eq!(a.best_aic, b.best_aic);
    assert_eq!(a.best_bic, b.best_bic);
    assert_eq!(a.complexity_table(), b.complexity_table());
    let best = a.best_bic.unwrap();
    let fits: Vec<_> = a.candidates.iter().filter_map(|c| c.outcome.as_ref().ok().map(|f| ((c.states, c.factors), f.bic))).collect();
    let min = fits.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
    assert_eq!(fits.iter().find(|f| f.0 == best).unwrap().1, min);
}

#[test]
fn orthonormal_loadings_standardize_within_unit_rows() {
    let mut r = rng(19);
    let a = DMatrix::from_fn(8, 3, |_, _| normal(&mut r));
    let q = a.qr().q();
    let psi = DVector::from_element(8, 1e-6);
    // the orthogonal stage preserves row norms; the oblique pattern need not
    let vm = varimax(&q, 1e-8, 500).unwrap();
    for (l, row) in vm.loadings.row_iter().enumerate() {
        let sd = (q.row(l).norm_squared() + psi[l]).sqrt();
        assert!(row.norm() / sd <= 1.0 + 1e-6, "{}", row.norm() / sd);
    }
    let out = promax_standardize(&q, &psi, 4.0).unwrap();
    assert!(out.loadings.iter().all(|v| v.is_finite()));
}

#[test]
fn baseline_loadings_keep_salient_pattern() {
    let truth = true_params(ScenarioVariant::Baseline, Mode::Discrete).unwrap();
    for (lam, j) in truth.lambda.iter().zip(0..) {
        let out = promax_standardize(lam, &truth.psi, 4.0).unwrap();
        assert_eq!(out.loadings.shape(), lam.shape());
        assert!(out.salient.iter().any(|&b| b), "state {j}");
        assert!(out.loadings.column_iter().all(|c| c.sum() >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alignment_removes_label_sensitivity(seed in 0u64..10_000, states in 2usize..=4, pick in 0usize..24) {
        let mut r = rng(seed);
        let truth = random_params(&mut r, states, 1, 3, 1);
        let perms = permutations(states);
        let perm = &perms[pick % perms.len()];
        let est = truth.permuted(perm);
        let inv = inverse(perm);
        let paths: Vec<Vec<usize>> = (0..4).map(|i| (0..5).map(|t| (i + t) % states).collect()).collect();
        let decoded: Vec<Vec<usize>> = paths.iter().map(|p| p.iter().map(|&s| inv[s]).collect()).collect();
        let raw = aad(&flat_mu(&est), &flat_mu(&truth)).unwrap();
        let is_identity = perm.iter().enumerate().all(|(i, &p)| i == p);
        prop_assert_eq!(raw == 0.0, is_identity);
        let rep = recovery_report(&est, &decoded, &truth, &paths, false, seed).unwrap();
        prop_assert_eq!(rep.aad_mu, 0.0);
        prop_assert_eq!(rep.misclassification, 0.0);
    }

    #[test]
    fn varimax_criterion_never_decreases(seed in 0u64..10_000, k in 2usize..=4) {
        let mut r = rng(seed);
        let lam = DMatrix::from_fn(10, k, |_, _| normal(&mut r));
        let rot = varimax(&lam, 1e-8, 200).unwrap();
        for w in rot.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10);
        }
        let back = &rot.loadings * rot.rotation.transpose();
        prop_assert!((back - &lam).amax() < 1e-9);
    }
}
