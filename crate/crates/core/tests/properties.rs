mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::*;
use rrhte::metrics::{auc, bias, descending_ranks, mse, spearman};
use rrhte::types::orthonormality_deviation;
use rrhte::weights::compute_weights;
use rrhte::{fit, objective, FitConfig};

fn distinct_scores(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, len).prop_filter("distinct", |v| {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[0] != w[1])
    })
}

/// Pairwise count with half credit for ties.
fn auc_by_pairs(score: &[f64], truth: &[f64]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..score.len() {
        for j in 0..score.len() {
            if truth[i] > 0.0 && truth[j] <= 0.0 {
                pairs += 1.0;
                if score[i] > score[j] {
                    wins += 1.0;
                } else if score[i] == score[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(
        score in prop::collection::vec(-3i32..3, 2..40),
        truth in prop::collection::vec(-5.0f64..5.0, 40),
    ) {
        let score: Vec<f64> = score.into_iter().map(f64::from).collect();
        let truth = &truth[..score.len()];
        let got = auc(&DVector::from_vec(score.clone()), &DVector::from_row_slice(truth)).unwrap();
        match (got, auc_by_pairs(&score, truth)) {
            (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-12),
            (g, w) => prop_assert_eq!(g, w),
        }
    }

    #[test]
    fn spearman_without_ties_is_rank_pearson(pair in (3usize..30).prop_flat_map(|n| (distinct_scores(n..n + 1), distinct_scores(n..n + 1)))) {
        let (a, b) = pair;
        let (va, vb) = (DVector::from_vec(a.clone()), DVector::from_vec(b.clone()));
        let rho = spearman(&va, &vb).unwrap();
        let want = pearson(&descending_ranks(&va), &descending_ranks(&vb));
        prop_assert!((rho - want).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn metrics_ignore_the_order_of_test_rows(seed in any::<u64>(), n in 3usize..25) {
        let mut r = rng(seed);
        let x = design(&mut r, n, 2);
        let g_hat = normal_matrix(&mut r, 3, 2);
        let g = normal_matrix(&mut r, 3, 2);
        let perm: Vec<usize> = (0..n).rev().collect();
        let xp = DMatrix::from_fn(n, 3, |i, k| x[(perm[i], k)]);
        prop_assert!((mse(&x, &g_hat, &g).unwrap() - mse(&xp, &g_hat, &g).unwrap()).abs() < 1e-12);
        prop_assert!((bias(&x, &g_hat, &g).unwrap() - bias(&xp, &g_hat, &g).unwrap()).abs() < 1e-12);
        let s_hat = &x * &g_hat * DVector::from_element(2, 1.0);
        let s = &x * &g * DVector::from_element(2, 1.0);
        let sp_hat = DVector::from_fn(n, |i, _| s_hat[perm[i]]);
        let sp = DVector::from_fn(n, |i, _| s[perm[i]]);
        prop_assert_eq!(spearman(&s_hat, &s).unwrap(), spearman(&sp_hat, &sp).unwrap());
        prop_assert_eq!(auc(&s_hat, &s).unwrap(), auc(&sp_hat, &sp).unwrap());
    }

    #[test]
    fn bias_never_exceeds_root_mse(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = design(&mut r, 12, 3);
        let (a, b) = (normal_matrix(&mut r, 4, 2), normal_matrix(&mut r, 4, 2));
        prop_assert!(bias(&x, &a, &b).unwrap() <= mse(&x, &a, &b).unwrap().sqrt() + 1e-12);
    }

    #[test]
    fn weights_are_inverse_root_propensities(pi in prop::collection::vec(0.01f64..0.99, 1..30), flips in any::<u32>()) {
        let t: Vec<i8> = (0..pi.len()).map(|i| if flips >> (i % 32) & 1 == 1 { 1 } else { -1 }).collect();
        let w = compute_weights(&t, &DVector::from_vec(pi.clone())).unwrap();
        for i in 0..pi.len() {
            let p = if t[i] == 1 { pi[i] } else { 1.0 - pi[i] };
            prop_assert!((w.a[i] * w.a[i] * p - 1.0).abs() < 1e-12);
            prop_assert!(w.a[i] >= 1.0);
        }
    }

    #[test]
    fn fits_keep_orthonormal_factors_and_descend(seed in 0u64..200, rank in 1usize..=3, lam in 0.0f64..0.5, ph in 0.01f64..1.0) {
        let inst = random_instance(seed, 50, 3, 3);
        let lmax = rrhte::solver::lambda_max(&inst.d, &inst.a).unwrap();
        let pmax = rrhte::solver::phi_max(&inst.d, &inst.a);
        let cfg = FitConfig { rank, lambda_w: lam * lmax, phi_c: ph * pmax, ..FitConfig::default() };
        let (model, trace) = fit(&inst.d, &inst.a, &cfg).unwrap();
        prop_assert!(orthonormality_deviation(model.v()) <= 1e-10);
        prop_assert!(is_non_increasing(&trace.objective_per_outer, 1e-9));
        let gamma = model.gamma();
        prop_assert!((&gamma - model.w() * model.v().transpose()).amax() < 1e-14);
        let value = objective(&model, &inst.d, &inst.a, &cfg).unwrap();
        prop_assert!((value - trace.final_objective()).abs() <= 1e-9 * value.abs());
    }
}

#[test]
fn objective_matches_a_direct_evaluation() {
    let inst = random_instance(77, 40, 2, 3);
    let pmax = rrhte::solver::phi_max(&inst.d, &inst.a);
    let cfg = FitConfig { rank: 2, lambda_w: 0.7, phi_c: 0.3 * pmax, ..FitConfig::default() };
    let (model, _) = fit(&inst.d, &inst.a, &cfg).unwrap();
    let z = signed_design(&inst.d);
    let (w, v, c) = (model.w(), model.v(), model.c());
    let mut total = 0.0;
    for i in 0..inst.d.n() {
        let ai = inst.a.a[i];
        for j in 0..inst.d.q() {
            let mut fit = c[(i, j)];
            for k in 0..inst.d.n_cols() {
                for l in 0..2 {
                    fit += z[(i, k)] * w[(k, l)] * v[(j, l)];
                }
            }
            total += ai * ai * (inst.d.y()[(i, j)] - fit).powi(2);
        }
        total += cfg.phi_c * c.row(i).norm();
    }
    for k in 0..inst.d.n_cols() {
        total += cfg.lambda_w * w.row(k).norm();
    }
    let got = objective(&model, &inst.d, &inst.a, &cfg).unwrap();
    assert!((got - total).abs() <= 1e-10 * total, "{got} vs {total}");
}
