mod common;

use proptest::prelude::*;

use common::*;
use rrhte::baselines::{fit_method, Method};
use rrhte::model_selection::{cross_validate, cv_loss, kfold_split, CvGrid};
use rrhte::weights::split_weights;
use rrhte::{fit, FitConfig, PropensitySource};

#[test]
fn heldout_loss_is_the_weighted_residual_sum() {
    let train = random_instance(1, 80, 3, 2);
    let test = random_instance(2, 30, 3, 2);
    let (model, _) = fit(&train.d, &train.a, &FitConfig { rank: 1, ..FitConfig::default() }).unwrap();
    let expected = weighted_rss(&test.d, &test.a.a, &model.gamma());
    let got = cv_loss(&model, &test.d, &test.a).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected);
}

#[test]
fn fold_losses_match_a_naive_loop() {
    let inst = random_instance(3, 90, 3, 3);
    let lmax = rrhte::solver::lambda_max(&inst.d, &inst.a).unwrap();
    let grid = CvGrid {
        lambdas: vec![0.01 * lmax, 0.3 * lmax],
        phis: vec![f64::INFINITY],
        ranks: vec![1, 2],
        folds: 3,
        seed: 4,
    };
    let cfg = FitConfig::default();
    let cv = cross_validate(&inst.d, PropensitySource::Known, &grid, Method::Wmcmrrr, &cfg).unwrap();
    let assignment = kfold_split(inst.d.t(), 3, 4).unwrap();
    assert_eq!(cv.fold_assignment, assignment);
    for (p, h) in grid.points().iter().enumerate() {
        let mut total = 0.0;
        for fold in 0..3 {
            let train_rows: Vec<usize> = (0..inst.d.n()).filter(|&i| assignment[i] != fold).collect();
            let test_rows: Vec<usize> = (0..inst.d.n()).filter(|&i| assignment[i] == fold).collect();
            let train = inst.d.subset(&train_rows).unwrap();
            let test = inst.d.subset(&test_rows).unwrap();
            let (a_train, a_test) = split_weights(PropensitySource::Known, &train, &test).unwrap();
            let m = fit_method(Method::Wmcmrrr, &train, &a_train, *h, &cfg).unwrap();
            let loss = weighted_rss(&test, &a_test.a, &m.gamma);
            assert!((cv.per_fold_loss[p][fold] - loss).abs() <= 1e-9 * loss, "point {p} fold {fold}");
            total += loss;
        }
        assert!((cv.mean_loss[p] - total / 3.0).abs() <= 1e-9 * total);
    }
}

#[test]
fn penalty_is_chosen_large_for_pure_noise() {
    // outcomes unrelated to the effect design
    let inst = random_instance(5, 120, 4, 2);
    let y = normal_matrix(&mut rng(6), 120, 2);
    let d = rrhte::Dataset::from_parts(inst.d.x().clone(), y, inst.d.t().to_vec(), None).unwrap();
    let a = rrhte::rct_weights(d.n());
    let lmax = rrhte::solver::lambda_max(&d, &a).unwrap();
    let grid = CvGrid {
        lambdas: vec![1e-4 * lmax, 1.5 * lmax],
        phis: vec![f64::INFINITY],
        ranks: vec![1],
        folds: 5,
        seed: 1,
    };
    let cv = cross_validate(&d, PropensitySource::RctHalf, &grid, Method::Wmcm, &FitConfig::default()).unwrap();
    assert_eq!(cv.best.lambda, grid.lambdas[1], "losses {:?}", cv.mean_loss);
}

#[test]
fn grid_rejects_bad_fold_counts() {
    let inst = random_instance(7, 20, 2, 2);
    let grid = CvGrid { lambdas: vec![0.0], phis: vec![f64::INFINITY], ranks: vec![1], folds: 11, seed: 0 };
    assert!(cross_validate(&inst.d, PropensitySource::Known, &grid, Method::Wmcm, &FitConfig::default()).is_err());
    let grid = CvGrid { folds: 1, ..grid };
    assert!(cross_validate(&inst.d, PropensitySource::Known, &grid, Method::Wmcm, &FitConfig::default()).is_err());
}

#[test]
fn selection_is_reproducible() {
    let inst = random_instance(8, 80, 3, 2);
    let grid = CvGrid::default_for(Method::Wmcmr4, &inst.d, &inst.a, 17).unwrap();
    let grid = CvGrid {
        lambdas: grid.lambdas[..3].to_vec(),
        phis: grid.phis[..2].to_vec(),
        ranks: vec![1, 2],
        ..grid
    };
    let cfg = FitConfig::default();
    let one = cross_validate(&inst.d, PropensitySource::Known, &grid, Method::Wmcmr4, &cfg).unwrap();
    let two = cross_validate(&inst.d, PropensitySource::Known, &grid, Method::Wmcmr4, &cfg).unwrap();
    assert_eq!(one, two);
}

fn labels() -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY, 10..80).prop_filter_map("both arms", |bits| {
        let t: Vec<i8> = bits.iter().map(|&b| if b { 1 } else { -1 }).collect();
        let treated = t.iter().filter(|&&v| v == 1).count();
        (treated >= 5 && t.len() - treated >= 5).then_some(t)
    })
}

proptest! {
    #[test]
    fn folds_are_balanced_within_each_arm(t in labels(), folds in 2usize..5, seed in any::<u64>()) {
        let f = kfold_split(&t, folds, seed).unwrap();
        prop_assert_eq!(f.len(), t.len());
        let sizes: Vec<usize> = (0..folds).map(|k| f.iter().filter(|&&v| v == k).count()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for arm in [1i8, -1] {
            let per: Vec<usize> = (0..folds)
                .map(|k| (0..t.len()).filter(|&i| f[i] == k && t[i] == arm).count())
                .collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(f, kfold_split(&t, folds, seed).unwrap());
    }

    #[test]
    fn mean_loss_is_the_fold_average(seed in 0u64..20) {
        let inst = random_instance(100 + seed, 40, 2, 2);
        let grid = CvGrid { lambdas: vec![0.0, 1.0], phis: vec![f64::INFINITY], ranks: vec![1], folds: 4, seed };
        let cv = cross_validate(&inst.d, PropensitySource::Known, &grid, Method::Wmcm, &FitConfig::default()).unwrap();
        for (mean, per) in cv.mean_loss.iter().zip(&cv.per_fold_loss) {
            let avg = per.iter().sum::<f64>() / per.len() as f64;
            prop_assert!((mean - avg).abs() <= 1e-12 * avg.abs());
        }
        let best = cv.points().iter().position(|h| *h == cv.best).unwrap();
        let min = cv.mean_loss.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(cv.mean_loss[best] <= min * (1.0 + 1e-9));
    }
}

#[test]
fn stratified_split_keeps_both_arms_in_small_folds() {
    let t: Vec<i8> = (0..20).map(|i| if i < 6 { 1 } else { -1 }).collect();
    let f = kfold_split(&t, 5, 9).unwrap();
    for k in 0..5 {
        assert!((0..20).any(|i| f[i] == k && t[i] == -1));
    }
    assert_eq!(f.iter().filter(|&&v| v == 0).count(), 4);
}

#[test]
fn unused_axes_collapse() {
    let grid = CvGrid { lambdas: vec![0.1, 1.0], phis: vec![1.0, 2.0], ranks: vec![1, 2, 3], folds: 3, seed: 0 };
    let g = grid.collapsed_for(Method::Wmcm);
    assert_eq!(g.points().len(), 2);
    assert!(g.points().iter().all(|h| h.phi.is_infinite() && h.rank == 1));
    assert_eq!(grid.collapsed_for(Method::Wmcmr4).points().len(), 12);
    assert_eq!(grid.collapsed_for(Method::Wmcmrrr).points().len(), 6);
}
