mod common;

use cellspan::eval::{best_worst_median_reference, reference_sweep, rmse, sample_references, PairwiseTable};
use cellspan::featurize::inter_diff;
use cellspan::model::{linear_optimality_check, Encoder};
use cellspan::train::{init_model, TrainSet};
use cellspan::{BatModel, Combine, FeatureMap, FeaturizeConfig, LossWeights};
use common::{random_map, rng, small_geometry};
use rand::Rng;

fn fixture(seed: u64) -> (BatModel, Vec<FeatureMap>, TrainSet) {
    let g = small_geometry();
    let mut r = rng(seed);
    let pool_maps = (0..7).map(|i| random_map(&format!("p{i}"), &g, &mut r)).collect();
    let lifetimes = (0..7).map(|_| r.random_range(200.0..900.0)).collect();
    let pool = TrainSet::new(pool_maps, lifetimes).unwrap();
    let targets = (0..4).map(|i| random_map(&format!("t{i}"), &g, &mut r)).collect();
    let f = FeaturizeConfig {
        early_cycles: g.height,
        grid_points: g.width,
        intra_reference_cycle: 2,
        ..Default::default()
    };
    (init_model(&pool, g, &f, seed).unwrap(), targets, pool)
}

#[test]
fn table_agrees_with_direct_prediction() {
    let (model, targets, pool) = fixture(1);
    let table = PairwiseTable::build(&model, &targets, &pool, true).unwrap();
    for combine in [Combine::Median, Combine::Mean] {
        for alpha in [0.0, 0.3, 1.0] {
            let w = LossWeights { lambda: 1.0, alpha };
            for (t, target) in targets.iter().enumerate() {
                let refs = sample_references(pool.len(), 3, 9, t);
                let anchors: Vec<(&FeatureMap, f64)> = refs.iter().map(|&i| (&pool.maps[i], pool.lifetimes[i])).collect();
                let direct = model.predict(target, &anchors, &w, combine).unwrap();
                let tabled = table.predict(t, &refs, alpha, combine);
                assert!((direct.blended - tabled).abs() <= 1e-9 * tabled.abs(), "{} vs {tabled}", direct.blended);
            }
        }
    }
}

#[test]
fn median_prediction_ignores_reference_order() {
    let (model, targets, pool) = fixture(2);
    let w = LossWeights::default();
    let mut anchors: Vec<(&FeatureMap, f64)> = pool.maps.iter().zip(pool.lifetimes.iter().copied()).collect();
    let a = model.predict(&targets[0], &anchors, &w, Combine::Median).unwrap();
    anchors.reverse();
    anchors.swap(1, 4);
    let b = model.predict(&targets[0], &anchors, &w, Combine::Median).unwrap();
    assert_eq!(a.blended, b.blended);
}

#[test]
fn zero_inter_encoder_returns_reference_lifetimes() {
    let (mut model, targets, pool) = fixture(3);
    model.encoder_inter = Encoder::zeros(&model.geometry).unwrap();
    let table = PairwiseTable::build(&model, &targets, &pool, true).unwrap();
    for row in &table.per_reference {
        assert_eq!(row, &pool.lifetimes);
    }
    let mut sorted = pool.lifetimes.clone();
    sorted.sort_by(f64::total_cmp);
    let truth = vec![sorted[3]; targets.len()];
    let extremes = best_worst_median_reference(&table, &truth).unwrap();
    for e in &extremes {
        assert_eq!(e.best, 0.0);
        assert_eq!(e.combined, 0.0);
        assert_eq!(e.worst, (sorted[0] - sorted[3]).abs().max(sorted[6] - sorted[3]));
        assert!(e.best <= e.median && e.median <= e.worst);
    }
    // The whole pool always gives the pool median, whatever the seed.
    let sweep = reference_sweep(&table, &truth, &[1, 7], &[0, 1, 2, 3], 0.0, Combine::Median).unwrap();
    assert_eq!(sweep[1].mean_rmse, 0.0);
    assert_eq!(sweep[1].std_rmse, 0.0);
    assert!(sweep[0].std_rmse >= sweep[1].std_rmse);
}

#[test]
fn inter_diff_is_antisymmetric() {
    let g = small_geometry();
    let mut r = rng(4);
    for _ in 0..100 {
        let a = random_map("a", &g, &mut r);
        let b = random_map("b", &g, &mut r);
        let ab = inter_diff(&a, &b, 100.0).unwrap();
        let ba = inter_diff(&b, &a, 100.0).unwrap();
        assert!(ab.data().iter().zip(ba.data()).all(|(x, y)| (x + y).abs() <= 1e-15));
        assert!(inter_diff(&a, &a, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

/// Centered random design of `n` rows and `d` columns with labels.
fn centered_instance(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng(seed);
    let mut x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let mut y: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
    for j in 0..d {
        let m = x.iter().map(|row| row[j]).sum::<f64>() / n as f64;
        x.iter_mut().for_each(|row| row[j] -= m);
    }
    let m = y.iter().sum::<f64>() / n as f64;
    y.iter_mut().for_each(|v| *v -= m);
    (x, y)
}

/// Gradient of the pairwise objective summed over every ordered pair.
pub fn brute_force_gradient(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i == j {
                continue;
            }
            let dx: Vec<f64> = x[i].iter().zip(&x[j]).map(|(a, b)| a - b).collect();
            let e = dx.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - (y[i] - y[j]);
            g.iter_mut().zip(&dx).for_each(|(gk, d)| *gk += 2.0 * e * d);
        }
    }
    g
}

#[test]
fn least_squares_weights_are_stationary_for_all_pairs() {
    for seed in 0..10 {
        let (x, y) = centered_instance(seed, 20, 5);
        let check = linear_optimality_check(&x, &y).unwrap();
        assert!(check.is_stationary(), "seed {seed}: {}", check.gradient_norm);
        let brute = brute_force_gradient(&x, &y, &check.weights);
        let norm = brute.iter().map(|v| v * v).sum::<f64>().sqrt();
        let wn = check.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-6 * (1.0 + wn), "seed {seed}: {norm}");
        // Away from w* the two gradient routes must still agree.
        let moved: Vec<f64> = check.weights.iter().map(|w| w + 0.1).collect();
        let g = brute_force_gradient(&x, &y, &moved);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() > 1.0);
    }
}

#[test]
fn hand_sized_linear_instance() {
    let check = linear_optimality_check(&[vec![-1.0], vec![0.0], vec![1.0]], &[-2.0, 0.0, 2.0]).unwrap();
    assert!((check.weights[0] - 2.0).abs() < 1e-12);
    assert!(check.gradient_norm < 1e-12);
    assert!(linear_optimality_check(&[vec![1.0, 1.0], vec![-1.0, -1.0]], &[1.0, -1.0]).is_err());
    assert!(linear_optimality_check(&[vec![1.0], vec![2.0]], &[1.0, -1.0]).is_err());
}

#[test]
fn rmse_of_exact_predictions_is_zero() {
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
}
