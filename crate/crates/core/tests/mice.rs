use covmode::mice::screening_models;
use covmode::{
    mask_mcar, mice_impute, simulate_spatial, stream_rng, FcsConfig, Mask, MaskedBlock, Matrix, SpatialSimConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn spatial_block(seed: u64, p: usize) -> MaskedBlock {
    let cfg = SpatialSimConfig { n: 50, grid: vec![5, 5], p, strong_slope_cols: 3, ..SpatialSimConfig::default() };
    let mut rng = stream_rng(seed, 0);
    let (y, x) = simulate_spatial(&cfg, &mut rng).unwrap();
    mask_mcar(&mut rng, &y, &x, 0.25).unwrap().block
}

/// With one block column the FCS draw for a missing cell is the posterior
/// predictive of a normal regression on the design: Student-t with
/// `df = n_obs − k`, center `x*ᵀβ̂` and variance
/// `s²(1 + x*ᵀ(DᵀD)⁻¹x*)·df/(df − 2)`.
#[test]
fn single_column_matches_predictive_t() {
    let n = 24;
    let mut rng = stream_rng(11, 0);
    let age: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let y = Matrix::from_fn(n, 1, |i, _| 0.3 + 1.2 * age[i] + 0.5 * rng.sample::<f64, _>(StandardNormal));
    let x = Matrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { age[i] });
    let missing = [3usize, 17];
    let observed: Vec<bool> = (0..n).map(|i| !missing.contains(&i)).collect();
    let block = MaskedBlock::new(y.clone(), Mask::new(n, 1, observed).unwrap(), x.clone()).unwrap();

    let m = 20_000;
    let ens = mice_impute(&block, &FcsConfig { m, iters: 1, max_screen: 0, seed: 5 }).unwrap();

    let rows: Vec<usize> = (0..n).filter(|i| !missing.contains(i)).collect();
    let d = DMatrix::from_fn(rows.len(), 2, |r, c| x[(rows[r], c)]);
    let t = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[(i, 0)]));
    let dtd_inv = (d.transpose() * &d).try_inverse().unwrap();
    let beta = &dtd_inv * d.transpose() * &t;
    let resid = &t - &d * &beta;
    let df = (rows.len() - 2) as f64;
    let s2 = resid.norm_squared() / df;

    for &i in &missing {
        let xs = DVector::from_vec(vec![1.0, age[i]]);
        let center = xs.dot(&beta);
        let var = s2 * (1.0 + (xs.transpose() * &dtd_inv * &xs)[(0, 0)]) * df / (df - 2.0);
        let v: Vec<f64> = ens.draws.iter().map(|d| d[(i, 0)]).collect();
        let mean = v.iter().sum::<f64>() / m as f64;
        let emp = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        let se = (var / m as f64).sqrt();
        assert!((mean - center).abs() <= 4.0 * se, "row {i}: mean {mean} vs {center}");
        assert!((emp / var - 1.0).abs() <= 0.06, "row {i}: var {emp} vs {var}");
    }
}

#[test]
fn screening_respects_cap_and_ranking() {
    let block = spatial_block(3, 10);
    let (n, p, k) = (block.n(), block.p(), block.k());
    for cap in [0, 2, 4, 9] {
        for model in screening_models(&block, cap) {
            let j = model.target;
            let bound = cap.min(block.mask().observed_in_col(j) - k - 2);
            assert_eq!(model.block_predictors.len(), bound);
            assert!(!model.block_predictors.contains(&j));

            // Independent pairwise-complete correlation ranking.
            let r = |c: usize| {
                let rows: Vec<usize> =
                    (0..n).filter(|&i| block.mask().is_observed(i, j) && block.mask().is_observed(i, c)).collect();
                let a = DVector::from_iterator(rows.len(), rows.iter().map(|&i| block.y()[(i, j)]));
                let b = DVector::from_iterator(rows.len(), rows.iter().map(|&i| block.y()[(i, c)]));
                let (a, b) = (a.add_scalar(-a.mean()), b.add_scalar(-b.mean()));
                (a.dot(&b) / (a.norm() * b.norm())).abs()
            };
            let weakest_in = model.block_predictors.iter().map(|&c| r(c)).fold(f64::INFINITY, f64::min);
            for c in (0..p).filter(|c| *c != j && !model.block_predictors.contains(c)) {
                assert!(r(c) <= weakest_in + 1e-12, "column {j}: left out {c}");
            }
        }
    }
}

#[test]
fn imputations_vary_and_are_seeded() {
    let block = spatial_block(4, 8);
    let cfg = FcsConfig { m: 6, iters: 5, max_screen: 4, seed: 21 };
    let a = mice_impute(&block, &cfg).unwrap();
    let b = mice_impute(&block, &cfg).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_ne!(a.draws, mice_impute(&block, &FcsConfig { seed: 22, ..cfg }).unwrap().draws);
    assert!(a.respects_observed(&block));
    for (i, j) in block.mask().missing_cells() {
        let v: Vec<f64> = a.draws.iter().map(|d| d[(i, j)]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() > 0.0, "cell ({i},{j})");
    }
}

#[test]
fn collinear_predictors_are_tolerated() {
    let mut block = spatial_block(5, 6);
    let mut y = block.y().clone();
    for i in 0..y.nrows() {
        y[(i, 5)] = 2.0 * y[(i, 4)];
    }
    let mut mask = block.mask().clone();
    for i in 0..y.nrows() {
        mask.set(i, 5, mask.is_observed(i, 4));
    }
    block = MaskedBlock::new(y, mask, block.x().clone()).unwrap();
    let ens = mice_impute(&block, &FcsConfig { m: 3, iters: 3, max_screen: 5, seed: 1 }).unwrap();
    assert!(ens.draws.iter().all(|d| d.is_finite()));
}

#[test]
fn too_few_observed_is_an_error() {
    let y = Matrix::from_fn(6, 2, |i, j| (i + j) as f64);
    let mut mask = Mask::all_observed(6, 2);
    for i in 1..6 {
        mask.set(i, 1, false);
    }
    let block = MaskedBlock::new(y, mask, Matrix::from_fn(6, 1, |_, _| 1.0)).unwrap();
    assert!(mice_impute(&block, &FcsConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn observed_cells_are_kept(seed in 0u64..1000, p in 2usize..6, rate in 0.05f64..0.4) {
        let mut rng = stream_rng(seed, 1);
        let y = Matrix::from_fn(20, p, |_, _| rng.sample(StandardNormal));
        let x = Matrix::from_fn(20, 1, |_, _| 1.0);
        let block = mask_mcar(&mut rng, &y, &x, rate).unwrap().block;
        let ens = mice_impute(&block, &FcsConfig { m: 2, iters: 2, max_screen: 3, seed }).unwrap();
        prop_assert!(ens.respects_observed(&block));
        prop_assert!(ens.draws.iter().all(|d| d.is_finite()));
    }
}
