use covmode::calibrate::{shift_and_scale, MIN_OBSERVED_PER_COLUMN};
use covmode::{
    calibrate_observed_cells, hima_chain, himce_chain, mask_mcar, shared_eb_fit, simulate_spatial, stream_rng,
    ChainConfig, Error, ImputationEnsemble, MaskedBlock, Matrix, PriorSpec, SpatialSimConfig,
};

struct Fixture {
    block: MaskedBlock,
    truth: Matrix,
    hima: ImputationEnsemble,
    himce: ImputationEnsemble,
}

fn fixture(seed: u64) -> Fixture {
    let sim = SpatialSimConfig { n: 80, grid: vec![5, 5], p: 20, strong_slope_cols: 5, ..SpatialSimConfig::default() };
    let mut rng = stream_rng(seed, 0);
    let (y, x) = simulate_spatial(&sim, &mut rng).unwrap();
    let draw = mask_mcar(&mut rng, &y, &x, 0.3).unwrap();
    let block = draw.block;
    let prior = PriorSpec::weak(block.p(), block.k(), 1.0).unwrap();
    let cfg = ChainConfig { m: 20, exact_refresh_max_p: 5, seed, ..ChainConfig::default() };
    let shared = shared_eb_fit(&block, &cfg).unwrap();
    let hima = hima_chain(&block, &prior, &cfg, Some(&shared)).unwrap();
    let himce = himce_chain(&block, &prior, &cfg, Some(&shared)).unwrap();
    Fixture { block, truth: draw.truth, hima, himce }
}

#[test]
fn unbiased_ensemble_is_left_nearly_alone() {
    let f = fixture(3);
    let out = calibrate_observed_cells(&f.himce, &f.hima, &f.block, 0.2, 3).unwrap();
    let rep = out.calibration.as_ref().unwrap();
    for (a, b) in rep.intercepts.iter().zip(&rep.slopes) {
        assert!(a.abs() < 0.1, "intercept {a}");
        assert!((b - 1.0).abs() < 0.2, "slope {b}");
    }
    assert!(rep.heldout_rmse_after <= rep.heldout_rmse_before * 1.02, "{rep:?}");
    assert!(out.respects_observed(&f.block));
}

#[test]
fn injected_shift_is_recovered() {
    let f = fixture(4);
    let base = calibrate_observed_cells(&f.himce, &f.hima, &f.block, 0.2, 4).unwrap();
    let base = base.calibration.as_ref().unwrap();
    let shifted = shift_and_scale(&f.himce, 0.5, 1.0);
    let out = calibrate_observed_cells(&shifted, &f.hima, &f.block, 0.2, 4).unwrap();
    let rep = out.calibration.as_ref().unwrap();
    // Held-out predictions condition on the row's observed cells, so they move
    // by 0.5 times one minus the gain sum; the realized move is the bias change.
    let delta = base.heldout_bias_before - rep.heldout_bias_before;
    assert!(delta > 0.1, "{delta}");
    // Column lines are shrunk toward the pooled line, so the compensation is
    // checked per column for direction and on average for size.
    let p = f.block.p();
    let mut residual = 0.0;
    for j in 0..p {
        let moved = rep.intercepts[j] - base.intercepts[j];
        assert!(moved < 0.0, "column {j}: {moved}");
        residual += moved + delta * rep.slopes[j] * rep.weights[j];
    }
    assert!((residual / p as f64).abs() < 0.25 * delta, "{residual}");
    assert!(rep.heldout_bias_after.abs() <= 0.5 * rep.heldout_bias_before.abs(), "{rep:?}");

    // Withheld cells move back toward the truth as well.
    let err = |e: &ImputationEnsemble| {
        let mean = e.posterior_mean();
        let cells = f.block.mask().missing_cells();
        cells.iter().map(|&(i, j)| f.truth[(i, j)] - mean[(i, j)]).sum::<f64>() / cells.len() as f64
    };
    assert!(err(&out).abs() < 0.5 * err(&shifted).abs());
}

#[test]
fn injected_underdispersion_is_widened() {
    let f = fixture(5);
    let narrow = shift_and_scale(&f.himce, 0.0, 0.5);
    let out = calibrate_observed_cells(&narrow, &f.hima, &f.block, 0.2, 5).unwrap();
    let rep = out.calibration.as_ref().unwrap();
    assert!(rep.scale_accepted, "{rep:?}");
    assert!(rep.scale > 1.0);
    assert!(rep.heldout_cov90_after > rep.heldout_cov90_before);
}

#[test]
fn withheld_truths_are_never_read() {
    let f = fixture(6);
    let a = calibrate_observed_cells(&f.himce, &f.hima, &f.block, 0.2, 6).unwrap();
    // Corrupting the withheld cells of the block's storage changes nothing.
    let mut y = f.block.y().clone();
    for (i, j) in f.block.mask().missing_cells() {
        y[(i, j)] = 1e6;
    }
    let other = MaskedBlock::new(y, f.block.mask().clone(), f.block.x().clone()).unwrap();
    let b = calibrate_observed_cells(&f.himce, &f.hima, &other, 0.2, 6).unwrap();
    assert_eq!(a.draws, b.draws);
}

#[test]
fn sparse_column_is_rejected() {
    let f = fixture(7);
    let n = f.block.n();
    let mut mask = f.block.mask().clone();
    for i in MIN_OBSERVED_PER_COLUMN - 1..n {
        mask.set(i, 0, false);
    }
    let sparse = MaskedBlock::new(f.block.y().clone(), mask.clone(), f.block.x().clone()).unwrap();
    let relabel = |e: &ImputationEnsemble| ImputationEnsemble { mask: mask.clone(), ..e.clone() };
    let err = calibrate_observed_cells(&relabel(&f.himce), &relabel(&f.hima), &sparse, 0.2, 1).unwrap_err();
    assert!(matches!(err, Error::InsufficientObserved { column: 0, .. }), "{err:?}");
}

#[test]
fn holdout_fraction_is_validated() {
    let f = fixture(8);
    for frac in [0.0, 0.6] {
        assert!(calibrate_observed_cells(&f.himce, &f.hima, &f.block, frac, 1).is_err());
    }
}
