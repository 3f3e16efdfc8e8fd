use covmode::diagnostics::{
    diagnose_cells, ks_uniform, marginal_gaps, pit_consistent_coverage, pit_rank_cell, support_violations,
};
use covmode::{diagnose, rubin_pool, stream_rng, CellDraws, ChainConfig, Mask, MaskedBlock, Matrix, PriorSpec};
use num::{BigInt, BigRational, ToPrimitive, Zero};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_cells(l: usize, m: usize, draw_sd: f64, seed: u64) -> Vec<CellDraws> {
    let mut rng = stream_rng(seed, 0);
    (0..l)
        .map(|c| CellDraws {
            row: c,
            col: 0,
            draws: (0..m).map(|_| draw_sd * rng.sample::<f64, _>(StandardNormal)).collect(),
            truth: rng.sample(StandardNormal),
        })
        .collect()
}

fn report(cells: &[CellDraws], seed: u64) -> covmode::DiagnosticsReport {
    diagnose_cells(&mut stream_rng(seed, 9), cells, &[(f64::NEG_INFINITY, f64::INFINITY)], 0.0).unwrap()
}

#[test]
fn pit_is_uniform_under_the_true_law() {
    let rep = report(&gaussian_cells(5000, 20, 1.0, 1), 1);
    assert!(rep.pit_ks <= 0.03, "{}", rep.pit_ks);
    assert!((rep.cov_iqr - 0.5).abs() <= 0.03);
    assert!((rep.cov90 - 0.9).abs() <= 0.02);
    assert!((rep.cov95 - 0.95).abs() <= 0.015);
    assert!((rep.pit_mean - 0.5).abs() <= 0.02);
    assert!((rep.pit_sd - (1.0f64 / 12.0).sqrt()).abs() <= 0.02);
    assert!((rep.p_central - 0.2).abs() <= 0.03);
}

#[test]
fn dispersion_errors_move_coverage_and_gaps() {
    let narrow = report(&gaussian_cells(4000, 20, 0.5, 2), 2);
    let wide = report(&gaussian_cells(4000, 20, 2.0, 2), 2);
    assert!(narrow.cov90 < 0.75 && wide.cov90 > 0.98);
    assert!(narrow.p_central < 0.2 && wide.p_central > 0.2);
    assert!((narrow.sd_gap - 0.5).abs() < 0.05, "{}", narrow.sd_gap);
    assert!((wide.sd_gap - 1.0).abs() < 0.1, "{}", wide.sd_gap);
    assert!(narrow.pit_ks > 0.1 && wide.pit_ks > 0.1);
}

#[test]
fn shifted_draws_show_mean_gap() {
    let mut cells = gaussian_cells(3000, 20, 1.0, 3);
    for c in &mut cells {
        c.draws.iter_mut().for_each(|d| *d += 0.7);
    }
    let rep = report(&cells, 3);
    assert!((rep.mean_gap - 0.7).abs() < 0.06);
    assert!(rep.pit_mean < 0.4);
}

#[test]
fn pit_extremes() {
    let mut rng = stream_rng(4, 0);
    let draws: Vec<f64> = (0..19).map(|i| i as f64).collect();
    for _ in 0..1000 {
        assert!(pit_rank_cell(&mut rng, &draws, -1.0) < 1.0 / 20.0);
        assert!(pit_rank_cell(&mut rng, &draws, 100.0) > 19.0 / 20.0);
    }
}

#[test]
fn support_rate_matches_brute_count() {
    let cells = gaussian_cells(200, 15, 1.5, 5);
    let cells: Vec<CellDraws> = cells.into_iter().enumerate().map(|(i, c)| CellDraws { col: i % 3, ..c }).collect();
    let bounds = [(-1.0, 1.0), (-2.0, 0.5), (-0.3, 3.0)];
    let mut out = 0;
    for c in &cells {
        for &d in &c.draws {
            let (lo, hi) = bounds[c.col];
            if !(lo..=hi).contains(&d) {
                out += 1;
            }
        }
    }
    assert_eq!(support_violations(&cells, &bounds), out as f64 / (200.0 * 15.0));
}

#[test]
fn replicated_truths_have_no_mean_or_sd_gap() {
    let truths: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let pooled: Vec<f64> = (0..7).flat_map(|_| truths.iter().copied()).collect();
    let gaps = marginal_gaps(&truths, &pooled, &truths);
    assert!(gaps.mean_gap < 1e-14 && gaps.sd_gap < 1e-14);
}

#[test]
fn report_is_seeded_and_identity_holds() {
    let n = 30;
    let mut rng = stream_rng(6, 0);
    let truth = Matrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal));
    let mut mask = Mask::all_observed(n, 3);
    for i in (0..n).step_by(4) {
        mask.set(i, i % 3, false);
    }
    let block = MaskedBlock::new(truth.clone(), mask, Matrix::from_fn(n, 1, |_, _| 1.0)).unwrap();
    let prior = PriorSpec::weak(3, 1, 1.0).unwrap();
    let ens = covmode::mvn_da(&block, &prior, &ChainConfig { m: 10, seed: 2, ..ChainConfig::default() }).unwrap();
    let a = diagnose(&ens, &block, &truth, 3).unwrap();
    assert_eq!(a, diagnose(&ens, &block, &truth, 3).unwrap());
    assert!(a.coverage_identity_holds());
    assert_eq!(a.cells, block.mask().missing_count());
    let b = diagnose(&ens, &block, &truth, 4).unwrap();
    assert_eq!(a.rmse, b.rmse);
    assert_ne!(a.pit_values, b.pit_values);
}

#[test]
fn self_diagnosis_has_zero_error() {
    let cells: Vec<CellDraws> = (0..40).map(|i| CellDraws { row: i, col: 0, draws: vec![i as f64; 5], truth: i as f64 }).collect();
    let rep = report(&cells, 7);
    assert_eq!(rep.rmse, 0.0);
    assert_eq!(rep.mae, 0.0);
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// Exact rational evaluation of the combining rules.
fn exact_rubin(q: &[f64], u: &[f64]) -> (f64, f64, f64, f64, f64) {
    let m = BigRational::from_integer(BigInt::from(q.len()));
    let one = BigRational::from_integer(BigInt::from(1));
    let q: Vec<BigRational> = q.iter().map(|&x| rational(x)).collect();
    let u: Vec<BigRational> = u.iter().map(|&x| rational(x)).collect();
    let q_bar = q.iter().fold(BigRational::zero(), |a, b| a + b) / &m;
    let u_bar = u.iter().fold(BigRational::zero(), |a, b| a + b) / &m;
    let b = q.iter().fold(BigRational::zero(), |a, x| a + (x - &q_bar) * (x - &q_bar)) / (&m - &one);
    let inflate = (&one + &one / &m) * &b;
    let t = &u_bar + &inflate;
    let r = &inflate / &u_bar;
    let nu = (&m - &one) * (&one + &one / &r) * (&one + &one / &r);
    let f = |x: &BigRational| x.to_f64().unwrap();
    (f(&q_bar), f(&u_bar), f(&b), f(&t), f(&nu))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #[test]
    fn rubin_matches_exact_rationals(
        q in prop::collection::vec(-100.0f64..100.0, 2..30),
        scale in 0.01f64..10.0,
    ) {
        let u: Vec<f64> = q.iter().enumerate().map(|(i, _)| scale * (1.0 + i as f64 * 0.1)).collect();
        prop_assume!(q.windows(2).any(|w| w[0] != w[1]));
        let got = rubin_pool(&q, &u).unwrap();
        let (q_bar, u_bar, b, t, nu) = exact_rubin(&q, &u);
        prop_assert!((got.q_bar - q_bar).abs() <= 1e-12 * (1.0 + q_bar.abs()));
        prop_assert!(rel(got.u_bar, u_bar) <= 1e-13);
        prop_assert!(rel(got.b_m, b) <= 1e-10);
        prop_assert!(rel(got.t_m, t) <= 1e-10);
        prop_assert!(rel(got.nu_mi, nu) <= 1e-9);
        prop_assert!(!got.zero_within_variance);
    }

    #[test]
    fn pit_lies_in_unit_interval(draws in prop::collection::vec(-5.0f64..5.0, 1..40), truth in -6.0f64..6.0, seed in 0u64..100) {
        let u = pit_rank_cell(&mut stream_rng(seed, 0), &draws, truth);
        prop_assert!(u > 0.0 && u < 1.0);
    }

    #[test]
    fn coverage_is_monotone_in_alpha(pits in prop::collection::vec(0.0f64..1.0, 1..200), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(pit_consistent_coverage(&pits, lo) >= pit_consistent_coverage(&pits, hi));
    }

    #[test]
    fn ks_matches_brute_force(pits in prop::collection::vec(0.0f64..1.0, 1..100)) {
        let n = pits.len() as f64;
        let mut brute = 0.0f64;
        for &x in &pits {
            let at = pits.iter().filter(|&&v| v <= x).count() as f64 / n;
            let below = pits.iter().filter(|&&v| v < x).count() as f64 / n;
            brute = brute.max((at - x).abs()).max((x - below).abs());
        }
        prop_assert!((ks_uniform(&pits) - brute).abs() <= 1e-12);
    }
}

#[test]
fn rubin_edge_cases() {
    let same = rubin_pool(&[1.0, 1.0, 1.0], &[0.2, 0.3, 0.1]).unwrap();
    assert_eq!(same.b_m, 0.0);
    assert_eq!(same.r, 0.0);
    assert!(same.nu_mi.is_infinite());
    let zero = rubin_pool(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
    assert!(zero.zero_within_variance);
    assert!(rubin_pool(&[1.0], &[1.0]).is_err());
    assert!(rubin_pool(&[1.0, 2.0], &[1.0, -1.0]).is_err());
}
