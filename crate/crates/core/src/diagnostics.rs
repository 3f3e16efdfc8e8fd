//! Pseudo-missing evaluation: randomized PIT, PIT-consistent coverage,
//! marginal gaps, error metrics, support violations and Rubin pooling.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::{stream_rng, ImputationEnsemble};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::MaskedBlock;

pub(crate) const STREAM_DIAGNOSTICS: u64 = 5;

/// Grid for the quantile-quantile gap.
pub const QQ_GRID: [f64; 19] =
    [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Stored draws and withheld truth for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDraws {
    pub row: usize,
    pub col: usize,
    pub draws: Vec<f64>,
    pub truth: f64,
}

impl CellDraws {
    pub fn mean(&self) -> f64 {
        self.draws.iter().sum::<f64>() / self.draws.len() as f64
    }
}

/// Collects the draws at every missing cell of the ensemble's mask, with the
/// matching entry of `truth`, in row-major order.
pub fn cells_from_ensemble(ens: &ImputationEnsemble, truth: &Matrix) -> Result<Vec<CellDraws>> {
    if truth.shape() != ens.mask.shape() {
        return Err(Error::ShapeMismatch(format!("truth {:?} vs mask {:?}", truth.shape(), ens.mask.shape())));
    }
    Ok(ens
        .mask
        .missing_cells()
        .into_iter()
        .map(|(i, j)| CellDraws {
            row: i,
            col: j,
            draws: ens.draws.iter().map(|d| d[(i, j)]).collect(),
            truth: truth[(i, j)],
        })
        .collect())
}

/// Randomized rank-cell PIT `(r⁻ + U (r⁼ + 1)) / (M + 1)`.
pub fn pit_rank_cell<R: Rng + ?Sized>(rng: &mut R, draws: &[f64], truth: f64) -> f64 {
    let below = draws.iter().filter(|&&d| d < truth).count() as f64;
    let ties = draws.iter().filter(|&&d| d == truth).count() as f64;
    let u: f64 = rng.random();
    (below + u * (ties + 1.0)) / (draws.len() as f64 + 1.0)
}

/// Fraction of PIT values in `[α/2, 1 − α/2]`.
pub fn pit_consistent_coverage(pits: &[f64], alpha: f64) -> f64 {
    let (lo, hi) = (alpha / 2.0, 1.0 - alpha / 2.0);
    pits.iter().filter(|&&u| u >= lo && u <= hi).count() as f64 / pits.len() as f64
}

/// Fraction of PIT values in `[0.4, 0.6]`.
pub fn central_mass(pits: &[f64]) -> f64 {
    pits.iter().filter(|&&u| (0.4..=0.6).contains(&u)).count() as f64 / pits.len() as f64
}

/// One-sample Kolmogorov–Smirnov distance to the uniform CDF.
pub fn ks_uniform(pits: &[f64]) -> f64 {
    let mut s = pits.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| f64::max((i as f64 + 1.0) / n - u, u - i as f64 / n))
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 divisor); zero for fewer than two values.
pub fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Standard deviation with divisor n, unchanged when a sample is replicated.
pub fn population_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Linear interpolation between order statistics at `h = (n − 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalGaps {
    pub mean_gap: f64,
    pub sd_gap: f64,
    pub iqr_gap: f64,
    pub qq_gap: f64,
}

/// Gaps between the pooled predictive draws and the withheld truths.
/// `posterior_means` only enters the overlay exports, not the gaps.
pub fn marginal_gaps(truths: &[f64], pooled_draws: &[f64], posterior_means: &[f64]) -> MarginalGaps {
    debug_assert_eq!(truths.len(), posterior_means.len());
    let (t, d) = (sorted(truths), sorted(pooled_draws));
    let iqr = |s: &[f64]| quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
    MarginalGaps {
        mean_gap: (mean(pooled_draws) - mean(truths)).abs(),
        sd_gap: (population_sd(pooled_draws) - population_sd(truths)).abs(),
        iqr_gap: (iqr(&d) - iqr(&t)).abs(),
        qq_gap: QQ_GRID.iter().map(|&q| (quantile_sorted(&d, q) - quantile_sorted(&t, q)).abs()).sum::<f64>()
            / QQ_GRID.len() as f64,
    }
}

/// `(rmse, mae)` of posterior means against truths.
pub fn error_metrics(truths: &[f64], posterior_means: &[f64]) -> (f64, f64) {
    let n = truths.len() as f64;
    let (sq, ab) = truths
        .iter()
        .zip(posterior_means)
        .fold((0.0, 0.0), |(s, a), (t, m)| (s + (t - m) * (t - m), a + (t - m).abs()));
    ((sq / n).sqrt(), ab / n)
}

/// Observed `[min, max]` per column.
pub fn observed_bounds(block: &MaskedBlock) -> Vec<(f64, f64)> {
    (0..block.p())
        .map(|j| {
            block.observed_values(j).into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// Fraction of imputed values, over all cells and draws, outside the column's
/// admissible interval.
pub fn support_violations(cells: &[CellDraws], bounds: &[(f64, f64)]) -> f64 {
    let (mut out, mut total) = (0usize, 0usize);
    for c in cells {
        let (lo, hi) = bounds[c.col];
        out += c.draws.iter().filter(|&&d| d < lo || d > hi).count();
        total += c.draws.len();
    }
    if total == 0 {
        0.0
    } else {
        out as f64 / total as f64
    }
}

/// Rubin's combining rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub q_bar: f64,
    pub u_bar: f64,
    pub b_m: f64,
    pub t_m: f64,
    /// Relative increase in variance due to nonresponse.
    pub r: f64,
    /// `+∞` when there is no between-imputation variance, or no within
    /// variance to compare it against.
    pub nu_mi: f64,
    /// Set when `Ū = 0` and `B_M > 0`.
    pub zero_within_variance: bool,
}

pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 || variances.len() != m {
        return Err(Error::InvalidConfig(format!(
            "pooling needs at least two matching estimates and variances, got {m} and {}",
            variances.len()
        )));
    }
    if variances.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidConfig("within-imputation variances must be non-negative".into()));
    }
    let mf = m as f64;
    let q_bar = mean(estimates);
    let u_bar = mean(variances);
    let b_m = estimates.iter().map(|q| (q - q_bar) * (q - q_bar)).sum::<f64>() / (mf - 1.0);
    let inflate = (1.0 + 1.0 / mf) * b_m;
    let t_m = u_bar + inflate;
    let zero_within_variance = u_bar == 0.0 && b_m > 0.0;
    let (r, nu_mi) = if b_m == 0.0 {
        (if u_bar > 0.0 { 0.0 } else { f64::NAN }, f64::INFINITY)
    } else if zero_within_variance {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let r = inflate / u_bar;
        (r, (mf - 1.0) * (1.0 + 1.0 / r).powi(2))
    };
    Ok(PooledEstimate { q_bar, u_bar, b_m, t_m, r, nu_mi, zero_within_variance })
}

/// Every evaluation metric for one ensemble against withheld truths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub cells: usize,
    pub m: usize,
    pub rmse: f64,
    pub mae: f64,
    pub pit_values: Vec<f64>,
    pub pit_mean: f64,
    pub pit_sd: f64,
    pub pit_ks: f64,
    pub p_central: f64,
    pub cov_iqr: f64,
    pub cov90: f64,
    pub cov95: f64,
    pub mean_gap: f64,
    pub sd_gap: f64,
    pub iqr_gap: f64,
    pub qq_gap: f64,
    pub support_violation_rate: f64,
    pub elapsed_seconds: f64,
}

impl DiagnosticsReport {
    /// Recomputes each coverage field from `pit_values` and checks exact equality.
    pub fn coverage_identity_holds(&self) -> bool {
        self.cov_iqr == pit_consistent_coverage(&self.pit_values, 0.5)
            && self.cov90 == pit_consistent_coverage(&self.pit_values, 0.1)
            && self.cov95 == pit_consistent_coverage(&self.pit_values, 0.05)
            && self.p_central == central_mass(&self.pit_values)
    }
}

/// Diagnostics over a prepared cell list; PIT randomization uses `rng`.
pub fn diagnose_cells<R: Rng + ?Sized>(
    rng: &mut R,
    cells: &[CellDraws],
    bounds: &[(f64, f64)],
    elapsed_seconds: f64,
) -> Result<DiagnosticsReport> {
    if cells.is_empty() {
        return Err(Error::InvalidConfig("no withheld cells to diagnose".into()));
    }
    let m = cells[0].draws.len();
    if m < 1 || cells.iter().any(|c| c.draws.len() != m || c.draws.iter().any(|d| !d.is_finite())) {
        return Err(Error::InvalidConfig("cell draws must be finite with a common count".into()));
    }
    let truths: Vec<f64> = cells.iter().map(|c| c.truth).collect();
    let means: Vec<f64> = cells.iter().map(CellDraws::mean).collect();
    let pooled: Vec<f64> = cells.iter().flat_map(|c| c.draws.iter().copied()).collect();
    let pits: Vec<f64> = cells.iter().map(|c| pit_rank_cell(rng, &c.draws, c.truth)).collect();
    let (rmse, mae) = error_metrics(&truths, &means);
    let gaps = if cells.len() >= 2 {
        marginal_gaps(&truths, &pooled, &means)
    } else {
        MarginalGaps { mean_gap: (mean(&pooled) - truths[0]).abs(), sd_gap: 0.0, iqr_gap: 0.0, qq_gap: 0.0 }
    };
    Ok(DiagnosticsReport {
        cells: cells.len(),
        m,
        rmse,
        mae,
        pit_mean: mean(&pits),
        pit_sd: sd(&pits),
        pit_ks: ks_uniform(&pits),
        p_central: central_mass(&pits),
        cov_iqr: pit_consistent_coverage(&pits, 0.5),
        cov90: pit_consistent_coverage(&pits, 0.1),
        cov95: pit_consistent_coverage(&pits, 0.05),
        mean_gap: gaps.mean_gap,
        sd_gap: gaps.sd_gap,
        iqr_gap: gaps.iqr_gap,
        qq_gap: gaps.qq_gap,
        support_violation_rate: support_violations(cells, bounds),
        elapsed_seconds,
        pit_values: pits,
    })
}

/// Diagnoses an ensemble against the full truth matrix, using the diagnostics
/// stream of `seed` for PIT randomization.
pub fn diagnose(ens: &ImputationEnsemble, block: &MaskedBlock, truth: &Matrix, seed: u64) -> Result<DiagnosticsReport> {
    if ens.mask != *block.mask() {
        return Err(Error::ShapeMismatch("ensemble mask does not match the block".into()));
    }
    let cells = cells_from_ensemble(ens, truth)?;
    let mut rng = stream_rng(seed, STREAM_DIAGNOSTICS);
    diagnose_cells(&mut rng, &cells, &observed_bounds(block), ens.elapsed_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn pit_rank_arithmetic() {
        let mut rng = stream_rng(0, 0);
        for _ in 0..100 {
            let u = pit_rank_cell(&mut rng, &[1.0, 2.0, 3.0, 4.0], 2.5);
            assert!(u > 0.4 && u < 0.6);
            let v = pit_rank_cell(&mut rng, &[1.0, 2.0, 2.0, 3.0], 2.0);
            assert!(v > 0.2 && v < 0.8);
        }
    }

    #[test]
    fn coverage_examples() {
        assert!((pit_consistent_coverage(&[0.05, 0.5, 0.96], 0.1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pit_consistent_coverage(&[0.01, 0.5, 0.999], 1e-12), 1.0);
        let grid: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
        assert!((central_mass(&grid) - 0.2).abs() < 1e-15);
        assert_eq!(central_mass(&[0.5; 4]), 1.0);
    }

    #[test]
    fn error_examples() {
        assert_eq!(error_metrics(&[1.0, 2.0], &[1.0, 2.0]), (0.0, 0.0));
        assert_eq!(error_metrics(&[1.0, -1.0], &[0.0, 0.0]), (1.0, 1.0));
        let (r, a) = error_metrics(&[3.0, 4.0], &[0.0, 0.0]);
        assert!((r - 12.5.sqrt()).abs() < 1e-15 && a == 3.5);
    }

    #[test]
    fn rubin_examples() {
        let p = rubin_pool(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!((p.q_bar, p.u_bar, p.b_m, p.t_m, p.r), (2.0, 1.0, 2.0, 4.0, 3.0));
        assert!((p.nu_mi - 16.0 / 9.0).abs() < 1e-15);
        let q = rubin_pool(&[2.0, 2.0, 2.0], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((q.b_m, q.t_m, q.nu_mi), (0.0, 0.5, f64::INFINITY));
        let z = rubin_pool(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(z.zero_within_variance && z.nu_mi.is_infinite());
    }

    #[test]
    fn gap_examples() {
        let t = vec![0.1, -0.4, 1.3, 2.0, 0.7];
        let same: Vec<f64> = t.iter().flat_map(|&v| [v, v, v]).collect();
        let g = marginal_gaps(&t, &same, &t);
        assert!(g.mean_gap < 1e-15 && g.sd_gap < 1e-15);
        let g = marginal_gaps(&t, &t, &t);
        assert_eq!((g.iqr_gap, g.qq_gap), (0.0, 0.0));
        let shifted: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        let g = marginal_gaps(&t, &shifted, &t);
        assert!((g.mean_gap - 1.0).abs() < 1e-12 && g.sd_gap < 1e-12 && g.iqr_gap < 1e-12);
    }

    #[test]
    fn support_examples() {
        let cell = CellDraws { row: 0, col: 0, draws: (0..10).map(|i| i as f64).collect(), truth: 0.0 };
        assert_eq!(support_violations(core::slice::from_ref(&cell), &[(0.0, 9.0)]), 0.0);
        assert_eq!(support_violations(&[cell], &[(0.0, 8.5)]), 0.1);
    }

    #[test]
    fn ks_of_uniform_grid() {
        let grid: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        assert!((ks_uniform(&grid) - 0.05).abs() < 1e-15);
    }
}
