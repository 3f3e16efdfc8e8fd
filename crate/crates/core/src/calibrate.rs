//! Observed-cell calibration of stored HIMCE draws: a per-column blended
//! center map and one global deviation scale, both learned on held-out
//! observed cells.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::{conditional_with_retry, stream_rng, ImputationEnsemble, STREAM_CALIBRATION};
use crate::diagnostics::{ks_uniform, pit_consistent_coverage, sd};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{MaskedBlock, PatternConditional};

/// Candidate HIMCE weights, searched from 1 downward.
pub const WEIGHT_GRID: [f64; 6] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5];
pub const MIN_OBSERVED_PER_COLUMN: usize = 8;
pub const DEFAULT_HOLDOUT_FRAC: f64 = 0.2;
/// Relative squared-error premium charged per unit of weight moved off HIMCE.
const WEIGHT_PENALTY: f64 = 0.2;
/// Pseudo-cells pulling each column's center line toward the pooled line.
const COLUMN_PRIOR_CELLS: f64 = 40.0;
/// Pseudo-cells pulling the pooled line toward the identity map.
const POOLED_PRIOR_CELLS: f64 = 20.0;
/// Largest tolerated increase of the held-out PIT KS statistic.
const KS_TOLERANCE: f64 = 0.02;
const TARGET_PIT_SD: f64 = 0.288_675_134_594_812_9;

/// Candidate global scale factors `2^(i/8)` spanning `[1/2, 16]`.
pub fn scale_grid() -> Vec<f64> {
    (-8..=32).map(|i| (i as f64 / 8.0).exp2()).collect()
}

/// What the calibration layer learned and whether the scale was applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub holdout_cells: usize,
    pub weights: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    pub scale_proposed: f64,
    pub scale_accepted: bool,
    /// Scale applied to the recentered deviations (1 when rejected).
    pub scale: f64,
    pub heldout_rmse_before: f64,
    pub heldout_rmse_after: f64,
    /// Mean of `truth − center` over held-out cells.
    pub heldout_bias_before: f64,
    pub heldout_bias_after: f64,
    pub heldout_cov90_before: f64,
    pub heldout_cov90_after: f64,
    pub heldout_ks_before: f64,
    pub heldout_ks_after: f64,
    pub heldout_pit_sd_before: f64,
    pub heldout_pit_sd_after: f64,
}

struct HeldOut {
    col: usize,
    truth: f64,
    himce: Vec<f64>,
    hima_mean: f64,
}

impl HeldOut {
    fn himce_mean(&self) -> f64 {
        self.himce.iter().sum::<f64>() / self.himce.len() as f64
    }
}

fn draw_heldout<R: Rng + ?Sized>(
    rng: &mut R,
    ens: &ImputationEnsemble,
    block: &MaskedBlock,
    rows: &[(usize, Vec<usize>)],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if ens.snapshots.len() != ens.draws.len() {
        return Err(Error::InvalidConfig(format!("{} ensemble carries no parameter snapshots", ens.method)));
    }
    let p = block.p();
    let mut out: Vec<Vec<Vec<f64>>> = rows.iter().map(|(_, h)| vec![Vec::with_capacity(ens.m()); h.len()]).collect();
    let mut scratch_log = Vec::new();
    for snap in &ens.snapshots {
        for (r, (i, held)) in rows.iter().enumerate() {
            let obs: Vec<usize> =
                (0..p).filter(|&j| block.mask().is_observed(*i, j) && !held.contains(&j)).collect();
            let cond = conditional_with_retry(&snap.sigma, &obs, held, 1e-6, 0, &mut scratch_log)?;
            let vals = cond.draw(rng, snap.mean.row(*i), block.y().row(*i));
            for (c, v) in vals.into_iter().enumerate() {
                out[r][c].push(v);
            }
        }
    }
    Ok(out)
}

fn pit_with_u(draws: &[f64], truth: f64, u: f64) -> f64 {
    let below = draws.iter().filter(|&&d| d < truth).count() as f64;
    let ties = draws.iter().filter(|&&d| d == truth).count() as f64;
    (below + u * (ties + 1.0)) / (draws.len() as f64 + 1.0)
}

fn choose_weight(t: &[f64], c: &[f64], a: &[f64], line: (f64, f64)) -> f64 {
    let sse = |w: f64| {
        t.iter().zip(c).zip(a).map(|((t, c), a)| (t - line.0 - line.1 * (w * c + (1.0 - w) * a)).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 1.0);
    for &w in &WEIGHT_GRID {
        let score = sse(w) * (1.0 + WEIGHT_PENALTY * (1.0 - w));
        if score < best.0 {
            best = (score, w);
        }
    }
    best.1
}

/// Least-squares line `t ≈ a + b m`; a constant `m` gives slope one.
fn line_fit(t: &[f64], m: &[f64]) -> (f64, f64) {
    let nf = t.len() as f64;
    let (mbar, tbar) = (m.iter().sum::<f64>() / nf, t.iter().sum::<f64>() / nf);
    let sxx: f64 = m.iter().map(|v| (v - mbar).powi(2)).sum();
    let sxy: f64 = m.iter().zip(t).map(|(v, y)| (v - mbar) * (y - tbar)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 1.0 };
    (tbar - b * mbar, b)
}

/// Line fitted on `cells` cells shrunk toward `pooled` by `prior_cells`
/// pseudo-cells.
fn shrink_line(col: (f64, f64), pooled: (f64, f64), cells: usize, prior_cells: f64) -> (f64, f64) {
    let nf = cells as f64;
    let mix = |c: f64, p: f64| (nf * c + prior_cells * p) / (nf + prior_cells);
    (mix(col.0, pooled.0), mix(col.1, pooled.1))
}

/// Learns the center map `μ̃ = a_j + b_j (w_j Ȳ^HIMCE + (1 − w_j) Ȳ^HIMA)` and
/// a global deviation scale on held-out observed cells, then applies them to
/// the missing cells of the HIMCE draws.
pub fn calibrate_observed_cells(
    himce: &ImputationEnsemble,
    hima: &ImputationEnsemble,
    block: &MaskedBlock,
    holdout_frac: f64,
    seed: u64,
) -> Result<ImputationEnsemble> {
    if !(holdout_frac > 0.0 && holdout_frac <= 0.5) {
        return Err(Error::InvalidConfig(format!("holdout_frac must lie in (0, 0.5], got {holdout_frac}")));
    }
    let (n, p) = (block.n(), block.p());
    if himce.mask != *block.mask() || hima.mask != *block.mask() {
        return Err(Error::ShapeMismatch("ensembles and block must share one mask".into()));
    }
    for ens in [himce, hima] {
        if ens.draws.len() < 2 || ens.draws.iter().any(|d| d.shape() != (n, p)) {
            return Err(Error::ShapeMismatch(format!("{} ensemble has inconsistent draws", ens.method)));
        }
    }
    let mut rng = stream_rng(seed, STREAM_CALIBRATION);

    // Held-out cells, stratified by column.
    let mut held_by_row: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..p {
        let mut rows: Vec<usize> = (0..n).filter(|&i| block.mask().is_observed(i, j)).collect();
        if rows.len() < MIN_OBSERVED_PER_COLUMN {
            return Err(Error::InsufficientObserved {
                column: j,
                observed: rows.len(),
                needed: MIN_OBSERVED_PER_COLUMN,
            });
        }
        let h = ((holdout_frac * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        let (chosen, _) = rows.partial_shuffle(&mut rng, h);
        for &i in chosen.iter() {
            held_by_row[i].push(j);
        }
    }
    let rows: Vec<(usize, Vec<usize>)> =
        held_by_row.into_iter().enumerate().filter(|(_, h)| !h.is_empty()).map(|(i, mut h)| {
            h.sort_unstable();
            (i, h)
        }).collect();

    let c_draws = draw_heldout(&mut rng, himce, block, &rows)?;
    let a_draws = draw_heldout(&mut rng, hima, block, &rows)?;
    let mut cells = Vec::new();
    for (r, (i, held)) in rows.iter().enumerate() {
        for (c, &j) in held.iter().enumerate() {
            let a = &a_draws[r][c];
            cells.push(HeldOut {
                col: j,
                truth: block.y()[(*i, j)],
                himce: c_draws[r][c].clone(),
                hima_mean: a.iter().sum::<f64>() / a.len() as f64,
            });
        }
    }

    // Weights are compared after a pooled correction of the HIMCE means, so a
    // shared bias is left to the center line instead of pulling w_j off HIMCE.
    let truths: Vec<f64> = cells.iter().map(|h| h.truth).collect();
    let pooled_line = |m: Vec<f64>| shrink_line(line_fit(&truths, &m), (0.0, 1.0), cells.len(), POOLED_PRIOR_CELLS);
    let himce_line = pooled_line(cells.iter().map(HeldOut::himce_mean).collect());
    let mut weights = vec![1.0; p];
    let col_of = |j: usize| cells.iter().filter(move |h| h.col == j);
    for (j, w) in weights.iter_mut().enumerate() {
        let t: Vec<f64> = col_of(j).map(|h| h.truth).collect();
        let c: Vec<f64> = col_of(j).map(|h| h.himce_mean()).collect();
        let a: Vec<f64> = col_of(j).map(|h| h.hima_mean).collect();
        *w = choose_weight(&t, &c, &a, himce_line);
    }
    let blended = |h: &HeldOut| weights[h.col] * h.himce_mean() + (1.0 - weights[h.col]) * h.hima_mean;
    let pooled = pooled_line(cells.iter().map(blended).collect());
    let mut intercepts = vec![0.0; p];
    let mut slopes = vec![1.0; p];
    for j in 0..p {
        let t: Vec<f64> = col_of(j).map(|h| h.truth).collect();
        let m: Vec<f64> = col_of(j).map(blended).collect();
        (intercepts[j], slopes[j]) = shrink_line(line_fit(&t, &m), pooled, t.len(), COLUMN_PRIOR_CELLS);
    }
    let center = |j: usize, c: f64, a: f64| intercepts[j] + slopes[j] * (weights[j] * c + (1.0 - weights[j]) * a);

    // Held-out PIT under a candidate deviation scale, with the uniforms fixed
    // across candidates so the comparison is paired.
    let us: Vec<f64> = cells.iter().map(|_| rng.random::<f64>()).collect();
    let pits_at = |s: f64| -> Vec<f64> {
        cells
            .iter()
            .zip(&us)
            .map(|(h, &u)| {
                let cbar = h.himce.iter().sum::<f64>() / h.himce.len() as f64;
                let mu = center(h.col, cbar, h.hima_mean);
                let draws: Vec<f64> = h.himce.iter().map(|d| mu + s * (d - cbar)).collect();
                pit_with_u(&draws, h.truth, u)
            })
            .collect()
    };
    let base = pits_at(1.0);
    let mut proposed = 1.0;
    let mut best_gap = (sd(&base) - TARGET_PIT_SD).abs();
    for s in scale_grid() {
        let gap = (sd(&pits_at(s)) - TARGET_PIT_SD).abs();
        if gap < best_gap {
            best_gap = gap;
            proposed = s;
        }
    }
    let cand = pits_at(proposed);
    let (cov_before, ks_before) = (pit_consistent_coverage(&base, 0.1), ks_uniform(&base));
    let (cov_cand, ks_cand) = (pit_consistent_coverage(&cand, 0.1), ks_uniform(&cand));
    let accepted = proposed != 1.0 && cov_cand > cov_before && ks_cand <= ks_before + KS_TOLERANCE;
    let scale = if accepted { proposed } else { 1.0 };
    let after = if accepted { cand } else { base.clone() };

    let rmse = |f: &dyn Fn(&HeldOut) -> f64| {
        (cells.iter().map(|h| (h.truth - f(h)).powi(2)).sum::<f64>() / cells.len() as f64).sqrt()
    };
    let bias = |f: &dyn Fn(&HeldOut) -> f64| cells.iter().map(|h| h.truth - f(h)).sum::<f64>() / cells.len() as f64;
    let before_center = |h: &HeldOut| h.himce_mean();
    let after_center = |h: &HeldOut| center(h.col, h.himce_mean(), h.hima_mean);
    let (heldout_rmse_before, heldout_rmse_after) = (rmse(&before_center), rmse(&after_center));
    let (heldout_bias_before, heldout_bias_after) = (bias(&before_center), bias(&after_center));

    let c_mean = himce.posterior_mean();
    let a_mean = hima.posterior_mean();
    let mut out = himce.clone();
    for (i, j) in block.mask().missing_cells() {
        let cbar = c_mean[(i, j)];
        let mu = center(j, cbar, a_mean[(i, j)]);
        for (d, src) in out.draws.iter_mut().zip(&himce.draws) {
            d[(i, j)] = mu + scale * (src[(i, j)] - cbar);
        }
    }
    out.calibration = Some(CalibrationReport {
        holdout_cells: cells.len(),
        weights,
        intercepts,
        slopes,
        scale_proposed: proposed,
        scale_accepted: accepted,
        scale,
        heldout_rmse_before,
        heldout_rmse_after,
        heldout_bias_before,
        heldout_bias_after,
        heldout_cov90_before: cov_before,
        heldout_cov90_after: pit_consistent_coverage(&after, 0.1),
        heldout_ks_before: ks_before,
        heldout_ks_after: ks_uniform(&after),
        heldout_pit_sd_before: sd(&base),
        heldout_pit_sd_after: sd(&after),
    });
    Ok(out)
}

/// Injects a known distortion: every snapshot mean moves by `shift` and every
/// snapshot covariance by `scale²`. Each stored missing cell is moved by the
/// conditional shift its own snapshot implies for the row's observed cells,
/// and its deviation from the ensemble mean is multiplied by `scale`.
pub fn shift_and_scale(ens: &ImputationEnsemble, shift: f64, scale: f64) -> ImputationEnsemble {
    let mean: Matrix = ens.posterior_mean();
    let (n, p) = ens.mask.shape();
    let mut out = ens.clone();
    for (t, d) in out.draws.iter_mut().enumerate() {
        let snap = ens.snapshots.get(t);
        for i in 0..n {
            let (obs, mis): (Vec<usize>, Vec<usize>) = (0..p).partition(|&j| ens.mask.is_observed(i, j));
            if mis.is_empty() {
                continue;
            }
            let moved = snap
                .and_then(|s| PatternConditional::new(s.sigma.as_matrix(), &obs, &mis).ok())
                .map(|c| c.mean(&vec![shift; p], &vec![0.0; p]))
                .unwrap_or_else(|| vec![shift; mis.len()]);
            for (&j, m) in mis.iter().zip(moved) {
                d[(i, j)] = mean[(i, j)] + m + scale * (ens.draws[t][(i, j)] - mean[(i, j)]);
            }
        }
    }
    for snap in &mut out.snapshots {
        snap.mean = Matrix::from_fn(snap.mean.nrows(), snap.mean.ncols(), |i, j| snap.mean[(i, j)] + shift);
        snap.sigma = snap.sigma.scaled(scale * scale);
    }
    out
}
