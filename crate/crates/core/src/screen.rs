//! Predictor screening by available-case correlation.

use alloc::vec::Vec;


use num_traits::Float;
use crate::matrix::Matrix;
use crate::model::MaskedBlock;

/// Pairwise Pearson correlations over rows where both columns are observed.
/// Pairs with fewer than three shared rows, or a constant column among them,
/// get correlation zero.
pub fn available_case_correlation(block: &MaskedBlock) -> Matrix {
    let (n, p) = (block.n(), block.p());
    let y = block.y();
    let mask = block.mask();
    let mut corr = Matrix::identity(p);
    for a in 0..p {
        for b in a + 1..p {
            let rows: Vec<usize> = (0..n).filter(|&i| mask.is_observed(i, a) && mask.is_observed(i, b)).collect();
            let r = if rows.len() < 3 {
                0.0
            } else {
                let m = rows.len() as f64;
                let ma = rows.iter().map(|&i| y[(i, a)]).sum::<f64>() / m;
                let mb = rows.iter().map(|&i| y[(i, b)]).sum::<f64>() / m;
                let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
                for &i in &rows {
                    let (da, db) = (y[(i, a)] - ma, y[(i, b)] - mb);
                    sab += da * db;
                    saa += da * da;
                    sbb += db * db;
                }
                if saa > 0.0 && sbb > 0.0 {
                    sab / (saa * sbb).sqrt()
                } else {
                    0.0
                }
            };
            corr[(a, b)] = r;
            corr[(b, a)] = r;
        }
    }
    corr
}

/// The `max` columns other than `target` with largest absolute correlation,
/// returned in ascending column order. Ties resolve toward the lower index.
pub fn top_predictors(corr: &Matrix, target: usize, max: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..corr.ncols()).filter(|&c| c != target).collect();
    candidates.sort_by(|&a, &b| corr[(target, b)].abs().total_cmp(&corr[(target, a)].abs()).then(a.cmp(&b)));
    candidates.truncate(max);
    candidates.sort_unstable();
    candidates
}
