//! Spatial simulation design, MCAR masking, and benchmark table rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::Method;
use crate::diagnostics::{mean, sd, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::matrix::Matrix;
use crate::model::{std_normal, Mask, MaskedBlock};

/// Redraws allowed per column before a mask is declared infeasible.
pub const MASK_ATTEMPTS: usize = 100;
/// Minimum observed cells each masked column keeps.
pub const MIN_OBSERVED_AFTER_MASK: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialSimConfig {
    pub n: usize,
    /// Lattice side lengths; their product is the number of generated sites.
    pub grid: Vec<usize>,
    /// Columns kept after variance filtering.
    pub p: usize,
    pub kernel_scale: f64,
    pub kernel_var: f64,
    pub nugget: f64,
    pub strong_slope: f64,
    pub weak_slope: f64,
    pub strong_slope_cols: usize,
    pub mask_rate: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SpatialSimConfig {
    fn default() -> Self {
        Self {
            n: 80,
            grid: vec![8, 8],
            p: 40,
            kernel_scale: 4.0,
            kernel_var: 1.0,
            nugget: 0.1,
            strong_slope: 0.8,
            weak_slope: 0.2,
            strong_slope_cols: 10,
            mask_rate: 0.3,
            replicates: 10,
            seed: 7,
        }
    }
}

impl SpatialSimConfig {
    pub fn sites(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate));
        }
        if self.n < 2 || self.p < 2 {
            return fail(format!("need n >= 2 and p >= 2, got n={} p={}", self.n, self.p));
        }
        if self.grid.is_empty() || self.grid.contains(&0) {
            return fail(format!("invalid lattice {:?}", self.grid));
        }
        if self.sites() < self.p {
            return fail(format!("lattice {:?} has {} sites, fewer than p={}", self.grid, self.sites(), self.p));
        }
        if !(self.kernel_scale > 0.0 && self.kernel_var > 0.0 && self.nugget >= 0.0) {
            return fail("kernel scale and variance must be positive and nugget non-negative".into());
        }
        if self.replicates < 1 {
            return fail("replicates must be at least 1".into());
        }
        Ok(())
    }

    /// Lattice coordinates in row-major site order.
    fn coordinates(&self) -> Vec<Vec<f64>> {
        let mut coords = vec![Vec::new()];
        for &side in &self.grid {
            coords = coords
                .into_iter()
                .flat_map(|c| {
                    (0..side).map(move |s| {
                        let mut c = c.clone();
                        c.push(s as f64);
                        c
                    })
                })
                .collect();
        }
        coords
    }

    /// `σ² exp(−d/ℓ) + nugget·I` over the lattice, with the nugget floored at
    /// `1e-6·σ²`.
    pub fn kernel(&self) -> Matrix {
        let coords = self.coordinates();
        let q = coords.len();
        let nugget = self.nugget.max(1e-6 * self.kernel_var);
        Matrix::from_fn(q, q, |a, b| {
            let d = coords[a].iter().zip(&coords[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            self.kernel_var * (-d / self.kernel_scale).exp() + if a == b { nugget } else { 0.0 }
        })
    }
}

fn standardize_columns(m: &mut Matrix) {
    for j in 0..m.ncols() {
        let col = m.col(j);
        let (mu, s) = (mean(&col), sd(&col));
        let s = if s > 0.0 { s } else { 1.0 };
        for i in 0..m.nrows() {
            m[(i, j)] = (m[(i, j)] - mu) / s;
        }
    }
}

/// Draws one complete standardized block `Y` (`n × p`) and design
/// `X = [1, age]` from the spatial design.
pub fn simulate_spatial<R: Rng + ?Sized>(cfg: &SpatialSimConfig, rng: &mut R) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    let (n, q) = (cfg.n, cfg.sites());
    let chol = cholesky(&cfg.kernel())?;
    let mut age: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let (mu, s) = (mean(&age), sd(&age));
    for a in &mut age {
        *a = (*a - mu) / if s > 0.0 { s } else { 1.0 };
    }
    let x = Matrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { age[i] });
    let mut e = Matrix::zeros(n, q);
    let mut z = vec![0.0; q];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = std_normal(rng);
        }
        e.row_mut(i).copy_from_slice(&chol.mul_lower(&z));
    }
    let keep: Vec<usize> = if q == cfg.p {
        (0..q).collect()
    } else {
        let var: Vec<f64> = (0..q).map(|j| sd(&e.col(j))).collect();
        let mut order: Vec<usize> = (0..q).collect();
        order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        order.truncate(cfg.p);
        order.sort_unstable();
        order
    };
    let mut y = e.select_cols(&keep);
    for j in 0..cfg.p {
        let slope = if j < cfg.strong_slope_cols { cfg.strong_slope } else { cfg.weak_slope };
        for i in 0..n {
            y[(i, j)] += slope * age[i];
        }
    }
    standardize_columns(&mut y);
    Ok((y, x))
}

/// A masked block together with the complete data it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDraw {
    pub block: MaskedBlock,
    pub truth: Matrix,
}

impl MaskedDraw {
    /// Withheld `(row, col, value)` triples in row-major order.
    pub fn withheld(&self) -> Vec<(usize, usize, f64)> {
        self.block.mask().missing_cells().into_iter().map(|(i, j)| (i, j, self.truth[(i, j)])).collect()
    }
}

/// Masks each cell independently with probability `rate`; a column left with
/// fewer than two observed cells is redrawn.
pub fn mask_mcar<R: Rng + ?Sized>(rng: &mut R, y: &Matrix, x: &Matrix, rate: f64) -> Result<MaskedDraw> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(format!("mask rate must lie in (0, 1), got {rate}")));
    }
    let (n, p) = y.shape();
    if n < MIN_OBSERVED_AFTER_MASK {
        return Err(Error::TooFewRows { needed: MIN_OBSERVED_AFTER_MASK, got: n });
    }
    let mut mask = Mask::all_observed(n, p);
    for j in 0..p {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let col: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= rate).collect();
            if col.iter().filter(|&&o| o).count() >= MIN_OBSERVED_AFTER_MASK {
                for (i, o) in col.into_iter().enumerate() {
                    mask.set(i, j, o);
                }
                break;
            }
            if attempts == MASK_ATTEMPTS {
                return Err(Error::MaskConstraint(MASK_ATTEMPTS));
            }
        }
    }
    let block = MaskedBlock::new(y.clone(), mask, x.clone())?;
    Ok(MaskedDraw { block, truth: y.clone() })
}

/// Column names of a benchmark table, in order.
pub const METRICS: [&str; 14] = [
    "rmse", "mae", "time", "p_central", "cov_iqr", "cov90", "cov95", "pit_mean", "pit_sd", "pit_ks", "mean_gap",
    "sd_gap", "iqr_gap", "qq_gap",
];

/// Metric values of one report in [`METRICS`] order.
pub fn metric_values(r: &DiagnosticsReport) -> [f64; 14] {
    [
        r.rmse,
        r.mae,
        r.elapsed_seconds,
        r.p_central,
        r.cov_iqr,
        r.cov90,
        r.cov95,
        r.pit_mean,
        r.pit_sd,
        r.pit_ks,
        r.mean_gap,
        r.sd_gap,
        r.iqr_gap,
        r.qq_gap,
    ]
}

/// Mean and sd (n − 1 divisor) of every metric across replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub replicates: usize,
    pub mean: [f64; 14],
    pub sd: [f64; 14],
}

impl BenchmarkRow {
    pub fn aggregate(method: Method, reports: &[DiagnosticsReport]) -> Self {
        let values: Vec<[f64; 14]> = reports.iter().map(metric_values).collect();
        Self::from_values(method, &values)
    }

    pub fn from_values(method: Method, values: &[[f64; 14]]) -> Self {
        let mut m = [0.0; 14];
        let mut s = [0.0; 14];
        for c in 0..14 {
            let col: Vec<f64> = values.iter().map(|v| v[c]).collect();
            m[c] = if col.is_empty() { f64::NAN } else { mean(&col) };
            s[c] = sd(&col);
        }
        Self { method, replicates: values.len(), mean: m, sd: s }
    }

    pub fn metric(&self, name: &str) -> Option<(f64, f64)> {
        METRICS.iter().position(|m| *m == name).map(|c| (self.mean[c], self.sd[c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::stream_rng;

    #[test]
    fn simulate_shapes_and_standardization() {
        let cfg = SpatialSimConfig { n: 30, grid: vec![4, 4], p: 10, ..Default::default() };
        let (y, x) = simulate_spatial(&cfg, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(y.shape(), (30, 10));
        assert_eq!(x.shape(), (30, 2));
        for j in 0..10 {
            let c = y.col(j);
            assert!(mean(&c).abs() < 1e-12 && (sd(&c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_floors_nugget() {
        let cfg = SpatialSimConfig { grid: vec![3, 3], p: 4, nugget: 0.0, kernel_scale: 1e9, ..Default::default() };
        assert!(cholesky(&cfg.kernel()).is_ok());
    }

    #[test]
    fn invalid_configs() {
        assert!(SpatialSimConfig { mask_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(SpatialSimConfig { grid: vec![3, 3], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mask_keeps_two_observed_per_column() {
        let y = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64);
        let x = Matrix::from_fn(5, 1, |_, _| 1.0);
        for s in 0..50 {
            let d = mask_mcar(&mut stream_rng(s, 0), &y, &x, 0.6).unwrap();
            for j in 0..3 {
                assert!(d.block.mask().observed_in_col(j) >= 2);
            }
        }
    }

    #[test]
    fn aggregate_uses_sample_sd() {
        let row = BenchmarkRow::from_values(Method::Hima, &[[1.0; 14], [3.0; 14]]);
        assert_eq!(row.metric("rmse"), Some((2.0, 2.0f64.sqrt())));
    }
}
