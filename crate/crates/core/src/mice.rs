//! Screened Gaussian fully conditional specification.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::{stream_rng, EnsembleConfig, ImputationEnsemble, Method, STREAM_MICE_BASE};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor};
use crate::matrix::Matrix;
use crate::model::{chi_squared, std_normal, MaskedBlock};
use crate::screen::{available_case_correlation, top_predictors};

/// Relative pivot below which a predictor is dropped as collinear.
pub const PIVOT_TOLERANCE: f64 = 1e-10;
/// Diagonal loading used when the retained cross-product still fails to factor.
pub const RIDGE_FALLBACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcsConfig {
    pub m: usize,
    pub iters: usize,
    pub max_screen: usize,
    pub seed: u64,
}

impl Default for FcsConfig {
    fn default() -> Self {
        Self { m: 20, iters: 10, max_screen: 20, seed: 1 }
    }
}

impl FcsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidConfig(format!("m must be at least 2, got {}", self.m)));
        }
        if self.iters < 1 {
            return Err(Error::InvalidConfig("iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Greedy pivoted selection: walks `candidates` in order and keeps a column
/// when its pivot against the already kept columns exceeds
/// `PIVOT_TOLERANCE` times its own diagonal.
pub fn select_nonsingular(gram: &Matrix, candidates: &[usize]) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut lower: Vec<Vec<f64>> = Vec::new();
    for &c in candidates {
        let diag = gram[(c, c)];
        if !(diag > 0.0) {
            continue;
        }
        let mut w: Vec<f64> = kept.iter().map(|&k| gram[(k, c)]).collect();
        for i in 0..w.len() {
            let s = w[i] - (0..i).map(|t| lower[i][t] * w[t]).sum::<f64>();
            w[i] = s / lower[i][i];
        }
        let pivot = diag - w.iter().map(|v| v * v).sum::<f64>();
        if pivot > PIVOT_TOLERANCE * diag {
            w.push(pivot.sqrt());
            lower.push(w);
            kept.push(c);
        }
    }
    kept
}

/// Column model retained for one conditional regression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnModel {
    pub target: usize,
    /// Block columns used as predictors, in addition to every design column.
    pub block_predictors: Vec<usize>,
}

struct Regression {
    chol: CholeskyFactor,
    beta_hat: Vec<f64>,
    sse: f64,
    df: f64,
}

fn fit(d: &Matrix, y: &[f64]) -> Regression {
    let mut gram = d.gram();
    let chol = match cholesky(&gram) {
        Ok(c) => c,
        Err(_) => {
            gram = gram.add_diag(RIDGE_FALLBACK * (gram.trace() / gram.nrows() as f64).max(1.0));
            cholesky(&gram).expect("ridge-loaded cross-product factors")
        }
    };
    let rhs: Vec<f64> = (0..d.ncols()).map(|c| (0..d.nrows()).map(|i| d[(i, c)] * y[i]).sum()).collect();
    let beta_hat = chol.solve(&rhs);
    let fitted = d.mat_vec(&beta_hat);
    let sse = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let df = (d.nrows() as f64 - d.ncols() as f64).max(1.0);
    Regression { chol, beta_hat, sse, df }
}

/// Bayesian normal regression draw under a flat prior on `β` and Jeffreys
/// prior on `σ²`: `σ² = SSE/χ²_df`, `β ∼ N(β̂, σ² (DᵀD)⁻¹)`.
fn draw_parameters<R: Rng + ?Sized>(rng: &mut R, reg: &Regression) -> (Vec<f64>, f64) {
    let sse = reg.sse.max(1e-12);
    let sigma2 = sse / chi_squared(rng, reg.df);
    let mut z: Vec<f64> = (0..reg.beta_hat.len()).map(|_| std_normal(rng)).collect();
    reg.chol.backward_solve_in_place(&mut z);
    let s = sigma2.sqrt();
    let beta = reg.beta_hat.iter().zip(&z).map(|(b, e)| b + s * e).collect();
    (beta, sigma2)
}

/// Screening sets per column, capped so each regression keeps at least two
/// residual degrees of freedom.
pub fn screening_models(block: &MaskedBlock, max_screen: usize) -> Vec<ColumnModel> {
    let corr = available_case_correlation(block);
    let k = block.k();
    (0..block.p())
        .map(|j| {
            let n_obs = block.mask().observed_in_col(j);
            let cap = max_screen.min(n_obs.saturating_sub(k + 2));
            ColumnModel { target: j, block_predictors: top_predictors(&corr, j, cap) }
        })
        .collect()
}

fn one_imputation<R: Rng + ?Sized>(
    rng: &mut R,
    block: &MaskedBlock,
    models: &[ColumnModel],
    iters: usize,
) -> Result<Matrix> {
    let (n, p) = (block.n(), block.p());
    let x = block.x();
    let mask = block.mask();
    let mut y = block.y().clone();
    let observed: Vec<Vec<f64>> = (0..p).map(|j| block.observed_values(j)).collect();
    for (i, j) in mask.missing_cells() {
        y[(i, j)] = observed[j][rng.random_range(0..observed[j].len())];
    }
    let obs_rows: Vec<Vec<usize>> = (0..p).map(|j| (0..n).filter(|&i| mask.is_observed(i, j)).collect()).collect();
    let mis_rows: Vec<Vec<usize>> = (0..p).map(|j| (0..n).filter(|&i| !mask.is_observed(i, j)).collect()).collect();
    for _ in 0..iters {
        for model in models {
            let j = model.target;
            if mis_rows[j].is_empty() {
                continue;
            }
            let full = x.hcat(&y.select_cols(&model.block_predictors));
            let d_obs = full.select_rows(&obs_rows[j]);
            let all: Vec<usize> = (0..full.ncols()).collect();
            let keep = select_nonsingular(&d_obs.gram(), &all);
            if keep.is_empty() {
                return Err(Error::SingularDesign);
            }
            let d_obs = d_obs.select_cols(&keep);
            let y_obs: Vec<f64> = obs_rows[j].iter().map(|&i| y[(i, j)]).collect();
            let reg = fit(&d_obs, &y_obs);
            let (beta, sigma2) = draw_parameters(rng, &reg);
            let s = sigma2.sqrt();
            for &i in &mis_rows[j] {
                let mu: f64 = keep.iter().zip(&beta).map(|(&c, b)| full[(i, c)] * b).sum();
                y[(i, j)] = mu + s * std_normal(rng);
            }
        }
    }
    Ok(y)
}

/// Screened Gaussian FCS with `M` independent imputations, each on its own
/// RNG stream.
pub fn mice_impute(block: &MaskedBlock, cfg: &FcsConfig) -> Result<ImputationEnsemble> {
    cfg.validate()?;
    for j in 0..block.p() {
        let observed = block.mask().observed_in_col(j);
        if observed < 2 {
            return Err(Error::InsufficientObserved { column: j, observed, needed: 2 });
        }
    }
    let models = screening_models(block, cfg.max_screen);
    let draws = (0..cfg.m)
        .map(|m| {
            let mut rng = stream_rng(cfg.seed, STREAM_MICE_BASE + m as u64);
            one_imputation(&mut rng, block, &models, cfg.iters)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputationEnsemble {
        method: Method::Mice,
        draws,
        mask: block.mask().clone(),
        elapsed_seconds: 0.0,
        config: EnsembleConfig::Fcs(cfg.clone()),
        branch: None,
        stabilization: vec![],
        eb_fit: None,
        snapshots: vec![],
        calibration: None,
    })
}
