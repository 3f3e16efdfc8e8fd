//! Empirical-Bayes covariance mode with a hypergeometric-corrected common
//! correlation target, and the conjugate covariance-mode update.

use alloc::format;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, nearest_spd, SpdMatrix};
use crate::matrix::Matrix;
use crate::model::{conditional_sigma_scale, iw_mode, PriorSpec};

/// Default number of series terms for the Gauss hypergeometric factors.
pub const DEFAULT_EB_TERMS: usize = 25;
/// Floor applied to the shrinkage intensity when the moment estimate is non-positive.
pub const LAMBDA_FLOOR: f64 = 1e-6;
/// Bound on the magnitude of the common correlation.
pub const RHO_BAR_BOUND: f64 = 0.999;

/// Truncated Gauss hypergeometric series `Σ_{m<terms} (a)_m (b)_m / ((c)_m m!) xᵐ`.
pub fn gauss_2f1_truncated(a: f64, b: f64, c: f64, x: f64, terms: usize) -> Result<f64> {
    if terms == 0 {
        return Err(Error::InvalidConfig("hypergeometric series needs at least one term".into()));
    }
    if !(x.abs() <= 1.0) {
        return Err(Error::InvalidConfig(format!("hypergeometric argument must satisfy |x| <= 1, got {x}")));
    }
    let mut sum = 0.0;
    let mut term = 1.0;
    for m in 0..terms {
        sum += term;
        if m + 1 == terms {
            break;
        }
        let mf = m as f64;
        let denom = (c + mf) * (mf + 1.0);
        if c + mf == 0.0 {
            return Err(Error::InvalidC(m));
        }
        term *= (a + mf) * (b + mf) / denom * x;
    }
    Ok(sum)
}

/// Output of [`eb_covariance_fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbFit {
    /// Structured target with common correlation `rho_bar`.
    pub z: Matrix,
    pub rho_bar: f64,
    pub lambda_eb: f64,
    /// Pairwise sample covariance of the residual block (n−1 divisor).
    pub sample_cov: Matrix,
    pub sigma_mode: SpdMatrix,
    pub sigma_mean: SpdMatrix,
    pub spd_projected: bool,
    pub lambda_clamped: bool,
}

/// Empirical-Bayes covariance fit on a complete residual block `W` (`n × p`).
pub fn eb_covariance_fit(w: &Matrix, terms: usize) -> Result<EbFit> {
    let (n, p) = w.shape();
    if n < 4 {
        return Err(Error::TooFewRows { needed: 4, got: n });
    }
    if p < 2 {
        return Err(Error::ShapeMismatch(format!("empirical-Bayes fit needs p >= 2, got {p}")));
    }
    let nf = n as f64;
    let mut centered = w.clone();
    for j in 0..p {
        let mean = (0..n).map(|i| w[(i, j)]).sum::<f64>() / nf;
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let mut s_w = centered.gram().scale(1.0 / (nf - 1.0));
    s_w.symmetrize();
    let sd: alloc::vec::Vec<f64> = s_w.diag().iter().map(|v| v.sqrt()).collect();
    for (j, &v) in s_w.diag().iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::DegenerateColumn(j));
        }
    }

    // Unordered pairs; every ordered-pair sum is twice the unordered one and the
    // factor cancels in both the mean and the ratio below.
    let c_alpha = (nf - 1.0) / 2.0;
    let c_beta = (nf + 1.0) / 2.0;
    let n_pairs = (p * (p - 1) / 2) as f64;
    let mut alphas = alloc::vec::Vec::with_capacity(p * (p - 1) / 2);
    let mut betas = alloc::vec::Vec::with_capacity(p * (p - 1) / 2);
    for i in 0..p {
        for j in i + 1..p {
            let r = (s_w[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0);
            let x = 1.0 - r * r;
            let alpha = r * gauss_2f1_truncated(0.5, 0.5, c_alpha, x, terms)?;
            let beta = 1.0 - (nf - 2.0) * x / (nf - 1.0) * gauss_2f1_truncated(1.0, 1.0, c_beta, x, terms)?;
            alphas.push(alpha);
            betas.push(beta);
        }
    }
    let rho_bar = (alphas.iter().sum::<f64>() / n_pairs).clamp(-RHO_BAR_BOUND, RHO_BAR_BOUND);
    let num: f64 = alphas.iter().zip(&betas).map(|(a, b)| b - 2.0 * a * rho_bar + rho_bar * rho_bar).sum();
    let k2 = num / (n_pairs * (1.0 - rho_bar * rho_bar).powi(2));
    let raw_lambda = 1.0 / k2 - 3.0;
    let (lambda_eb, lambda_clamped) =
        if raw_lambda > 0.0 && raw_lambda.is_finite() { (raw_lambda, false) } else { (LAMBDA_FLOOR, true) };

    let z = Matrix::from_fn(p, p, |i, j| if i == j { s_w[(i, i)] } else { rho_bar * sd[i] * sd[j] });
    let numerator = z.scale(lambda_eb).add(&s_w);
    let mut spd_projected = false;
    let mut finish = |m: Matrix| -> SpdMatrix {
        let mut m = m;
        m.symmetrize();
        match cholesky(&m) {
            Ok(_) => SpdMatrix::new_unchecked(m),
            Err(_) => {
                spd_projected = true;
                nearest_spd(&m)
            }
        }
    };
    let sigma_mean = finish(numerator.scale(1.0 / (lambda_eb + nf)));
    let sigma_mode = finish(numerator.scale(1.0 / (lambda_eb + nf + 2.0 * p as f64 + 2.0)));
    Ok(EbFit { z, rho_bar, lambda_eb, sample_cov: s_w, sigma_mode, sigma_mean, spd_projected, lambda_clamped })
}

/// Conditional posterior mode `(S₀ + RSS(B)) / (ν₀ + n + k + p + 1)` of `Σ`
/// given `B` and a completed block.
pub fn conjugate_mode_update(b: &Matrix, y_star: &Matrix, x: &Matrix, prior: &PriorSpec) -> Result<SpdMatrix> {
    let (nu_c, s_c) = conditional_sigma_scale(b, y_star, x, prior)?;
    iw_mode(nu_c, &s_c)
}
