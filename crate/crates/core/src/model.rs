//! The Gaussian block working model: conjugate matrix-normal inverse-Wishart
//! posterior, conditional Gaussian imputation law, and the samplers built on it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor, SpdMatrix};
use crate::matrix::Matrix;

/// Observed-cell indicator for an `n × p` block (`true` = observed).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for a {rows}x{cols} block",
                observed.len()
            )));
        }
        Ok(Self { rows, cols, observed })
    }

    pub fn all_observed(rows: usize, cols: usize) -> Self {
        Self { rows, cols, observed: vec![true; rows * cols] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.observed[i * self.cols + j] = observed;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.observed
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn observed_in_col(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| self.is_observed(i, j)).count()
    }

    /// Missing cells in row-major order.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.is_observed(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn row_pattern(&self, i: usize) -> &[bool] {
        &self.observed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Observed data: response block `Y` with mask `R` and fully observed design `X`.
///
/// Values stored at missing cells are zeroed on construction and never read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedBlock {
    y: Matrix,
    mask: Mask,
    x: Matrix,
}

impl MaskedBlock {
    pub fn new(mut y: Matrix, mask: Mask, x: Matrix) -> Result<Self> {
        let (n, p) = y.shape();
        if mask.shape() != (n, p) {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs Y {:?}", mask.shape(), (n, p))));
        }
        if x.nrows() != n {
            return Err(Error::ShapeMismatch(format!("X has {} rows, Y has {n}", x.nrows())));
        }
        if x.ncols() == 0 || p == 0 || n == 0 {
            return Err(Error::ShapeMismatch("empty block or design".into()));
        }
        if !x.is_finite() {
            return Err(Error::InvalidConfig("design matrix contains non-finite values".into()));
        }
        for i in 0..n {
            for j in 0..p {
                if mask.is_observed(i, j) {
                    if !y[(i, j)].is_finite() {
                        return Err(Error::InvalidConfig(format!("observed cell ({i}, {j}) is not finite")));
                    }
                } else {
                    y[(i, j)] = 0.0;
                }
            }
        }
        for j in 0..p {
            if mask.observed_in_col(j) == 0 {
                return Err(Error::AllMissingColumn(j));
            }
        }
        if cholesky(&x.gram()).is_err() {
            return Err(Error::SingularDesign);
        }
        Ok(Self { y, mask, x })
    }

    /// A block with every cell observed.
    pub fn complete(y: Matrix, x: Matrix) -> Result<Self> {
        let mask = Mask::all_observed(y.nrows(), y.ncols());
        Self::new(y, mask, x)
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    /// Mean of the observed cells in each column.
    pub fn observed_col_means(&self) -> Vec<f64> {
        (0..self.p())
            .map(|j| {
                let (s, c) = (0..self.n())
                    .filter(|&i| self.mask.is_observed(i, j))
                    .fold((0.0, 0usize), |(s, c), i| (s + self.y[(i, j)], c + 1));
                s / c as f64
            })
            .collect()
    }

    /// Observed cells of column `j`.
    pub fn observed_values(&self, j: usize) -> Vec<f64> {
        (0..self.n()).filter(|&i| self.mask.is_observed(i, j)).map(|i| self.y[(i, j)]).collect()
    }
}

/// Matrix-normal inverse-Wishart hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub nu0: f64,
    pub s0: SpdMatrix,
    pub b0: Matrix,
    /// Prior row precision `V₀⁻¹`.
    pub v0_inv: SpdMatrix,
}

impl PriorSpec {
    pub fn new(nu0: f64, s0: SpdMatrix, b0: Matrix, v0_inv: SpdMatrix) -> Result<Self> {
        let prior = Self { nu0, s0, b0, v0_inv };
        prior.validate()?;
        Ok(prior)
    }

    /// `ν₀ = p + 2`, `S₀ = I`, `B₀ = 0`, `V₀⁻¹ = α I`: prior mean of `Σ` is `I`,
    /// the natural scale of a standardized block.
    pub fn weak(p: usize, k: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("ridge alpha must be positive, got {alpha}")));
        }
        Self::new(
            p as f64 + 2.0,
            SpdMatrix::identity(p),
            Matrix::zeros(k, p),
            SpdMatrix::new(Matrix::identity(k).scale(alpha))?,
        )
    }

    pub fn p(&self) -> usize {
        self.s0.dim()
    }

    pub fn k(&self) -> usize {
        self.v0_inv.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, k) = (self.s0.dim(), self.v0_inv.dim());
        if !(self.nu0 > p as f64 + 1.0) {
            return Err(Error::DegreesOfFreedomTooSmall { nu: self.nu0, p });
        }
        if self.b0.shape() != (k, p) {
            return Err(Error::ShapeMismatch(format!("B0 is {:?}, expected {:?}", self.b0.shape(), (k, p))));
        }
        Ok(())
    }

    pub(crate) fn check_block(&self, n_rows_x: usize, k: usize, p: usize) -> Result<()> {
        if self.p() != p || self.k() != k {
            return Err(Error::ShapeMismatch(format!(
                "prior is for p={}, k={}, data has p={p}, k={k} ({n_rows_x} rows)",
                self.p(),
                self.k()
            )));
        }
        Ok(())
    }
}

/// Complete-data conjugate posterior `(V_n, B_n, S_n, ν_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub vn: SpdMatrix,
    pub bn: Matrix,
    pub sn: SpdMatrix,
    pub nun: f64,
}

impl PosteriorSummary {
    /// The posterior after observing no rows, which is the prior itself.
    pub fn prior_only(prior: &PriorSpec) -> Result<Self> {
        let vn = SpdMatrix::new(prior.v0_inv.cholesky()?.inverse())?;
        Ok(Self { vn, bn: prior.b0.clone(), sn: prior.s0.clone(), nun: prior.nu0 })
    }
}

/// Conjugate update for a complete block `Y` under the matrix-normal
/// inverse-Wishart prior.
pub fn complete_data_posterior(y: &Matrix, x: &Matrix, prior: &PriorSpec) -> Result<PosteriorSummary> {
    let n = y.nrows();
    if n == 0 {
        return Err(Error::TooFewRows { needed: 1, got: 0 });
    }
    if x.nrows() != n {
        return Err(Error::ShapeMismatch(format!("X has {} rows, Y has {n}", x.nrows())));
    }
    prior.check_block(n, x.ncols(), y.ncols())?;
    let precision = x.gram().add(prior.v0_inv.as_matrix());
    let chol = cholesky(&precision).map_err(|_| Error::SingularDesign)?;
    let rhs = x.t_matmul(y).add(&prior.v0_inv.matmul(&prior.b0));
    let bn = chol.solve_matrix(&rhs);
    let vn = SpdMatrix::new(chol.inverse())?;
    let resid = y.sub(&x.matmul(&bn));
    let db = bn.sub(&prior.b0);
    let mut sn = prior.s0.add(&resid.gram()).add(&db.t_matmul(&prior.v0_inv.matmul(&db)));
    sn.symmetrize();
    Ok(PosteriorSummary { vn, bn, sn: SpdMatrix::new(sn)?, nun: prior.nu0 + n as f64 })
}

/// Scale of the conditional law `Σ | B, Y, X ∼ IW(ν₀+n+k, S_c)`.
pub fn conditional_sigma_scale(b: &Matrix, y: &Matrix, x: &Matrix, prior: &PriorSpec) -> Result<(f64, SpdMatrix)> {
    let (n, p) = y.shape();
    let k = x.ncols();
    prior.check_block(n, k, p)?;
    if b.shape() != (k, p) || x.nrows() != n {
        return Err(Error::ShapeMismatch(format!("B {:?}, X {:?}, Y {:?}", b.shape(), x.shape(), y.shape())));
    }
    let resid = y.sub(&x.matmul(b));
    let db = b.sub(&prior.b0);
    let mut sc = prior.s0.add(&resid.gram()).add(&db.t_matmul(&prior.v0_inv.matmul(&db)));
    sc.symmetrize();
    Ok((prior.nu0 + (n + k) as f64, SpdMatrix::new(sc)?))
}

/// Mode `S / (ν + p + 1)` of `IW(ν, S)`.
pub fn iw_mode(nu: f64, s: &SpdMatrix) -> Result<SpdMatrix> {
    let p = s.dim();
    if !(nu > p as f64 + 1.0) {
        return Err(Error::DegreesOfFreedomTooSmall { nu, p });
    }
    Ok(s.scaled(1.0 / (nu + p as f64 + 1.0)))
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn chi_squared<R: Rng + ?Sized>(rng: &mut R, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive degrees of freedom").sample(rng)
}

/// Draws `Σ ∼ IW(ν, S)` through the Bartlett factor of `W_p(ν, I)`.
///
/// With `S = L Lᵀ` and `W = A Aᵀ`, the draw is `(L A⁻ᵀ)(L A⁻ᵀ)ᵀ`, formed by a
/// forward substitution against the triangular `A`.
pub fn draw_inverse_wishart<R: Rng + ?Sized>(rng: &mut R, nu: f64, s: &SpdMatrix) -> Result<SpdMatrix> {
    let p = s.dim();
    if !(nu > p as f64 - 1.0) {
        return Err(Error::DegreesOfFreedomTooSmall { nu, p });
    }
    let l = s.cholesky()?;
    let mut a = Matrix::zeros(p, p);
    for i in 0..p {
        a[(i, i)] = chi_squared(rng, nu - i as f64).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    // Row r of T = L A⁻ᵀ solves A tᵣ = L[r, :]ᵀ.
    let mut t = Matrix::zeros(p, p);
    let mut buf = vec![0.0; p];
    for r in 0..p {
        buf.copy_from_slice(l.lower().row(r));
        for i in 0..p {
            let mut acc = buf[i];
            for k in 0..i {
                acc -= a[(i, k)] * buf[k];
            }
            buf[i] = acc / a[(i, i)];
        }
        t.row_mut(r).copy_from_slice(&buf);
    }
    let mut sigma = t.matmul(&t.transpose());
    sigma.symmetrize();
    SpdMatrix::new(sigma)
}

/// `B_n + L_V Z L_Σᵀ` for a given standard-normal noise matrix `Z`.
pub fn matrix_normal_from_noise(bn: &Matrix, vn: &CholeskyFactor, sigma: &CholeskyFactor, z: &Matrix) -> Matrix {
    assert_eq!(z.shape(), bn.shape());
    let left = vn.lower().matmul(z);
    bn.add(&left.matmul(&sigma.lower().transpose()))
}

/// Draws `B ∼ MN(B_n, V_n, Σ)`.
pub fn draw_matrix_normal<R: Rng + ?Sized>(rng: &mut R, bn: &Matrix, vn: &SpdMatrix, sigma: &SpdMatrix) -> Result<Matrix> {
    let (k, p) = bn.shape();
    if vn.dim() != k || sigma.dim() != p {
        return Err(Error::ShapeMismatch(format!("B_n {:?}, V_n {}, Σ {}", bn.shape(), vn.dim(), sigma.dim())));
    }
    let lv = vn.cholesky()?;
    let ls = sigma.cholesky()?;
    let z = Matrix::from_fn(k, p, |_, _| std_normal(rng));
    Ok(matrix_normal_from_noise(bn, &lv, &ls, &z))
}

/// Conditional law of the missing coordinates for one missingness pattern,
/// factorized once and applied to every row sharing the pattern.
#[derive(Clone, Debug)]
pub struct PatternConditional {
    obs: Vec<usize>,
    mis: Vec<usize>,
    /// `Σ_MO Σ_OO⁻¹`, `|M| × |O|`.
    gain: Matrix,
    cov: SpdMatrix,
    cov_chol: CholeskyFactor,
}

impl PatternConditional {
    pub fn new(sigma: &Matrix, obs: &[usize], mis: &[usize]) -> Result<Self> {
        if mis.is_empty() {
            return Err(Error::ShapeMismatch("pattern has no missing coordinates".into()));
        }
        let s_mm = sigma.select(mis, mis);
        let (gain, mut cov) = if obs.is_empty() {
            (Matrix::zeros(mis.len(), 0), s_mm)
        } else {
            let s_oo = sigma.select(obs, obs);
            let chol = cholesky(&s_oo).map_err(|_| Error::IllConditioned { retries: 0 })?;
            let s_om = sigma.select(obs, mis);
            let gain_t = chol.solve_matrix(&s_om);
            let cov = s_mm.sub(&s_om.t_matmul(&gain_t));
            (gain_t.transpose(), cov)
        };
        cov.symmetrize();
        let cov_chol = cholesky(&cov).map_err(|_| Error::IllConditioned { retries: 0 })?;
        Ok(Self { obs: obs.to_vec(), mis: mis.to_vec(), gain, cov: SpdMatrix::new_unchecked(cov), cov_chol })
    }

    /// The same conditional from the joint precision `Q = Σ⁻¹`: covariance
    /// `Q_MM⁻¹` and gain `−Q_MM⁻¹ Q_MO`, which needs only an `|M| × |M|`
    /// factorization per pattern.
    pub fn from_precision(q: &Matrix, obs: &[usize], mis: &[usize]) -> Result<Self> {
        if mis.is_empty() {
            return Err(Error::ShapeMismatch("pattern has no missing coordinates".into()));
        }
        let q_mm = cholesky(&q.select(mis, mis)).map_err(|_| Error::IllConditioned { retries: 0 })?;
        let mut cov = q_mm.inverse();
        cov.symmetrize();
        let gain = cov.matmul(&q.select(mis, obs)).scale(-1.0);
        let cov_chol = cholesky(&cov).map_err(|_| Error::IllConditioned { retries: 0 })?;
        Ok(Self { obs: obs.to_vec(), mis: mis.to_vec(), gain, cov: SpdMatrix::new_unchecked(cov), cov_chol })
    }

    pub fn observed(&self) -> &[usize] {
        &self.obs
    }

    pub fn missing(&self) -> &[usize] {
        &self.mis
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn cov_factor(&self) -> &CholeskyFactor {
        &self.cov_chol
    }

    /// Conditional mean over the missing coordinates for one full row.
    pub fn mean(&self, row_mean: &[f64], y_row: &[f64]) -> Vec<f64> {
        let dev: Vec<f64> = self.obs.iter().map(|&o| y_row[o] - row_mean[o]).collect();
        self.mis
            .iter()
            .enumerate()
            .map(|(r, &m)| row_mean[m] + self.gain.row(r).iter().zip(&dev).map(|(g, d)| g * d).sum::<f64>())
            .collect()
    }

    /// Conditional draw over the missing coordinates for one full row.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, row_mean: &[f64], y_row: &[f64]) -> Vec<f64> {
        let mean = self.mean(row_mean, y_row);
        let z: Vec<f64> = (0..self.mis.len()).map(|_| std_normal(rng)).collect();
        let noise = self.cov_chol.mul_lower(&z);
        mean.iter().zip(noise).map(|(m, e)| m + e).collect()
    }
}

/// Gaussian conditional of `y_M` given `y_O`: mean
/// `μ_M + Σ_MO Σ_OO⁻¹ (y_O − μ_O)` and covariance `Σ_MM − Σ_MO Σ_OO⁻¹ Σ_OM`,
/// both through Cholesky solves on `Σ_OO`.
pub fn conditional_gaussian(
    row_mean: &[f64],
    sigma: &SpdMatrix,
    y_obs: &[f64],
    obs_idx: &[usize],
    mis_idx: &[usize],
) -> Result<(Vec<f64>, SpdMatrix)> {
    let p = sigma.dim();
    if row_mean.len() != p || y_obs.len() != obs_idx.len() || obs_idx.len() + mis_idx.len() != p {
        return Err(Error::ShapeMismatch("index sets must partition the row".into()));
    }
    let mut seen = vec![false; p];
    for &i in obs_idx.iter().chain(mis_idx) {
        if i >= p || seen[i] {
            return Err(Error::ShapeMismatch("index sets must partition the row".into()));
        }
        seen[i] = true;
    }
    let cond = PatternConditional::new(sigma, obs_idx, mis_idx)?;
    let mut row = vec![0.0; p];
    for (&o, &v) in obs_idx.iter().zip(y_obs) {
        row[o] = v;
    }
    let mean = cond.mean(row_mean, &row);
    Ok((mean, cond.cov))
}
