//! Joint-model imputation chains: the exact data-augmentation reference
//! sampler and the two covariance-mode chains built on the empirical-Bayes fit.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationReport;
use crate::eb::{eb_covariance_fit, EbFit, DEFAULT_EB_TERMS};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, jitter, CholeskyFactor, SpdMatrix};
use crate::matrix::Matrix;
use crate::mice::FcsConfig;
use crate::model::{
    chi_squared, complete_data_posterior, conditional_sigma_scale, draw_inverse_wishart, draw_matrix_normal,
    iw_mode, std_normal, Mask, MaskedBlock, PatternConditional, PriorSpec,
};
use crate::screen::{available_case_correlation, top_predictors};

/// Largest block dimension accepted by the exact reference sampler.
pub const MAX_DA_DIM: usize = 200;
/// Jitter retries per pattern before a conditioning failure is escalated.
pub const JITTER_RETRIES: usize = 3;

/// RNG stream for chain `stream` under a user seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const STREAM_MVN_DA: u64 = 1;
pub(crate) const STREAM_HIMA: u64 = 2;
pub(crate) const STREAM_HIMCE: u64 = 3;
pub(crate) const STREAM_CALIBRATION: u64 = 4;
pub(crate) const STREAM_MICE_BASE: u64 = 1 << 16;

/// Imputation method tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MvnDa,
    Hima,
    Himce,
    Mice,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MvnDa, Method::Hima, Method::Himce, Method::Mice];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MvnDa => "mvn_da",
            Method::Hima => "hima",
            Method::Himce => "himce",
            Method::Mice => "mice",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Covariance step taken by the HIMCE chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Conditional inverse-Wishart draw with an exact matrix-normal mean step.
    ExactRefresh,
    /// Empirical-Bayes covariance mode, optionally bridged.
    CovarianceMode,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::ExactRefresh => "exact_refresh",
            Branch::CovarianceMode => "covariance_mode",
        }
    }
}

/// Tuning for the joint-model chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Completed datasets to store.
    pub m: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Sweeps per stored draw, multiplied by `thin`.
    pub inner: usize,
    pub alpha_ridge: f64,
    /// Relative diagonal loading `ε` in `Σ + ε tr(Σ)/p I`.
    pub eps_jitter: f64,
    pub bridge_df: f64,
    pub bridge_max: f64,
    pub exact_refresh_max_p: usize,
    pub screen_size: usize,
    pub eb_terms: usize,
    /// Fill-and-refit sweeps of the shared empirical-Bayes fit.
    pub eb_fit_iters: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            m: 20,
            burn_in: 8,
            thin: 1,
            inner: 2,
            alpha_ridge: 1.0,
            eps_jitter: 1e-4,
            bridge_df: 18.0,
            bridge_max: 1.6,
            exact_refresh_max_p: 10,
            screen_size: 10,
            eb_terms: DEFAULT_EB_TERMS,
            eb_fit_iters: 18,
            seed: 1,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m < 2 {
            return fail(format!("m must be at least 2, got {}", self.m));
        }
        if self.thin < 1 || self.inner < 1 {
            return fail(format!("thin and inner must be at least 1, got {} and {}", self.thin, self.inner));
        }
        if !(self.alpha_ridge > 0.0 && self.alpha_ridge.is_finite()) {
            return fail(format!("alpha_ridge must be positive, got {}", self.alpha_ridge));
        }
        if !(0.0..=1e-2).contains(&self.eps_jitter) {
            return fail(format!("eps_jitter must lie in [0, 1e-2], got {}", self.eps_jitter));
        }
        if !(self.bridge_df > 2.0 && self.bridge_df.is_finite()) {
            return fail(format!("bridge_df must exceed 2, got {}", self.bridge_df));
        }
        if !(self.bridge_max >= 1.0 && self.bridge_max.is_finite()) {
            return fail(format!("bridge_max must be at least 1, got {}", self.bridge_max));
        }
        if self.eb_terms < 1 || self.eb_fit_iters < 1 {
            return fail("eb_terms and eb_fit_iters must be at least 1".into());
        }
        Ok(())
    }

    fn sweeps_per_draw(&self) -> usize {
        self.thin * self.inner
    }
}

/// A logged numerical stabilization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StabilizationEvent {
    /// Extra diagonal loading after a failed factorization.
    Jitter { iter: usize, retry: usize, delta: f64 },
    /// Nearest-SPD projection inside the empirical-Bayes fit.
    Projection { iter: usize },
    /// Non-positive shrinkage intensity floored.
    LambdaFloor { iter: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilizationCounts {
    pub jitter: usize,
    pub projection: usize,
    pub lambda_floor: usize,
}

impl StabilizationCounts {
    pub fn from_events(events: &[StabilizationEvent]) -> Self {
        let mut c = Self::default();
        for e in events {
            match e {
                StabilizationEvent::Jitter { .. } => c.jitter += 1,
                StabilizationEvent::Projection { .. } => c.projection += 1,
                StabilizationEvent::LambdaFloor { .. } => c.lambda_floor += 1,
            }
        }
        c
    }
}

/// Mean matrix and covariance that generated one stored draw. Where the mean
/// came from a fit that saw an observed cell, the snapshot holds the
/// leave-one-out value there, so the cell can be predicted as if withheld.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub mean: Matrix,
    pub sigma: SpdMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnsembleConfig {
    Chain(ChainConfig),
    Fcs(FcsConfig),
}

/// `M` completed datasets plus the metadata needed to audit them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationEnsemble {
    pub method: Method,
    pub draws: Vec<Matrix>,
    pub mask: Mask,
    /// Wall-clock seconds of the active chain; the core leaves this at zero and
    /// timed drivers fill it in.
    pub elapsed_seconds: f64,
    pub config: EnsembleConfig,
    pub branch: Option<Branch>,
    pub stabilization: Vec<StabilizationEvent>,
    /// Shared empirical-Bayes fit the chain started from.
    pub eb_fit: Option<EbFit>,
    #[serde(skip)]
    pub snapshots: Vec<ParamSnapshot>,
    pub calibration: Option<CalibrationReport>,
}

impl ImputationEnsemble {
    pub fn m(&self) -> usize {
        self.draws.len()
    }

    pub fn stabilization_counts(&self) -> StabilizationCounts {
        StabilizationCounts::from_events(&self.stabilization)
    }

    /// Average of the stored draws.
    pub fn posterior_mean(&self) -> Matrix {
        let mut acc = self.draws[0].clone();
        for d in &self.draws[1..] {
            acc = acc.add(d);
        }
        acc.scale(1.0 / self.draws.len() as f64)
    }

    /// True when every draw reproduces `block` on its observed cells.
    pub fn respects_observed(&self, block: &MaskedBlock) -> bool {
        let (n, p) = (block.n(), block.p());
        self.draws.iter().all(|d| {
            d.shape() == (n, p)
                && (0..n).all(|i| (0..p).all(|j| !block.mask().is_observed(i, j) || d[(i, j)] == block.y()[(i, j)]))
        })
    }
}

/// Rows sharing one missingness pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternGroup {
    pub obs: Vec<usize>,
    pub mis: Vec<usize>,
    pub rows: Vec<usize>,
}

/// Groups rows with at least one missing cell by pattern, ordered by first row.
pub fn pattern_groups(mask: &Mask) -> Vec<PatternGroup> {
    let (n, p) = mask.shape();
    let mut index: BTreeMap<&[bool], usize> = BTreeMap::new();
    let mut groups: Vec<PatternGroup> = Vec::new();
    for i in 0..n {
        let pat = mask.row_pattern(i);
        if pat.iter().all(|&o| o) {
            continue;
        }
        let g = *index.entry(pat).or_insert_with(|| {
            groups.push(PatternGroup {
                obs: (0..p).filter(|&j| pat[j]).collect(),
                mis: (0..p).filter(|&j| !pat[j]).collect(),
                rows: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].rows.push(i);
    }
    groups
}

/// Current iterate of a chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub y_star: Matrix,
    pub b: Matrix,
    pub sigma: SpdMatrix,
    pub rng: ChaCha8Rng,
    pub iter: usize,
    pub stabilization_log: Vec<StabilizationEvent>,
}

impl ChainState {
    pub fn new(y_star: Matrix, b: Matrix, sigma: SpdMatrix, rng: ChaCha8Rng) -> Self {
        Self { y_star, b, sigma, rng, iter: 0, stabilization_log: Vec::new() }
    }
}

/// Factorizes the conditional for one pattern, loading the diagonal with
/// `ε·10ʳ` on retry `r` when `Σ_OO` or the Schur complement fails.
pub(crate) fn conditional_with_retry(
    sigma: &Matrix,
    obs: &[usize],
    mis: &[usize],
    eps: f64,
    iter: usize,
    log: &mut Vec<StabilizationEvent>,
) -> Result<PatternConditional> {
    match PatternConditional::new(sigma, obs, mis) {
        Err(Error::IllConditioned { .. }) => {}
        other => return other,
    }
    let base = if eps > 0.0 { eps } else { 1e-6 };
    let p = sigma.nrows() as f64;
    let mut scale = base;
    for retry in 1..=JITTER_RETRIES {
        let loaded = match jitter(sigma, scale) {
            Ok(m) => m,
            Err(Error::NotPositiveDefinite { .. }) => {
                SpdMatrix::new_unchecked({
                    let mut m = sigma.add_diag(scale * sigma.trace() / p);
                    m.symmetrize();
                    m
                })
            }
            Err(e) => return Err(e),
        };
        log.push(StabilizationEvent::Jitter { iter, retry, delta: scale * sigma.trace() / p });
        if let Ok(c) = PatternConditional::new(&loaded, obs, mis) {
            return Ok(c);
        }
        scale *= 10.0;
    }
    Err(Error::IllConditioned { retries: JITTER_RETRIES })
}

/// Replaces the missing cells of `y` by conditional draws (`rng` given) or
/// conditional means (`rng` absent) under `N(mean_i, Σ)`.
pub(crate) fn impute_missing<R: Rng + ?Sized>(
    y: &mut Matrix,
    mean: &Matrix,
    sigma: &Matrix,
    groups: &[PatternGroup],
    mut rng: Option<&mut R>,
    eps: f64,
    iter: usize,
    log: &mut Vec<StabilizationEvent>,
) -> Result<()> {
    let precision = cholesky(sigma).ok().map(|c| c.inverse());
    for g in groups {
        let fast = precision.as_ref().and_then(|q| PatternConditional::from_precision(q, &g.obs, &g.mis).ok());
        let cond = match fast {
            Some(c) => c,
            None => conditional_with_retry(sigma, &g.obs, &g.mis, eps, iter, log)?,
        };
        for &i in &g.rows {
            let vals = match rng.as_deref_mut() {
                Some(r) => cond.draw(r, mean.row(i), y.row(i)),
                None => cond.mean(mean.row(i), y.row(i)),
            };
            for (&j, v) in g.mis.iter().zip(vals) {
                y[(i, j)] = v;
            }
        }
    }
    Ok(())
}

/// Observed data with missing cells set to their column's observed mean.
pub fn mean_fill(block: &MaskedBlock) -> Matrix {
    let means = block.observed_col_means();
    let mut y = block.y().clone();
    for (i, j) in block.mask().missing_cells() {
        y[(i, j)] = means[j];
    }
    y
}

/// `Σ_δ = Σ + ε tr(Σ)/p I`, or `Σ` itself when `ε = 0`.
pub fn stabilized(sigma: &SpdMatrix, eps: f64) -> Result<SpdMatrix> {
    if eps > 0.0 {
        jitter(sigma, eps)
    } else {
        Ok(sigma.clone())
    }
}

/// Column-wise ridge system `XᵀX + αI` shared by the covariance-mode chains.
#[derive(Clone, Debug)]
pub(crate) struct Ridge {
    chol: CholeskyFactor,
}

impl Ridge {
    pub(crate) fn new(x: &Matrix, alpha: f64) -> Result<Self> {
        let chol = cholesky(&x.gram().add_diag(alpha)).map_err(|_| Error::SingularDesign)?;
        Ok(Self { chol })
    }

    /// Posterior means `b̂_j = (XᵀX + αI)⁻¹ Xᵀ y_j`, stacked as columns.
    pub(crate) fn mean(&self, x: &Matrix, y: &Matrix) -> Matrix {
        self.chol.solve_matrix(&x.t_matmul(y))
    }

    /// Independent column draws `b_j ∼ N(b̂_j, σ_j² (XᵀX + αI)⁻¹)`.
    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R, x: &Matrix, y: &Matrix, sigma_diag: &[f64]) -> Matrix {
        let mut b = self.mean(x, y);
        let k = b.nrows();
        let mut z = vec![0.0; k];
        for (j, &s2) in sigma_diag.iter().enumerate() {
            for v in z.iter_mut() {
                *v = std_normal(rng);
            }
            self.chol.backward_solve_in_place(&mut z);
            let s = s2.sqrt();
            for (r, &zr) in z.iter().enumerate() {
                b[(r, j)] += s * zr;
            }
        }
        b
    }
}

/// One draw of the screened local ridge for column `j`: regress `y_j` on
/// `[X, Y*_S]` over the rows where `y_j` is observed, draw
/// `θ ∼ N(θ̂, σ² G⁻¹)` with `G = DᵀD + αI`, and return the fitted column
/// `D θ`, the same column with the ridge part at the fitted rows replaced by
/// its leave-one-out value, and the design coefficients.
fn local_ridge_draw<R: Rng + ?Sized>(
    rng: &mut R,
    x: &Matrix,
    y: &Matrix,
    j: usize,
    rows: &[usize],
    predictors: &[usize],
    alpha: f64,
    sigma2: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = x.hcat(&y.select_cols(predictors));
    let d_fit = d.select_rows(rows);
    let chol = cholesky(&d_fit.gram().add_diag(alpha)).map_err(|_| Error::SingularDesign)?;
    let rhs: Vec<f64> =
        (0..d.ncols()).map(|c| rows.iter().enumerate().map(|(r, &i)| d_fit[(r, c)] * y[(i, j)]).sum()).collect();
    let theta_hat = chol.solve(&rhs);
    let mut z: Vec<f64> = (0..theta_hat.len()).map(|_| std_normal(rng)).collect();
    chol.backward_solve_in_place(&mut z);
    let s = sigma2.sqrt();
    let mut theta: Vec<f64> = theta_hat.iter().zip(&z).map(|(t, zr)| t + s * zr).collect();
    let fitted = d.mat_vec(&theta);
    let mut loo = fitted.clone();
    for &i in rows {
        let mut w = d.row(i).to_vec();
        chol.forward_solve_in_place(&mut w);
        let h = w.iter().map(|v| v * v).sum::<f64>();
        let mean_i: f64 = d.row(i).iter().zip(&theta_hat).map(|(a, b)| a * b).sum();
        loo[i] += h * (mean_i - y[(i, j)]) / (1.0 - h);
    }
    theta.truncate(x.ncols());
    Ok((fitted, loo, theta))
}

/// `s·Σ_mode` with `s = df/χ²_df` clamped to `[1/bridge_max, bridge_max]`.
pub fn scalar_bridge<R: Rng + ?Sized>(rng: &mut R, sigma_mode: &SpdMatrix, df: f64, bridge_max: f64) -> SpdMatrix {
    debug_assert!(df > 2.0 && bridge_max >= 1.0);
    let s = (df / chi_squared(rng, df)).clamp(1.0 / bridge_max, bridge_max);
    if s == 1.0 {
        sigma_mode.clone()
    } else {
        sigma_mode.scaled(s)
    }
}

fn log_fit(fit: &EbFit, iter: usize, log: &mut Vec<StabilizationEvent>) {
    if fit.spd_projected {
        log.push(StabilizationEvent::Projection { iter });
    }
    if fit.lambda_clamped {
        log.push(StabilizationEvent::LambdaFloor { iter });
    }
}

/// The deterministic empirical-Bayes fit shared by HIMA and HIMCE.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedFit {
    pub y_star: Matrix,
    pub b: Matrix,
    pub fit: EbFit,
    pub events: Vec<StabilizationEvent>,
}

impl SharedFit {
    pub fn sigma(&self) -> &SpdMatrix {
        &self.fit.sigma_mode
    }
}

/// Ridge fill followed by `eb_fit_iters` sweeps of: ridge mean, EB mode on the
/// completed residuals, conditional-mean fill under `Σ_δ`.
pub fn shared_eb_fit(block: &MaskedBlock, cfg: &ChainConfig) -> Result<SharedFit> {
    cfg.validate()?;
    let x = block.x();
    let ridge = Ridge::new(x, cfg.alpha_ridge)?;
    let groups = pattern_groups(block.mask());
    let mut y = mean_fill(block);
    let mut b = ridge.mean(x, &y);
    for (i, j) in block.mask().missing_cells() {
        y[(i, j)] = (0..x.ncols()).map(|c| x[(i, c)] * b[(c, j)]).sum();
    }
    let mut events = Vec::new();
    let mut fit = None;
    for t in 0..cfg.eb_fit_iters {
        b = ridge.mean(x, &y);
        let mean = x.matmul(&b);
        let f = eb_covariance_fit(&y.sub(&mean), cfg.eb_terms)?;
        log_fit(&f, t, &mut events);
        let sd = stabilized(&f.sigma_mode, cfg.eps_jitter)?;
        impute_missing::<ChaCha8Rng>(&mut y, &mean, &sd, &groups, None, cfg.eps_jitter, t, &mut events)?;
        fit = Some(f);
    }
    let fit = fit.expect("at least one fit iteration");
    Ok(SharedFit { y_star: y, b, fit, events })
}

fn check_inputs(block: &MaskedBlock, prior: &PriorSpec, cfg: &ChainConfig) -> Result<()> {
    cfg.validate()?;
    prior.validate()?;
    prior.check_block(block.n(), block.k(), block.p())
}

fn collect<F>(state: &mut ChainState, cfg: &ChainConfig, mut sweep: F) -> Result<(Vec<Matrix>, Vec<ParamSnapshot>)>
where
    F: FnMut(&mut ChainState) -> Result<ParamSnapshot>,
{
    for _ in 0..cfg.burn_in {
        sweep(state)?;
        state.iter += 1;
    }
    let mut draws = Vec::with_capacity(cfg.m);
    let mut snaps = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let mut last = None;
        for _ in 0..cfg.sweeps_per_draw() {
            last = Some(sweep(state)?);
            state.iter += 1;
        }
        draws.push(state.y_star.clone());
        snaps.push(last.expect("at least one sweep per draw"));
    }
    Ok((draws, snaps))
}

/// One kernel step of the reference sampler: `Y_mis | B, Σ`, then
/// `Σ | Y ∼ IW(ν_n, S_n)`, then `B | Σ, Y ∼ MN(B_n, V_n, Σ)`.
/// Returns the parameters used for the imputation step.
pub fn mvn_da_sweep(
    state: &mut ChainState,
    x: &Matrix,
    groups: &[PatternGroup],
    prior: &PriorSpec,
    eps: f64,
) -> Result<ParamSnapshot> {
    let mean = x.matmul(&state.b);
    impute_missing(
        &mut state.y_star,
        &mean,
        &state.sigma,
        groups,
        Some(&mut state.rng),
        eps,
        state.iter,
        &mut state.stabilization_log,
    )?;
    let snap = ParamSnapshot { mean, sigma: state.sigma.clone() };
    let post = complete_data_posterior(&state.y_star, x, prior)?;
    state.sigma = draw_inverse_wishart(&mut state.rng, post.nun, &post.sn)?;
    state.b = draw_matrix_normal(&mut state.rng, &post.bn, &post.vn, &state.sigma)?;
    Ok(snap)
}

/// Exact MVN data augmentation under the conjugate prior.
pub fn mvn_da(block: &MaskedBlock, prior: &PriorSpec, cfg: &ChainConfig) -> Result<ImputationEnsemble> {
    check_inputs(block, prior, cfg)?;
    if block.p() > MAX_DA_DIM {
        return Err(Error::InvalidConfig(format!("exact sampler supports p <= {MAX_DA_DIM}, got {}", block.p())));
    }
    let x = block.x();
    let groups = pattern_groups(block.mask());
    let y0 = mean_fill(block);
    let post = complete_data_posterior(&y0, x, prior)?;
    let sigma0 = iw_mode(post.nun, &post.sn)?;
    let mut state = ChainState::new(y0, post.bn, sigma0, stream_rng(cfg.seed, STREAM_MVN_DA));
    let (draws, snapshots) = collect(&mut state, cfg, |s| mvn_da_sweep(s, x, &groups, prior, cfg.eps_jitter))?;
    Ok(ImputationEnsemble {
        method: Method::MvnDa,
        draws,
        mask: block.mask().clone(),
        elapsed_seconds: 0.0,
        config: EnsembleConfig::Chain(cfg.clone()),
        branch: None,
        stabilization: state.stabilization_log,
        eb_fit: None,
        snapshots,
        calibration: None,
    })
}

fn resolve_shared(block: &MaskedBlock, cfg: &ChainConfig, shared: Option<&SharedFit>) -> Result<SharedFit> {
    match shared {
        Some(s) => {
            if s.y_star.shape() != (block.n(), block.p()) || s.b.shape() != (block.k(), block.p()) {
                return Err(Error::ShapeMismatch("shared fit does not match the block".into()));
            }
            Ok(s.clone())
        }
        None => shared_eb_fit(block, cfg),
    }
}

/// Deterministic HIMA chain: conditional-mean fill, ridge mean and EB mode
/// during burn-in, then `M` conditional draws from the frozen `(B, Σ_δ)`.
pub fn hima_chain(
    block: &MaskedBlock,
    prior: &PriorSpec,
    cfg: &ChainConfig,
    shared: Option<&SharedFit>,
) -> Result<ImputationEnsemble> {
    check_inputs(block, prior, cfg)?;
    let x = block.x();
    let ridge = Ridge::new(x, cfg.alpha_ridge)?;
    let groups = pattern_groups(block.mask());
    let shared = resolve_shared(block, cfg, shared)?;
    let mut log = shared.events.clone();
    let mut y = shared.y_star.clone();
    let mut b = shared.b.clone();
    let mut sigma = shared.fit.sigma_mode.clone();
    for t in 0..cfg.burn_in {
        let sd = stabilized(&sigma, cfg.eps_jitter)?;
        impute_missing::<ChaCha8Rng>(&mut y, &x.matmul(&b), &sd, &groups, None, cfg.eps_jitter, t, &mut log)?;
        b = ridge.mean(x, &y);
        let fit = eb_covariance_fit(&y.sub(&x.matmul(&b)), cfg.eb_terms)?;
        log_fit(&fit, t, &mut log);
        sigma = fit.sigma_mode;
    }
    let mean = x.matmul(&b);
    let sd = stabilized(&sigma, cfg.eps_jitter)?;
    let mut rng = stream_rng(cfg.seed, STREAM_HIMA);
    let mut draws = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let mut d = y.clone();
        impute_missing(&mut d, &mean, &sd, &groups, Some(&mut rng), cfg.eps_jitter, cfg.burn_in, &mut log)?;
        draws.push(d);
    }
    let snap = ParamSnapshot { mean, sigma: sd };
    Ok(ImputationEnsemble {
        method: Method::Hima,
        draws,
        mask: block.mask().clone(),
        elapsed_seconds: 0.0,
        config: EnsembleConfig::Chain(cfg.clone()),
        branch: None,
        stabilization: log,
        eb_fit: Some(shared.fit),
        snapshots: vec![snap; cfg.m],
        calibration: None,
    })
}

/// The branch HIMCE takes on a block with `p` columns.
pub fn himce_branch(p: usize, cfg: &ChainConfig) -> Branch {
    if p <= cfg.exact_refresh_max_p {
        Branch::ExactRefresh
    } else {
        Branch::CovarianceMode
    }
}

/// Stochastic HIMCE chain started from the shared empirical-Bayes fit.
///
/// Exact branch: conditional draws under `Σ`, `B ∼ MN(B_n, V_n, Σ)`, then
/// `Σ ∼ IW(ν₀+n+k, S_c)`. Covariance-mode branch: conditional draws under
/// `Σ_δ`, a stochastic (local-)ridge mean draw, the EB mode of the current
/// residuals and the scalar bridge.
pub fn himce_chain(
    block: &MaskedBlock,
    prior: &PriorSpec,
    cfg: &ChainConfig,
    shared: Option<&SharedFit>,
) -> Result<ImputationEnsemble> {
    check_inputs(block, prior, cfg)?;
    let x = block.x();
    let (n, p) = (block.n(), block.p());
    let groups = pattern_groups(block.mask());
    let shared = resolve_shared(block, cfg, shared)?;
    let branch = himce_branch(p, cfg);
    let mut state = ChainState::new(
        shared.y_star.clone(),
        shared.b.clone(),
        shared.fit.sigma_mode.clone(),
        stream_rng(cfg.seed, STREAM_HIMCE),
    );
    state.stabilization_log = shared.events.clone();

    let (draws, snapshots) = match branch {
        Branch::ExactRefresh => collect(&mut state, cfg, |s| {
            let mean = x.matmul(&s.b);
            impute_missing(
                &mut s.y_star,
                &mean,
                &s.sigma,
                &groups,
                Some(&mut s.rng),
                cfg.eps_jitter,
                s.iter,
                &mut s.stabilization_log,
            )?;
            let snap = ParamSnapshot { mean, sigma: s.sigma.clone() };
            let post = complete_data_posterior(&s.y_star, x, prior)?;
            s.b = draw_matrix_normal(&mut s.rng, &post.bn, &post.vn, &s.sigma)?;
            let (nu_c, s_c) = conditional_sigma_scale(&s.b, &s.y_star, x, prior)?;
            s.sigma = draw_inverse_wishart(&mut s.rng, nu_c, &s_c)?;
            Ok(snap)
        })?,
        Branch::CovarianceMode => {
            let ridge = Ridge::new(x, cfg.alpha_ridge)?;
            let screens: Vec<Vec<usize>> = if cfg.screen_size > 0 {
                let corr = available_case_correlation(block);
                (0..p).map(|j| top_predictors(&corr, j, cfg.screen_size)).collect()
            } else {
                Vec::new()
            };
            let obs_rows: Vec<Vec<usize>> =
                (0..p).map(|j| (0..n).filter(|&i| block.mask().is_observed(i, j)).collect()).collect();
            let mut mean = x.matmul(&state.b);
            let mut holdout_mean = mean.clone();
            collect(&mut state, cfg, |s| {
                let sd = stabilized(&s.sigma, cfg.eps_jitter)?;
                impute_missing(
                    &mut s.y_star,
                    &mean,
                    &sd,
                    &groups,
                    Some(&mut s.rng),
                    cfg.eps_jitter,
                    s.iter,
                    &mut s.stabilization_log,
                )?;
                let snap = ParamSnapshot { mean: holdout_mean.clone(), sigma: sd };
                let diag = s.sigma.diag();
                if screens.is_empty() {
                    s.b = ridge.draw(&mut s.rng, x, &s.y_star, &diag);
                    mean = x.matmul(&s.b);
                    holdout_mean = mean.clone();
                } else {
                    for j in 0..p {
                        let (fit_j, loo_j, coef) = local_ridge_draw(
                            &mut s.rng,
                            x,
                            &s.y_star,
                            j,
                            &obs_rows[j],
                            &screens[j],
                            cfg.alpha_ridge,
                            diag[j],
                        )?;
                        mean.set_col(j, &fit_j);
                        holdout_mean.set_col(j, &loo_j);
                        for (r, c) in coef.into_iter().enumerate() {
                            s.b[(r, j)] = c;
                        }
                    }
                }
                let fit = eb_covariance_fit(&s.y_star.sub(&mean), cfg.eb_terms)?;
                log_fit(&fit, s.iter, &mut s.stabilization_log);
                s.sigma = scalar_bridge(&mut s.rng, &fit.sigma_mode, cfg.bridge_df, cfg.bridge_max);
                Ok(snap)
            })?
        }
    };
    Ok(ImputationEnsemble {
        method: Method::Himce,
        draws,
        mask: block.mask().clone(),
        elapsed_seconds: 0.0,
        config: EnsembleConfig::Chain(cfg.clone()),
        branch: Some(branch),
        stabilization: state.stabilization_log,
        eb_fit: Some(shared.fit),
        snapshots,
        calibration: None,
    })
}
