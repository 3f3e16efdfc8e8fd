//! Timed method execution shared by `impute` and the benchmark drivers.

use std::time::Instant;

use covmode::{
    calibrate_observed_cells, hima_chain, himce_chain, mice_impute, mvn_da, shared_eb_fit, Error, ImputationEnsemble,
    MaskedBlock, Method, PriorSpec, SharedFit,
};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::CliResult;

/// An ensemble plus the calibration time kept apart from `elapsed_seconds`.
#[derive(Clone, Debug)]
pub struct Imputed {
    pub ensemble: ImputationEnsemble,
    pub calibration_seconds: Option<f64>,
}

pub fn prior_for(block: &MaskedBlock, cfg: &RunConfig) -> CliResult<PriorSpec> {
    Ok(PriorSpec::weak(block.p(), block.k(), cfg.prior_alpha)?)
}

/// The shared empirical-Bayes fit and the seconds it took.
pub fn timed_shared_fit(block: &MaskedBlock, cfg: &RunConfig) -> CliResult<(SharedFit, f64)> {
    let t = Instant::now();
    let fit = shared_eb_fit(block, &cfg.chain)?;
    Ok((fit, t.elapsed().as_secs_f64()))
}

/// Calibrates `himce` against `hima`; too few observed cells leaves the
/// ensemble uncalibrated with a warning.
pub fn calibrate_or_keep(
    himce: ImputationEnsemble,
    hima: &ImputationEnsemble,
    block: &MaskedBlock,
    cfg: &RunConfig,
) -> CliResult<Imputed> {
    let t = Instant::now();
    match calibrate_observed_cells(&himce, hima, block, cfg.holdout_frac, cfg.chain.seed) {
        Ok(calibrated) => {
            let secs = t.elapsed().as_secs_f64();
            Ok(Imputed { ensemble: calibrated, calibration_seconds: Some(secs) })
        }
        Err(e @ Error::InsufficientObserved { .. }) => {
            warn!("calibration skipped: {e}");
            Ok(Imputed { ensemble: himce, calibration_seconds: None })
        }
        Err(e) => Err(e.into()),
    }
}

/// HIMA and HIMCE on one shared fit; each `elapsed_seconds` includes the
/// shared fit, and HIMCE is calibrated when enabled.
pub fn joint_chains(block: &MaskedBlock, cfg: &RunConfig) -> CliResult<(Imputed, Imputed)> {
    let prior = prior_for(block, cfg)?;
    let (shared, fit_secs) = timed_shared_fit(block, cfg)?;
    let t = Instant::now();
    let mut hima = hima_chain(block, &prior, &cfg.chain, Some(&shared))?;
    hima.elapsed_seconds = fit_secs + t.elapsed().as_secs_f64();
    let t = Instant::now();
    let mut himce = himce_chain(block, &prior, &cfg.chain, Some(&shared))?;
    himce.elapsed_seconds = fit_secs + t.elapsed().as_secs_f64();
    let himce = if cfg.calibrate {
        calibrate_or_keep(himce, &hima, block, cfg)?
    } else {
        Imputed { ensemble: himce, calibration_seconds: None }
    };
    Ok((Imputed { ensemble: hima, calibration_seconds: None }, himce))
}

pub fn run_mice(block: &MaskedBlock, cfg: &RunConfig) -> CliResult<Imputed> {
    let t = Instant::now();
    let mut ens = mice_impute(block, &cfg.fcs)?;
    ens.elapsed_seconds = t.elapsed().as_secs_f64();
    Ok(Imputed { ensemble: ens, calibration_seconds: None })
}

/// Runs one method on `block` under `cfg`.
pub fn impute(method: Method, block: &MaskedBlock, cfg: &RunConfig) -> CliResult<Imputed> {
    info!("running {method} on n={} p={} k={} with {} missing cells", block.n(), block.p(), block.k(), block.mask().missing_count());
    match method {
        Method::MvnDa => {
            let prior = prior_for(block, cfg)?;
            let t = Instant::now();
            let mut ens = mvn_da(block, &prior, &cfg.chain)?;
            ens.elapsed_seconds = t.elapsed().as_secs_f64();
            Ok(Imputed { ensemble: ens, calibration_seconds: None })
        }
        Method::Hima => Ok(joint_chains(block, &RunConfig { calibrate: false, ..cfg.clone() })?.0),
        Method::Himce => Ok(joint_chains(block, cfg)?.1),
        Method::Mice => run_mice(block, cfg),
    }
}
