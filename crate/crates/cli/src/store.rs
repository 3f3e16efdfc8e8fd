//! On-disk ensembles: `imp_001.csv`, … plus `mask.csv` and `meta.json`.

use std::path::{Path, PathBuf};

use covmode::{Branch, CalibrationReport, EbFit, ImputationEnsemble, Mask, Matrix, Method};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, read_mask, read_table, write_json, write_mask, write_matrix};

pub const META_FILE: &str = "meta.json";
pub const MASK_FILE: &str = "mask.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub method: Method,
    pub m: usize,
    pub seed: u64,
    pub headers: Vec<String>,
    pub config: covmode::chains::EnsembleConfig,
    pub elapsed_seconds: f64,
    /// Seconds spent in observed-cell calibration, reported apart from the chain.
    pub calibration_seconds: Option<f64>,
    pub branch: Option<Branch>,
    pub stabilization: covmode::chains::StabilizationCounts,
    /// SHA-256 of the shared empirical-Bayes fit the chain started from.
    pub eb_fingerprint: Option<String>,
    pub calibration: Option<CalibrationReport>,
}

/// Hex SHA-256 over the little-endian bytes of the fit's defining quantities.
pub fn eb_fingerprint(fit: &EbFit) -> String {
    let mut h = Sha256::new();
    for v in [fit.rho_bar, fit.lambda_eb] {
        h.update(v.to_le_bytes());
    }
    for m in [&fit.z, fit.sigma_mode.as_matrix(), &fit.sample_cov] {
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn draw_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("imp_{:03}.csv", index + 1))
}

pub fn write_ensemble(
    dir: &Path,
    ens: &ImputationEnsemble,
    headers: &[String],
    seed: u64,
    calibration_seconds: Option<f64>,
) -> CliResult<EnsembleMeta> {
    ensure_dir(dir)?;
    for (t, d) in ens.draws.iter().enumerate() {
        write_matrix(&draw_path(dir, t), headers, d, None)?;
    }
    write_mask(&dir.join(MASK_FILE), headers, &ens.mask)?;
    let meta = EnsembleMeta {
        method: ens.method,
        m: ens.m(),
        seed,
        headers: headers.to_vec(),
        config: ens.config.clone(),
        elapsed_seconds: ens.elapsed_seconds,
        calibration_seconds,
        branch: ens.branch,
        stabilization: ens.stabilization_counts(),
        eb_fingerprint: ens.eb_fit.as_ref().map(eb_fingerprint),
        calibration: ens.calibration.clone(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

/// A stored ensemble as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredEnsemble {
    pub meta: EnsembleMeta,
    pub mask: Mask,
    pub draws: Vec<Matrix>,
}

pub fn read_meta(dir: &Path) -> CliResult<EnsembleMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))
}

pub fn read_ensemble(dir: &Path) -> CliResult<StoredEnsemble> {
    let meta = read_meta(dir)?;
    let (_, mask) = read_mask(&dir.join(MASK_FILE))?;
    let mut draws = Vec::with_capacity(meta.m);
    for t in 0..meta.m {
        let table = read_table(&draw_path(dir, t))?;
        if table.values.shape() != mask.shape() {
            return Err(CliError::Validation(format!(
                "{}: shape {:?} does not match mask {:?}",
                draw_path(dir, t).display(),
                table.values.shape(),
                mask.shape()
            )));
        }
        draws.push(table.values);
    }
    Ok(StoredEnsemble { meta, mask, draws })
}

impl StoredEnsemble {
    /// Rebuilds an in-memory ensemble (without parameter snapshots).
    pub fn into_ensemble(self) -> ImputationEnsemble {
        ImputationEnsemble {
            method: self.meta.method,
            draws: self.draws,
            mask: self.mask,
            elapsed_seconds: self.meta.elapsed_seconds,
            config: self.meta.config,
            branch: self.meta.branch,
            stabilization: Vec::new(),
            eb_fit: None,
            snapshots: Vec::new(),
            calibration: self.meta.calibration,
        }
    }
}
