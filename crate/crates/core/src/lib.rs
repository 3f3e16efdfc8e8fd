//! Multiple imputation for continuous blocks under a Gaussian working model.
//!
//! The crate provides the exact MVN data-augmentation sampler, the HIMA and
//! HIMCE covariance-mode chains, a screened Gaussian FCS comparator, the
//! observed-cell calibration layer, pseudo-missing diagnostics and the
//! spatial simulation design. It is `no_std` and needs only `alloc`.

#![no_std]
// When any crate in the graph links std, its inherent float methods shadow
// `num_traits::Float`.
#![allow(unused_imports)]

extern crate alloc;

pub mod calibrate;
pub mod chains;
pub mod diagnostics;
pub mod eb;
pub mod error;
pub mod linalg;
pub mod matrix;
pub mod mice;
pub mod model;
pub mod screen;
pub mod sim;

pub use calibrate::{calibrate_observed_cells, CalibrationReport};
pub use chains::{
    himce_chain, hima_chain, mvn_da, scalar_bridge, shared_eb_fit, stream_rng, Branch, ChainConfig, ChainState,
    ImputationEnsemble, Method, SharedFit, StabilizationEvent,
};
pub use diagnostics::{diagnose, rubin_pool, CellDraws, DiagnosticsReport, PooledEstimate};
pub use eb::{conjugate_mode_update, eb_covariance_fit, gauss_2f1_truncated, EbFit};
pub use error::{Error, Result};
pub use linalg::{cholesky, jitter, nearest_spd, ridge_covariance, shrink_covariance, CholeskyFactor, SpdMatrix};
pub use matrix::Matrix;
pub use mice::{mice_impute, FcsConfig};
pub use model::{
    complete_data_posterior, conditional_gaussian, conditional_sigma_scale, draw_inverse_wishart, draw_matrix_normal,
    iw_mode, Mask, MaskedBlock, PosteriorSummary, PriorSpec,
};
pub use sim::{mask_mcar, simulate_spatial, BenchmarkRow, MaskedDraw, SpatialSimConfig};
