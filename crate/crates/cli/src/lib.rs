//! File formats, timed pipelines and benchmark drivers around `covmode`.

pub mod bench;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod store;
