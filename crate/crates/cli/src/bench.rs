//! Repeated pseudo-missing benchmarks over simulated or user-supplied blocks.

use std::path::Path;

use covmode::diagnostics::{cells_from_ensemble, diagnose};
use covmode::sim::{metric_values, METRICS};
use covmode::{
    mask_mcar, simulate_spatial, stream_rng, BenchmarkRow, DiagnosticsReport, Error, MaskedDraw, Matrix,
    Method, SpatialSimConfig,
};
use log::{info, warn};
use rand::RngCore;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, fmt_f64, read_table, write_matrix};
use crate::pipeline::{joint_chains, run_mice, Imputed};
use crate::store::write_ensemble;

/// Methods compared by both benchmarks, in table order.
pub const BENCH_METHODS: [Method; 3] = [Method::Hima, Method::Himce, Method::Mice];
/// Complete rows the low-dimensional benchmark needs after row filtering.
pub const MIN_COMPLETE_ROWS: usize = 8;

const STREAM_REPLICATE_SEED: u64 = 1 << 20;
const STREAM_DATA: u64 = 0;

/// Seed of replicate `r`, drawn from its own stream of the run seed.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    stream_rng(seed, STREAM_REPLICATE_SEED + r as u64).next_u64()
}

/// Simulates and masks one spatial block from `seed`.
pub fn spatial_data(sim: &SpatialSimConfig, seed: u64) -> CliResult<MaskedDraw> {
    let mut rng = stream_rng(seed, STREAM_DATA);
    let (y, x) = simulate_spatial(sim, &mut rng)?;
    Ok(mask_mcar(&mut rng, &y, &x, sim.mask_rate)?)
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub imputed: Imputed,
    pub report: DiagnosticsReport,
}

#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub data: MaskedDraw,
    pub runs: Vec<MethodRun>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub rows: Vec<BenchmarkRow>,
    pub replicates: Vec<ReplicateOutcome>,
    pub skipped: Vec<(usize, String)>,
}

impl BenchmarkOutput {
    pub fn row(&self, method: Method) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// HIMA, calibrated HIMCE and MICE on one masked block, each diagnosed
/// against the withheld truths.
pub fn run_methods(data: &MaskedDraw, cfg: &RunConfig) -> CliResult<Vec<MethodRun>> {
    let (hima, himce) = joint_chains(&data.block, cfg)?;
    let mice = run_mice(&data.block, cfg)?;
    [(Method::Hima, hima), (Method::Himce, himce), (Method::Mice, mice)]
        .into_iter()
        .map(|(method, imputed)| {
            let report = diagnose(&imputed.ensemble, &data.block, &data.truth, cfg.seed)?;
            Ok(MethodRun { method, imputed, report })
        })
        .collect()
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.chain.seed = seed;
    c.fcs.seed = seed;
    c.sim.seed = seed;
    c
}

/// Runs `replicate` for `0..replicates` on a pool of `cfg.workers` threads and
/// aggregates in replicate order.
fn drive<F>(cfg: &RunConfig, replicate: F) -> CliResult<BenchmarkOutput>
where
    F: Fn(usize, &RunConfig) -> CliResult<MaskedDraw> + Sync,
{
    cfg.validate()?;
    if cfg.sim.replicates < 2 {
        return Err(CliError::Validation(format!("benchmarks need at least 2 replicates, got {}", cfg.sim.replicates)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let results: Vec<(usize, u64, CliResult<ReplicateOutcome>)> = pool.install(|| {
        (0..cfg.sim.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = replicate_seed(cfg.seed, r);
                let rc = with_seed(cfg, seed);
                let out = replicate(r, &rc).and_then(|data| {
                    let runs = run_methods(&data, &rc)?;
                    Ok(ReplicateOutcome { replicate: r, seed, data, runs })
                });
                (r, seed, out)
            })
            .collect()
    });
    let mut replicates = Vec::new();
    let mut skipped = Vec::new();
    for (r, seed, out) in results {
        match out {
            Ok(o) => {
                info!("replicate {} (seed {seed}) done", r + 1);
                replicates.push(o);
            }
            Err(e) if cfg.allow_skip => {
                warn!("replicate {} (seed {seed}) skipped: {e}", r + 1);
                skipped.push((r, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if replicates.is_empty() {
        return Err(CliError::Validation("every replicate failed".into()));
    }
    let rows = BENCH_METHODS
        .iter()
        .map(|&m| {
            let reports: Vec<DiagnosticsReport> = replicates
                .iter()
                .flat_map(|o| o.runs.iter().filter(|run| run.method == m).map(|run| run.report.clone()))
                .collect();
            BenchmarkRow::aggregate(m, &reports)
        })
        .collect();
    Ok(BenchmarkOutput { rows, replicates, skipped })
}

pub fn run_spatial_benchmark(cfg: &RunConfig) -> CliResult<BenchmarkOutput> {
    drive(cfg, |_, rc| spatial_data(&rc.sim, rc.seed))
}

/// A complete-row block extracted from a CSV: standardized targets and a
/// design of intercept plus standardized covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct LowDimData {
    pub y: Matrix,
    pub x: Matrix,
    pub target_cols: Vec<String>,
    pub dropped_rows: usize,
}

fn standardize(col: &mut [f64]) {
    let n = col.len() as f64;
    let mu = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    for v in col {
        *v = (*v - mu) / sd;
    }
}

/// Keeps rows with every target and design column present, then standardizes.
pub fn load_lowdim(path: &Path, target_cols: &[String], design_cols: &[String]) -> CliResult<LowDimData> {
    let table = read_table(path)?;
    let t_idx: Vec<usize> = target_cols.iter().map(|c| table.column_index(c)).collect::<CliResult<_>>()?;
    let d_idx: Vec<usize> = design_cols.iter().map(|c| table.column_index(c)).collect::<CliResult<_>>()?;
    if t_idx.len() < 2 {
        return Err(CliError::Validation("the low-dimensional benchmark needs at least two target columns".into()));
    }
    let rows: Vec<usize> = (0..table.values.nrows())
        .filter(|&i| t_idx.iter().chain(&d_idx).all(|&j| table.mask.is_observed(i, j)))
        .collect();
    if rows.len() < MIN_COMPLETE_ROWS {
        return Err(Error::TooFewCompleteRows(rows.len()).into());
    }
    let mut y = table.values.select(&rows, &t_idx);
    for j in 0..y.ncols() {
        let mut c = y.col(j);
        standardize(&mut c);
        y.set_col(j, &c);
    }
    let mut x = Matrix::from_fn(rows.len(), 1 + d_idx.len(), |_, _| 1.0);
    for (c, &j) in d_idx.iter().enumerate() {
        let mut col: Vec<f64> = rows.iter().map(|&i| table.values[(i, j)]).collect();
        standardize(&mut col);
        x.set_col(c + 1, &col);
    }
    Ok(LowDimData { y, x, target_cols: target_cols.to_vec(), dropped_rows: table.values.nrows() - rows.len() })
}

pub fn run_lowdim_benchmark(data: &LowDimData, cfg: &RunConfig) -> CliResult<BenchmarkOutput> {
    drive(cfg, |_, rc| {
        let mut rng = stream_rng(rc.seed, STREAM_DATA);
        Ok(mask_mcar(&mut rng, &data.y, &data.x, rc.sim.mask_rate)?)
    })
}

/// Synthetic stand-in with columns `age, bmi, chl`: `rows` subjects of a
/// bivariate spatial draw with one covariate, mapped to clinical-looking units.
pub fn lowdim_fixture(rows: usize, seed: u64) -> CliResult<(Vec<String>, Matrix)> {
    let sim = SpatialSimConfig {
        n: rows,
        grid: vec![2],
        p: 2,
        strong_slope_cols: 1,
        replicates: 1,
        seed,
        ..SpatialSimConfig::default()
    };
    let (y, x) = simulate_spatial(&sim, &mut stream_rng(seed, STREAM_DATA))?;
    let m = Matrix::from_fn(rows, 3, |i, j| match j {
        0 => 50.0 + 15.0 * x[(i, 1)],
        1 => 26.0 + 4.0 * y[(i, 0)],
        _ => 190.0 + 40.0 * y[(i, 1)],
    });
    Ok((vec!["age".into(), "bmi".into(), "chl".into()], m))
}

/// Renders `mean (sd)` with both numbers in round-trip precision.
pub fn summary_cell(mean: f64, sd: f64) -> String {
    format!("{} ({})", fmt_f64(mean), fmt_f64(sd))
}

/// Inverse of [`summary_cell`].
pub fn parse_summary_cell(cell: &str) -> Option<(f64, f64)> {
    let (m, rest) = cell.split_once(" (")?;
    let s = rest.strip_suffix(')')?;
    Some((m.parse().ok()?, s.parse().ok()?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

pub fn write_summary(path: &Path, rows: &[BenchmarkRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["method".to_string(), "replicates".to_string()];
    header.extend(METRICS.iter().map(|m| m.to_string()));
    w.write_record(&header).map_err(csv_err(path))?;
    for row in rows {
        let mut rec = vec![row.method.to_string(), row.replicates.to_string()];
        rec.extend((0..METRICS.len()).map(|c| summary_cell(row.mean[c], row.sd[c])));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_replicates(path: &Path, out: &BenchmarkOutput) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["replicate".to_string(), "seed".to_string(), "method".to_string()];
    header.extend(METRICS.iter().map(|m| m.to_string()));
    w.write_record(&header).map_err(csv_err(path))?;
    for o in &out.replicates {
        for run in &o.runs {
            let mut rec = vec![(o.replicate + 1).to_string(), o.seed.to_string(), run.method.to_string()];
            rec.extend(metric_values(&run.report).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Per-cell PIT values (`pit_export.csv`) and posterior means against truths
/// (`overlay_export.csv`) for every replicate and method.
pub fn write_exports(dir: &Path, out: &BenchmarkOutput) -> CliResult<()> {
    let pit_path = dir.join("pit_export.csv");
    let overlay_path = dir.join("overlay_export.csv");
    let mut pit = csv::Writer::from_path(&pit_path).map_err(csv_err(&pit_path))?;
    let mut overlay = csv::Writer::from_path(&overlay_path).map_err(csv_err(&overlay_path))?;
    pit.write_record(["replicate", "method", "row", "col", "pit"]).map_err(csv_err(&pit_path))?;
    overlay
        .write_record(["replicate", "method", "row", "col", "truth", "posterior_mean"])
        .map_err(csv_err(&overlay_path))?;
    for o in &out.replicates {
        for run in &o.runs {
            let cells = cells_from_ensemble(&run.imputed.ensemble, &o.data.truth)?;
            write_cell_exports(&mut pit, &mut overlay, &(o.replicate + 1).to_string(), run.method, &cells, &run.report)
                .map_err(csv_err(&pit_path))?;
        }
    }
    pit.flush().map_err(|e| CliError::io(&pit_path, e))?;
    overlay.flush().map_err(|e| CliError::io(&overlay_path, e))
}

pub fn write_cell_exports<W: std::io::Write>(
    pit: &mut csv::Writer<W>,
    overlay: &mut csv::Writer<W>,
    replicate: &str,
    method: Method,
    cells: &[covmode::CellDraws],
    report: &DiagnosticsReport,
) -> Result<(), csv::Error> {
    let m = method.to_string();
    for (cell, u) in cells.iter().zip(&report.pit_values) {
        let (row, col) = ((cell.row + 1).to_string(), (cell.col + 1).to_string());
        pit.write_record([replicate, &m, &row, &col, &fmt_f64(*u)])?;
        overlay.write_record([replicate, &m, &row, &col, &fmt_f64(cell.truth), &fmt_f64(cell.mean())])?;
    }
    Ok(())
}

/// Writes the summary tables, the cell exports and the first replicate's
/// ensembles under `dir`.
pub fn write_outputs(dir: &Path, out: &BenchmarkOutput, headers: &[String]) -> CliResult<()> {
    ensure_dir(dir)?;
    write_summary(&dir.join("summary.csv"), &out.rows)?;
    write_replicates(&dir.join("replicates.csv"), out)?;
    write_exports(dir, out)?;
    if let Some(first) = out.replicates.first() {
        let base = dir.join(format!("ensembles_rep{:03}", first.replicate + 1));
        ensure_dir(&base)?;
        write_matrix(&base.join("truth.csv"), headers, &first.data.truth, None)?;
        for run in &first.runs {
            write_ensemble(
                &base.join(run.method.as_str()),
                &run.imputed.ensemble,
                headers,
                first.seed,
                run.imputed.calibration_seconds,
            )?;
        }
    }
    Ok(())
}

/// True when every draw of every ensemble keeps the observed cells of its block.
pub fn observed_cells_immutable(out: &BenchmarkOutput) -> bool {
    out.replicates.iter().all(|o| o.runs.iter().all(|r| r.imputed.ensemble.respects_observed(&o.data.block)))
}

