use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covmode::diagnostics::{cells_from_ensemble, diagnose};
use covmode::{Mask, MaskedBlock, Matrix};
use covmode_cli::bench::{
    lowdim_fixture, load_lowdim, run_lowdim_benchmark, run_spatial_benchmark, spatial_data, write_cell_exports,
    write_outputs,
};
use covmode_cli::config::RunConfig;
use covmode_cli::error::{CliError, CliResult};
use covmode_cli::io::{default_headers, ensure_dir, read_table, write_json, write_mask, write_matrix};
use covmode_cli::pipeline::impute;
use covmode_cli::store::{read_ensemble, write_ensemble};

#[derive(Parser)]
#[command(name = "covmode", version, about = "Multiple imputation for continuous blocks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// mvn_da, hima, himce or mice.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Completed datasets to store.
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long = "mask-rate", global = true)]
    mask_rate: Option<f64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Skip failing benchmark replicates instead of aborting.
    #[arg(long = "allow-skip", global = true)]
    allow_skip: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Data CSV; empty fields are missing.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Design CSV (defaults to an intercept column).
    #[arg(long, global = true)]
    design: Option<PathBuf>,
    #[arg(long, global = true)]
    truth: Option<PathBuf>,
    /// Ensemble directory written by `impute`.
    #[arg(long, global = true)]
    ensemble: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a spatial block and write truth, masked data, mask and design.
    Simulate,
    /// Impute a masked CSV into an ensemble directory.
    Impute,
    /// Score an ensemble against withheld truths.
    Diagnose,
    /// Repeated pseudo-missing benchmarks.
    #[command(subcommand)]
    Bench(BenchKind),
}

#[derive(Subcommand)]
enum BenchKind {
    /// Simulated spatial blocks.
    Spatial,
    /// Complete rows of a small CSV (synthetic fixture when `--input` is absent).
    Lowdim,
}

fn resolve(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut flags: Vec<(&str, String)> = Vec::new();
    let path = |p: &Path| p.display().to_string();
    if let Some(v) = c.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = &c.method {
        flags.push(("method", v.clone()));
    }
    if let Some(v) = c.m {
        flags.push(("m", v.to_string()));
    }
    if let Some(v) = c.mask_rate {
        flags.push(("mask_rate", v.to_string()));
    }
    if let Some(v) = c.replicates {
        flags.push(("replicates", v.to_string()));
    }
    if let Some(v) = c.workers {
        flags.push(("workers", v.to_string()));
    }
    if c.allow_skip {
        flags.push(("allow_skip", "true".into()));
    }
    for (key, p) in [("out", &c.out), ("input", &c.input), ("design", &c.design), ("truth", &c.truth), ("ensemble", &c.ensemble)] {
        if let Some(p) = p {
            flags.push((key, path(p)));
        }
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Validation(format!("--{flag} is required")))
}

fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let data = spatial_data(&cfg.sim, cfg.seed)?;
    let headers = default_headers("y", data.truth.ncols());
    ensure_dir(&cfg.out)?;
    write_matrix(&cfg.out.join("truth.csv"), &headers, &data.truth, None)?;
    write_matrix(&cfg.out.join("masked.csv"), &headers, data.block.y(), Some(data.block.mask()))?;
    write_mask(&cfg.out.join("mask.csv"), &headers, data.block.mask())?;
    let design_headers: Vec<String> = vec!["intercept".into(), "age".into()];
    write_matrix(&cfg.out.join("design.csv"), &design_headers, data.block.x(), None)?;
    println!("wrote {} rows x {} columns to {}", data.truth.nrows(), data.truth.ncols(), cfg.out.display());
    Ok(())
}

fn read_block(input: &Path, design: Option<&Path>) -> CliResult<(Vec<String>, MaskedBlock)> {
    let table = read_table(input)?;
    let x = match design {
        Some(path) => read_table(path)?.values,
        None => Matrix::from_fn(table.values.nrows(), 1, |_, _| 1.0),
    };
    Ok((table.headers, MaskedBlock::new(table.values, table.mask, x)?))
}

fn cmd_impute(cfg: &RunConfig) -> CliResult<()> {
    let (headers, block) = read_block(required(&cfg.input, "input")?, cfg.design.as_deref())?;
    let imputed = impute(cfg.method, &block, cfg)?;
    let meta = write_ensemble(&cfg.out, &imputed.ensemble, &headers, cfg.seed, imputed.calibration_seconds)?;
    println!(
        "{}: {} draws in {:.3}s written to {}",
        meta.method,
        meta.m,
        meta.elapsed_seconds,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_diagnose(cfg: &RunConfig) -> CliResult<()> {
    let stored = read_ensemble(required(&cfg.ensemble, "ensemble")?)?;
    let truth_path = required(&cfg.truth, "truth")?;
    let truth = read_table(truth_path)?;
    if truth.values.shape() != stored.mask.shape() {
        return Err(CliError::Validation(format!(
            "truth {:?} does not align with ensemble mask {:?}",
            truth.values.shape(),
            stored.mask.shape()
        )));
    }
    if let Some((i, j)) = stored.mask.missing_cells().into_iter().find(|&(i, j)| !truth.mask.is_observed(i, j)) {
        return Err(CliError::Validation(format!("truth has no value at withheld cell ({}, {})", i + 1, j + 1)));
    }
    let headers = stored.meta.headers.clone();
    let mask: Mask = stored.mask.clone();
    let ens = stored.into_ensemble();
    let n = mask.shape().0;
    let block = MaskedBlock::new(ens.draws[0].clone(), mask, Matrix::from_fn(n, 1, |_, _| 1.0))?;
    let report = diagnose(&ens, &block, &truth.values, cfg.seed)?;
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    let cells = cells_from_ensemble(&ens, &truth.values)?;
    let (pit_path, overlay_path) = (cfg.out.join("pit_export.csv"), cfg.out.join("overlay_export.csv"));
    let mut pit = csv::Writer::from_path(&pit_path).map_err(|e| CliError::io(&pit_path, e))?;
    let mut overlay = csv::Writer::from_path(&overlay_path).map_err(|e| CliError::io(&overlay_path, e))?;
    pit.write_record(["replicate", "method", "row", "col", "pit"]).map_err(|e| CliError::io(&pit_path, e))?;
    overlay
        .write_record(["replicate", "method", "row", "col", "truth", "posterior_mean"])
        .map_err(|e| CliError::io(&overlay_path, e))?;
    write_cell_exports(&mut pit, &mut overlay, "1", ens.method, &cells, &report).map_err(|e| CliError::io(&pit_path, e))?;
    pit.flush().map_err(|e| CliError::io(&pit_path, e))?;
    overlay.flush().map_err(|e| CliError::io(&overlay_path, e))?;
    println!(
        "{} cells over {} columns: rmse {:.4} cov90 {:.4} cov95 {:.4} pit_ks {:.4}",
        report.cells,
        headers.len(),
        report.rmse,
        report.cov90,
        report.cov95,
        report.pit_ks
    );
    Ok(())
}

fn print_rows(out: &covmode_cli::bench::BenchmarkOutput) {
    println!("{:<8} {:>8} {:>8} {:>8} {:>8} {:>9}", "method", "rmse", "cov90", "cov95", "pit_ks", "time_s");
    for row in &out.rows {
        let g = |k: &str| row.metric(k).map_or(f64::NAN, |v| v.0);
        println!(
            "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
            row.method.as_str(),
            g("rmse"),
            g("cov90"),
            g("cov95"),
            g("pit_ks"),
            g("time")
        );
    }
    if !out.skipped.is_empty() {
        println!("skipped replicates: {:?}", out.skipped.iter().map(|(r, _)| r + 1).collect::<Vec<_>>());
    }
}

fn cmd_bench(kind: &BenchKind, cfg: &RunConfig) -> CliResult<()> {
    ensure_dir(&cfg.out)?;
    let (out, headers) = match kind {
        BenchKind::Spatial => (run_spatial_benchmark(cfg)?, default_headers("y", cfg.sim.p)),
        BenchKind::Lowdim => {
            let input = match &cfg.input {
                Some(p) => p.clone(),
                None => {
                    let (headers, m) = lowdim_fixture(13, cfg.seed)?;
                    let path = cfg.out.join("fixture.csv");
                    write_matrix(&path, &headers, &m, None)?;
                    path
                }
            };
            let data = load_lowdim(&input, &cfg.target_cols, &cfg.design_cols)?;
            (run_lowdim_benchmark(&data, cfg)?, data.target_cols.clone())
        }
    };
    write_outputs(&cfg.out, &out, &headers)?;
    print_rows(&out);
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(&cli.common)?;
    println!("# effective configuration");
    print!("{}", cfg.render());
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Impute => cmd_impute(&cfg),
        Command::Diagnose => cmd_diagnose(&cfg),
        Command::Bench(kind) => cmd_bench(kind, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("COVMODE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
