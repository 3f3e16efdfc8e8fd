//! Plain-text `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then the config file, then command
//! line flags. Every layer goes through [`RunConfig::set`], so a key means the
//! same thing wherever it appears.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use covmode::{ChainConfig, FcsConfig, Method, SpatialSimConfig};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_HOLDOUT_FRAC: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    /// Ridge precision `α` of the weak prior `V₀⁻¹ = αI`.
    pub prior_alpha: f64,
    pub chain: ChainConfig,
    pub fcs: FcsConfig,
    pub sim: SpatialSimConfig,
    pub holdout_frac: f64,
    pub calibrate: bool,
    pub workers: usize,
    pub allow_skip: bool,
    pub target_cols: Vec<String>,
    pub design_cols: Vec<String>,
    pub input: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub ensemble: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: DEFAULT_SEED,
            method: Method::Himce,
            prior_alpha: 1.0,
            chain: ChainConfig::default(),
            fcs: FcsConfig::default(),
            sim: SpatialSimConfig::default(),
            holdout_frac: DEFAULT_HOLDOUT_FRAC,
            calibrate: true,
            workers: 1,
            allow_skip: false,
            target_cols: vec!["bmi".into(), "chl".into()],
            design_cols: vec!["age".into()],
            input: None,
            design: None,
            truth: None,
            ensemble: None,
            out: PathBuf::from("out"),
        };
        cfg.propagate_seed();
        cfg
    }
}

/// Every key accepted by [`RunConfig::set`], in the order they are printed.
pub const KEYS: [&str; 34] = [
    "seed",
    "method",
    "m",
    "prior_alpha",
    "burn_in",
    "thin",
    "inner",
    "alpha_ridge",
    "eps_jitter",
    "bridge_df",
    "bridge_max",
    "exact_refresh_max_p",
    "screen_size",
    "eb_terms",
    "eb_fit_iters",
    "mice_iters",
    "mice_max_screen",
    "n",
    "grid",
    "p",
    "kernel_scale",
    "kernel_var",
    "nugget",
    "strong_slope",
    "weak_slope",
    "strong_slope_cols",
    "mask_rate",
    "replicates",
    "holdout_frac",
    "calibrate",
    "workers",
    "allow_skip",
    "target_cols",
    "design_cols",
];

const PATH_KEYS: [&str; 5] = ["input", "design", "truth", "ensemble", "out"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| CliError::Validation(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Validation(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

impl RunConfig {
    fn propagate_seed(&mut self) {
        self.chain.seed = self.seed;
        self.fcs.seed = self.seed;
        self.sim.seed = self.seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.propagate_seed();
            }
            "method" => self.method = v.parse().map_err(|_| CliError::Validation(format!("unknown method `{v}`")))?,
            "m" => {
                self.chain.m = parse(key, v)?;
                self.fcs.m = self.chain.m;
            }
            "prior_alpha" => self.prior_alpha = parse(key, v)?,
            "burn_in" => self.chain.burn_in = parse(key, v)?,
            "thin" => self.chain.thin = parse(key, v)?,
            "inner" => self.chain.inner = parse(key, v)?,
            "alpha_ridge" => self.chain.alpha_ridge = parse(key, v)?,
            "eps_jitter" => self.chain.eps_jitter = parse(key, v)?,
            "bridge_df" => self.chain.bridge_df = parse(key, v)?,
            "bridge_max" => self.chain.bridge_max = parse(key, v)?,
            "exact_refresh_max_p" => self.chain.exact_refresh_max_p = parse(key, v)?,
            "screen_size" => self.chain.screen_size = parse(key, v)?,
            "eb_terms" => self.chain.eb_terms = parse(key, v)?,
            "eb_fit_iters" => self.chain.eb_fit_iters = parse(key, v)?,
            "mice_iters" => self.fcs.iters = parse(key, v)?,
            "mice_max_screen" => self.fcs.max_screen = parse(key, v)?,
            "n" => self.sim.n = parse(key, v)?,
            "grid" => {
                self.sim.grid = v
                    .split('x')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<CliResult<Vec<_>>>()?;
            }
            "p" => self.sim.p = parse(key, v)?,
            "kernel_scale" => self.sim.kernel_scale = parse(key, v)?,
            "kernel_var" => self.sim.kernel_var = parse(key, v)?,
            "nugget" => self.sim.nugget = parse(key, v)?,
            "strong_slope" => self.sim.strong_slope = parse(key, v)?,
            "weak_slope" => self.sim.weak_slope = parse(key, v)?,
            "strong_slope_cols" => self.sim.strong_slope_cols = parse(key, v)?,
            "mask_rate" => self.sim.mask_rate = parse(key, v)?,
            "replicates" => self.sim.replicates = parse(key, v)?,
            "holdout_frac" => self.holdout_frac = parse(key, v)?,
            "calibrate" => self.calibrate = parse_bool(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "allow_skip" => self.allow_skip = parse_bool(key, v)?,
            "target_cols" => self.target_cols = parse_list(v),
            "design_cols" => self.design_cols = parse_list(v),
            "input" => self.input = Some(PathBuf::from(v)),
            "design" => self.design = Some(PathBuf::from(v)),
            "truth" => self.truth = Some(PathBuf::from(v)),
            "ensemble" => self.ensemble = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(CliError::Validation(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("{origin}:{}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                CliError::Validation(msg) => CliError::Validation(format!("{origin}:{}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Cross-field checks of every constituent configuration.
    pub fn validate(&self) -> CliResult<()> {
        self.chain.validate()?;
        self.fcs.validate()?;
        self.sim.validate()?;
        if !(self.prior_alpha > 0.0 && self.prior_alpha.is_finite()) {
            return Err(CliError::Validation(format!("prior_alpha must be positive, got {}", self.prior_alpha)));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac <= 0.5) {
            return Err(CliError::Validation(format!("holdout_frac must lie in (0, 0.5], got {}", self.holdout_frac)));
        }
        if self.workers < 1 {
            return Err(CliError::Validation("workers must be at least 1".into()));
        }
        if self.chain.m != self.fcs.m {
            return Err(CliError::Validation("chain and FCS ensembles must store the same m".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let list = |v: &[String]| v.join(",");
        match key {
            "seed" => self.seed.to_string(),
            "method" => self.method.to_string(),
            "m" => self.chain.m.to_string(),
            "prior_alpha" => self.prior_alpha.to_string(),
            "burn_in" => self.chain.burn_in.to_string(),
            "thin" => self.chain.thin.to_string(),
            "inner" => self.chain.inner.to_string(),
            "alpha_ridge" => self.chain.alpha_ridge.to_string(),
            "eps_jitter" => self.chain.eps_jitter.to_string(),
            "bridge_df" => self.chain.bridge_df.to_string(),
            "bridge_max" => self.chain.bridge_max.to_string(),
            "exact_refresh_max_p" => self.chain.exact_refresh_max_p.to_string(),
            "screen_size" => self.chain.screen_size.to_string(),
            "eb_terms" => self.chain.eb_terms.to_string(),
            "eb_fit_iters" => self.chain.eb_fit_iters.to_string(),
            "mice_iters" => self.fcs.iters.to_string(),
            "mice_max_screen" => self.fcs.max_screen.to_string(),
            "n" => self.sim.n.to_string(),
            "grid" => self.sim.grid.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
            "p" => self.sim.p.to_string(),
            "kernel_scale" => self.sim.kernel_scale.to_string(),
            "kernel_var" => self.sim.kernel_var.to_string(),
            "nugget" => self.sim.nugget.to_string(),
            "strong_slope" => self.sim.strong_slope.to_string(),
            "weak_slope" => self.sim.weak_slope.to_string(),
            "strong_slope_cols" => self.sim.strong_slope_cols.to_string(),
            "mask_rate" => self.sim.mask_rate.to_string(),
            "replicates" => self.sim.replicates.to_string(),
            "holdout_frac" => self.holdout_frac.to_string(),
            "calibrate" => self.calibrate.to_string(),
            "workers" => self.workers.to_string(),
            "allow_skip" => self.allow_skip.to_string(),
            "target_cols" => list(&self.target_cols),
            "design_cols" => list(&self.design_cols),
            _ => String::new(),
        }
    }

    /// The effective configuration in the same format [`RunConfig::apply_text`]
    /// reads, so the printout can be saved and replayed.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        let paths = [&self.input, &self.design, &self.truth, &self.ensemble];
        for (key, p) in PATH_KEYS.iter().zip(paths) {
            if let Some(p) = p {
                let _ = writeln!(out, "{key} = {}", p.display());
            }
        }
        let _ = writeln!(out, "out = {}", self.out.display());
        out
    }
}
