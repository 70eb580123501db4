//! Optional JSON config file and the flag > file > default precedence rule.

use std::path::Path;

use mars_core::error::Result;
use mars_core::types::SimConfig;
use mars_core::MarsError;
use serde::Deserialize;

/// Every knob a config file may set. Command flags override these; anything
/// absent falls back to the built-in defaults (scenario S1 for the simulator).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub gap_power: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub conv_noise_sigma: Option<f64>,
    pub batch_size: Option<u32>,
    pub eval_interval: Option<u32>,
    pub plan_d_diag: Option<u64>,
    pub plan_d_anti: Option<u64>,
    pub runs: Option<usize>,
    pub ranks: Option<Vec<u32>>,
    pub format: Option<String>,
    pub huber_delta: Option<f64>,
    pub patience: Option<usize>,
    pub d_target: Option<u64>,
    pub r_options: Option<Vec<u32>>,
    pub r_min: Option<u32>,
    pub r_max: Option<u32>,
    pub shared_backbone: Option<bool>,
    pub parallel_heads: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            MarsError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| MarsError::Usage(format!("config file {}: {e}", path.display())))
    }
}

/// Flag value if given, else the config-file value, else the default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Simulator flags shared by `simulate`, `oracle`, and `report`.
#[derive(Debug, Clone, clap::Args)]
pub struct SimFlags {
    /// Base RNG seed (default 42)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Convergence-gap penalty weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Convergence-gap penalty exponent
    #[arg(long)]
    pub gap_power: Option<f64>,
    /// Log-normal sigma on observed validation perplexity
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Log-normal sigma on realized convergence steps
    #[arg(long)]
    pub conv_noise_sigma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub eval_interval: Option<u32>,
    /// Dataset size for the diagonal calibration runs
    #[arg(long)]
    pub plan_d_diag: Option<u64>,
    /// Dataset size for the anti-diagonal calibration runs
    #[arg(long)]
    pub plan_d_anti: Option<u64>,
}

/// Scenario S1 with any overrides applied, flags winning over the file.
pub fn resolve_sim(flags: &SimFlags, file: &FileConfig) -> SimConfig {
    let seed = pick(flags.seed, file.seed, 42);
    let mut cfg = SimConfig::s1(seed);
    if let Some(v) = flags.lambda.or(file.lambda) {
        cfg.gap_penalty_lambda = v;
    }
    if let Some(v) = flags.gap_power.or(file.gap_power) {
        cfg.gap_penalty_power = v;
    }
    if let Some(v) = flags.noise_sigma.or(file.noise_sigma) {
        cfg.noise_sigma_log = v;
    }
    if let Some(v) = flags.conv_noise_sigma.or(file.conv_noise_sigma) {
        cfg.conv_noise_sigma_log = v;
    }
    if let Some(v) = flags.batch_size.or(file.batch_size) {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.eval_interval.or(file.eval_interval) {
        cfg.eval_interval = v;
    }
    if let Some(v) = flags.plan_d_diag.or(file.plan_d_diag) {
        cfg.plan_d_diag = v;
    }
    if let Some(v) = flags.plan_d_anti.or(file.plan_d_anti) {
        cfg.plan_d_anti = v;
    }
    cfg
}
