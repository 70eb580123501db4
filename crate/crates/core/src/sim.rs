//! Synthetic fine-tuning telemetry whose ground truth obeys the dual laws.
//!
//! The simulator is the desk-scale oracle for the whole pipeline: it knows
//! the true coefficients, produces validation/progress curves an external
//! trainer could have logged, and exposes the hidden asymptotes so tests can
//! measure recovery error exactly.
//!
//! Curve construction. A run's noiseless validation perplexity at step s is
//! the law value at the data actually consumed, floored by a shrinking
//! envelope above the asymptote:
//!
//!   V(s) = max(P(min(s*b, D)), L + amp*exp(-s/tau))    for s before T
//!   V(s) = L                                           from T onward
//!
//! where P applies the gap penalty at the effective dataset size, L is the
//! run's true final perplexity, T is the realized convergence step of the
//! slower module, tau = T/8, and amp is 2% of the initial gap. The envelope
//! keeps the curve strictly decreasing after the data saturates, so a
//! patience detector fires at T and not earlier; its 2% amplitude keeps
//! mid-run checkpoint reads within a whisker of the law. Module progress is
//! a pure exponential decay frozen at the module's own realized step.
//! Only validation samples carry log-normal noise; progress curves stay
//! clean, convergence noise instead perturbs the realized steps themselves
//! (one draw per run and module).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};
use crate::laws;
use crate::rng::{self, Stream};
use crate::types::{RankPair, SimConfig, SimRunOutput, TelemetryRun};

/// Realized steps above this count are rejected as a configuration error.
const MAX_STEPS: f64 = 2_147_483_648.0;

pub fn validate_sim_config(cfg: &SimConfig) -> Result<()> {
    let bad = |msg: String| Err(MarsError::Validation { line: None, msg });
    let p = &cfg.true_law_p;
    if !(p.a > 0.0) || !p.a.is_finite() || !(p.e >= 0.0) {
        return bad("true_law_p violates A > 0, E >= 0".into());
    }
    for c in [&cfg.true_law_c_ve, &cfg.true_law_c_llm] {
        if !(c.k > 0.0) || !c.k.is_finite() || !(c.gamma < 0.0) || !(c.delta > 0.0) || !(c.e >= 0.0)
        {
            return bad(format!("true_law_c_{} violates its sign constraints", c.module));
        }
    }
    if !(cfg.gap_penalty_lambda >= 0.0) || !cfg.gap_penalty_lambda.is_finite() {
        return bad(format!("gap penalty weight must be >= 0, got {}", cfg.gap_penalty_lambda));
    }
    if !(cfg.gap_penalty_power > 0.0) || !cfg.gap_penalty_power.is_finite() {
        return bad(format!("gap penalty power must be > 0, got {}", cfg.gap_penalty_power));
    }
    if !(cfg.noise_sigma_log >= 0.0) || !(cfg.conv_noise_sigma_log >= 0.0) {
        return bad("noise sigmas must be >= 0".into());
    }
    if cfg.batch_size == 0 || cfg.eval_interval == 0 {
        return bad("batch_size and eval_interval must be positive".into());
    }
    if cfg.plan_d_diag == 0 || cfg.plan_d_anti == 0 {
        return bad("calibration plan dataset sizes must be positive".into());
    }
    Ok(())
}

/// Noiseless asymptotic perplexity: the Law-P value times the convergence-gap
/// penalty (1 + lambda * g^p), with the gap g computed from the true Law-C
/// pair at the same dataset size.
pub fn true_perplexity(cfg: &SimConfig, ranks: RankPair, d_f: f64) -> Result<f64> {
    let t_ve = laws::predict_convergence(&cfg.true_law_c_ve, ranks.r_ve, d_f)?;
    let t_llm = laws::predict_convergence(&cfg.true_law_c_llm, ranks.r_llm, d_f)?;
    let gap = (t_ve - t_llm).abs() / t_ve.max(t_llm);
    let base = laws::predict_loss(&cfg.true_law_p, ranks, d_f)?;
    let value = base * (1.0 + cfg.gap_penalty_lambda * gap.powf(cfg.gap_penalty_power));
    if !value.is_finite() {
        return Err(MarsError::NumericRange(format!(
            "true perplexity overflowed for {ranks} at d_f={d_f}"
        )));
    }
    Ok(value)
}

/// Smallest multiple of `m` that is >= `x` (x > 0).
fn ceil_to_multiple(x: u64, m: u64) -> u64 {
    x.div_ceil(m) * m
}

fn realized_steps(cfg: &SimConfig, key: u64, stream: Stream, t_law: f64) -> Result<u64> {
    let z = rng::standard_normal(cfg.seed, key, stream, 0);
    let t = t_law * (cfg.conv_noise_sigma_log * z).exp();
    if !t.is_finite() || t > MAX_STEPS {
        return Err(MarsError::Validation {
            line: None,
            msg: format!("realized convergence step {t} exceeds the supported horizon"),
        });
    }
    Ok((t.round() as u64).max(1))
}

/// Simulates one fine-tuning run. The run seed is derived from `run_id`, so
/// identical (config seed, run_id) pairs reproduce bitwise-identical output
/// regardless of generation order.
pub fn simulate_run(
    cfg: &SimConfig,
    run_id: &str,
    ranks: RankPair,
    dataset_size: u64,
) -> Result<SimRunOutput> {
    validate_sim_config(cfg)?;
    if run_id.is_empty() {
        return Err(MarsError::Validation { line: None, msg: "run_id must be non-empty".into() });
    }
    if dataset_size == 0 {
        return Err(MarsError::Validation { line: None, msg: "dataset_size must be positive".into() });
    }
    ranks.validate(u32::MAX)?;

    let d_f = dataset_size as f64;
    let l_true = true_perplexity(cfg, ranks, d_f)?;
    let t_ve_law = laws::predict_convergence(&cfg.true_law_c_ve, ranks.r_ve, d_f)?;
    let t_llm_law = laws::predict_convergence(&cfg.true_law_c_llm, ranks.r_llm, d_f)?;

    let key = rng::run_key(run_id);
    let t_ve = realized_steps(cfg, key, Stream::ConvVe, t_ve_law)?;
    let t_llm = realized_steps(cfg, key, Stream::ConvLlm, t_llm_law)?;
    let t_run = t_ve.max(t_llm);

    let eval = cfg.eval_interval as u64;
    let horizon = ceil_to_multiple(t_run, eval) + 5 * eval;
    let mut steps: Vec<u64> = (1..=horizon / eval).map(|i| i * eval).collect();
    for t in [t_ve, t_llm] {
        if t % eval != 0 {
            steps.push(t);
        }
    }
    steps.sort_unstable();
    steps.dedup();

    let d_eff = |s: u64| (s.saturating_mul(cfg.batch_size as u64)).min(dataset_size) as f64;
    let first_value = true_perplexity(cfg, ranks, d_eff(steps[0]))?;
    let amp = (0.02 * (first_value - l_true)).max(0.0);
    let tau = t_run as f64 / 8.0;

    let mut curve = Vec::with_capacity(steps.len());
    for &s in &steps {
        let noiseless = if s >= t_run {
            l_true
        } else {
            let data = true_perplexity(cfg, ranks, d_eff(s))?;
            let envelope = l_true + amp * (-(s as f64) / tau).exp();
            data.max(envelope)
        };
        let factor = rng::lognormal_factor(cfg.noise_sigma_log, cfg.seed, key, Stream::ValNoise, s);
        curve.push((s, noiseless * factor));
    }

    let progress = |t_mod: u64| -> Vec<(u64, f64)> {
        let tau_mod = t_mod as f64 / 4.0;
        steps
            .iter()
            .map(|&s| (s, 0.05 + (-(s.min(t_mod) as f64) / tau_mod).exp()))
            .collect()
    };

    Ok(SimRunOutput {
        run: TelemetryRun {
            run_id: run_id.to_string(),
            ranks,
            dataset_size,
            batch_size: cfg.batch_size,
            eval_interval: cfg.eval_interval,
            curve,
            ve_progress: progress(t_ve),
            llm_progress: progress(t_llm),
        },
        true_final_perplexity: l_true,
        true_t_ve: t_ve_law,
        true_t_llm: t_llm_law,
    })
}

/// Brute-force evaluation of every pair's noiseless true perplexity.
/// Returns the exact argmin (first in grid order on ties) and the full table.
pub fn oracle_grid(
    cfg: &SimConfig,
    grid: &[RankPair],
    d_f: u64,
) -> Result<(RankPair, Vec<(RankPair, f64)>)> {
    validate_sim_config(cfg)?;
    if grid.is_empty() {
        return Err(MarsError::Validation { line: None, msg: "oracle grid must be non-empty".into() });
    }
    if d_f == 0 {
        return Err(MarsError::Validation { line: None, msg: "dataset size must be positive".into() });
    }
    let mut table = Vec::with_capacity(grid.len());
    for &ranks in grid {
        table.push((ranks, true_perplexity(cfg, ranks, d_f as f64)?));
    }
    let mut best = table[0];
    for &entry in &table[1..] {
        if entry.1 < best.1 {
            best = entry;
        }
    }
    Ok((best.0, table))
}

/// One run per representative pair: diagonal pairs (r, r) at `plan_d_diag`
/// plus anti-diagonal pairs (r_i, r_{n-1-i}) at `plan_d_anti`. The diagonal
/// alone cannot separate alpha_m from alpha_l, and a single dataset size
/// cannot identify the data exponents; the anti-diagonal at a second size
/// fixes both. Checkpoints are validated here because the plan is only
/// meaningful together with the checkpoint schedule fed to the dataset
/// builder.
pub fn generate_calibration_plan(
    cfg: &SimConfig,
    rank_values: &[u32],
    checkpoints: &[u64],
) -> Result<Vec<SimRunOutput>> {
    validate_sim_config(cfg)?;
    if rank_values.is_empty() {
        return Err(MarsError::Validation { line: None, msg: "rank_values must be non-empty".into() });
    }
    if rank_values.iter().any(|&r| r == 0) {
        return Err(MarsError::Validation { line: None, msg: "rank values must be at least 1".into() });
    }
    if checkpoints.is_empty() {
        return Err(MarsError::Validation { line: None, msg: "checkpoints must be non-empty".into() });
    }
    if checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MarsError::Validation {
            line: None,
            msg: "checkpoints must be positive and strictly increasing".into(),
        });
    }

    let n = rank_values.len();
    let mut pairs: Vec<(RankPair, u64)> = Vec::new();
    for &r in rank_values {
        pairs.push((RankPair::new(r, r), cfg.plan_d_diag));
    }
    for i in 0..n {
        let pair = RankPair::new(rank_values[i], rank_values[n - 1 - i]);
        let entry = (pair, cfg.plan_d_anti);
        if !pairs.contains(&entry) {
            pairs.push(entry);
        }
    }

    pairs
        .into_iter()
        .map(|(ranks, d)| {
            let run_id = format!("cal-d{d}-rv{}-rl{}", ranks.r_ve, ranks.r_llm);
            simulate_run(cfg, &run_id, ranks, d)
        })
        .collect()
}

/// Hidden per-run ground truth, written next to the telemetry for harnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub true_final_perplexity: f64,
    pub true_t_ve: f64,
    pub true_t_llm: f64,
}

pub fn write_sidecar(path: &Path, outputs: &[SimRunOutput]) -> Result<()> {
    let map: BTreeMap<&str, SidecarEntry> = outputs
        .iter()
        .map(|o| {
            (
                o.run.run_id.as_str(),
                SidecarEntry {
                    true_final_perplexity: o.true_final_perplexity,
                    true_t_ve: o.true_t_ve,
                    true_t_llm: o.true_t_llm,
                },
            )
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&map)
        .map_err(|e| MarsError::Internal(format!("sidecar serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, SidecarEntry>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MarsError::Parse {
        line: e.line(),
        msg: format!("sidecar file: {e}"),
    })
}

/// Sample Pearson correlation between the true convergence gap |t_ve - t_llm|
/// and one noisy perplexity sample per pair, over `grid` at one dataset size.
/// Returns 0 when either series is constant.
pub fn gap_perplexity_correlation(cfg: &SimConfig, grid: &[RankPair], d_f: u64) -> Result<f64> {
    validate_sim_config(cfg)?;
    if grid.is_empty() || d_f == 0 {
        return Err(MarsError::Validation {
            line: None,
            msg: "correlation needs a non-empty grid and positive dataset size".into(),
        });
    }
    let d = d_f as f64;
    let key = rng::run_key(&format!("table-d{d_f}"));
    let mut xs = Vec::with_capacity(grid.len());
    let mut ys = Vec::with_capacity(grid.len());
    for (i, &ranks) in grid.iter().enumerate() {
        let t_ve = laws::predict_convergence(&cfg.true_law_c_ve, ranks.r_ve, d)?;
        let t_llm = laws::predict_convergence(&cfg.true_law_c_llm, ranks.r_llm, d)?;
        let factor =
            rng::lognormal_factor(cfg.noise_sigma_log, cfg.seed, key, Stream::TableNoise, i as u64);
        xs.push((t_ve - t_llm).abs());
        ys.push(true_perplexity(cfg, ranks, d)? * factor);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
