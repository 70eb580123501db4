//! Domain types shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};

/// The two adapted modules of the multimodal model. The projector shares the
/// vision encoder's rank and is folded into `Ve`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    #[default]
    Ve,
    Llm,
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Module::Ve => "ve",
            Module::Llm => "llm",
        })
    }
}

/// A (vision-encoder rank, LLM rank) pair — the search variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankPair {
    pub r_ve: u32,
    pub r_llm: u32,
}

impl RankPair {
    pub fn new(r_ve: u32, r_llm: u32) -> Self {
        RankPair { r_ve, r_llm }
    }

    pub fn rank_of(&self, module: Module) -> u32 {
        match module {
            Module::Ve => self.r_ve,
            Module::Llm => self.r_llm,
        }
    }

    pub fn validate(&self, r_max: u32) -> Result<()> {
        if self.r_ve < 1 || self.r_llm < 1 {
            return Err(MarsError::Usage(format!(
                "ranks must be >= 1, got ({}, {})",
                self.r_ve, self.r_llm
            )));
        }
        if self.r_ve > r_max || self.r_llm > r_max {
            return Err(MarsError::Usage(format!(
                "ranks must be <= {}, got ({}, {})",
                r_max, self.r_ve, self.r_llm
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for RankPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.r_ve, self.r_llm)
    }
}

/// One fine-tuning run's log: metadata plus step-indexed series.
///
/// `eval_interval` is the spacing of the evaluation grid. Telemetry files do
/// not carry it explicitly; the parser infers it as the gcd of step deltas
/// (convergence-step insertions sit off-grid, which the gcd absorbs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRun {
    pub run_id: String,
    pub ranks: RankPair,
    /// Fine-tuning dataset size D_f in samples.
    pub dataset_size: u64,
    pub batch_size: u32,
    pub eval_interval: u32,
    /// (step, validation perplexity), strictly increasing in step.
    pub curve: Vec<(u64, f64)>,
    /// (step, progress metric) for the vision encoder; lower is better.
    pub ve_progress: Vec<(u64, f64)>,
    /// (step, progress metric) for the LLM backbone; lower is better.
    pub llm_progress: Vec<(u64, f64)>,
}

impl TelemetryRun {
    pub fn progress_of(&self, module: Module) -> &[(u64, f64)] {
        match module {
            Module::Ve => &self.ve_progress,
            Module::Llm => &self.llm_progress,
        }
    }
}

/// Outcome of the patience-based early-stopping scan over one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceVerdict {
    pub converged: bool,
    /// Step of the best observation (see `detect_convergence` for the exact rule).
    pub t_steps: u64,
    pub best_value: f64,
}

/// A flattened performance observation: this pair, trained on `d_eff`
/// effective samples, reached this validation perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfObs {
    pub ranks: RankPair,
    pub d_eff: u64,
    pub perplexity: f64,
}

/// A flattened convergence observation for one module.
///
/// `t_steps` is kept as a float: observations produced by the telemetry
/// builder are always whole detector steps, but synthetic fixtures may carry
/// exact law values, and the fitter does not care either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvObs {
    pub rank: u32,
    pub d_eff: u64,
    pub t_steps: f64,
}

/// Everything the law fitters consume, plus source bookkeeping.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationDataset {
    pub perf_obs: Vec<PerfObs>,
    pub conv_obs_ve: Vec<ConvObs>,
    pub conv_obs_llm: Vec<ConvObs>,
    pub provenance: Vec<String>,
}

impl CalibrationDataset {
    pub fn conv_obs(&self, module: Module) -> &[ConvObs] {
        match module {
            Module::Ve => &self.conv_obs_ve,
            Module::Llm => &self.conv_obs_llm,
        }
    }

    /// Concatenates another dataset (e.g. built with different checkpoints).
    pub fn merge(&mut self, other: CalibrationDataset) {
        self.perf_obs.extend(other.perf_obs);
        self.conv_obs_ve.extend(other.conv_obs_ve);
        self.conv_obs_llm.extend(other.conv_obs_llm);
        for p in other.provenance {
            if !self.provenance.contains(&p) {
                self.provenance.push(p);
            }
        }
    }
}

/// Counters for observations the builder had to drop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildDiagnostics {
    /// Truncations whose detector verdict was not converged, per module.
    pub censored_ve: usize,
    pub censored_llm: usize,
    /// Checkpoints falling before a run's first evaluation.
    pub skipped_checkpoints: usize,
}

/// Law-P: perplexity = A / (r_ve^alpha_m * r_llm^alpha_l * D^beta) + E.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawPCoefficients {
    #[serde(rename = "A")]
    pub a: f64,
    pub alpha_m: f64,
    pub alpha_l: f64,
    pub beta: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

/// Law-C for one module: steps = k * rank^gamma * D^delta + E,
/// with gamma < 0 (more capacity converges faster) and delta > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawCCoefficients {
    /// Which module the law describes. Carried in memory only; the
    /// coefficients file keys entries as `law_c_ve` / `law_c_llm` instead.
    #[serde(skip)]
    pub module: Module,
    pub k: f64,
    pub gamma: f64,
    pub delta: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

/// Fit diagnostics around the winning coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport<C> {
    pub coefficients: C,
    /// Final Huber objective of the best converged start.
    pub objective_value: f64,
    pub starts_tried: usize,
    pub converged_starts: usize,
    /// Mean |log pred - log obs| on the strided holdout (0 when the holdout
    /// is empty, i.e. fewer than 5 observations).
    pub holdout_mae_log: f64,
    /// R^2 of log predictions on the fitting split.
    pub r_squared_log: f64,
}

/// Simulator scenario: ground-truth laws plus observation-model knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub true_law_p: LawPCoefficients,
    pub true_law_c_ve: LawCCoefficients,
    pub true_law_c_llm: LawCCoefficients,
    /// Weight of the convergence-gap perplexity penalty.
    pub gap_penalty_lambda: f64,
    /// Exponent on the normalized gap in the penalty.
    pub gap_penalty_power: f64,
    /// Log-normal sigma on validation-perplexity samples.
    pub noise_sigma_log: f64,
    /// Log-normal sigma on realized convergence steps (one draw per run/module).
    pub conv_noise_sigma_log: f64,
    pub batch_size: u32,
    pub eval_interval: u32,
    pub seed: u64,
    /// Dataset size for the diagonal runs of the calibration plan.
    pub plan_d_diag: u64,
    /// Dataset size for the anti-diagonal runs.
    pub plan_d_anti: u64,
}

impl SimConfig {
    /// The canonical acceptance scenario. The coefficient values are a
    /// constructed fixture; every downstream expectation on it is frozen from
    /// oracle evaluation, not asserted a priori.
    pub fn s1(seed: u64) -> Self {
        SimConfig {
            true_law_p: LawPCoefficients {
                a: 12.0,
                alpha_m: 0.08,
                alpha_l: 0.22,
                beta: 0.28,
                e: 1.6,
            },
            true_law_c_ve: LawCCoefficients {
                module: Module::Ve,
                k: 900.0,
                gamma: -0.55,
                delta: 0.5,
                e: 60.0,
            },
            true_law_c_llm: LawCCoefficients {
                module: Module::Llm,
                k: 2600.0,
                gamma: -0.35,
                delta: 0.55,
                e: 140.0,
            },
            gap_penalty_lambda: 0.3,
            gap_penalty_power: 1.0,
            noise_sigma_log: 0.02,
            conv_noise_sigma_log: 0.02,
            batch_size: 8,
            eval_interval: 16,
            seed,
            plan_d_diag: 1024,
            plan_d_anti: 2048,
        }
    }

    pub fn law_c(&self, module: Module) -> &LawCCoefficients {
        match module {
            Module::Ve => &self.true_law_c_ve,
            Module::Llm => &self.true_law_c_llm,
        }
    }
}

/// One simulated run plus its hidden ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRunOutput {
    pub run: TelemetryRun,
    /// Noiseless asymptotic perplexity (law value times gap penalty).
    pub true_final_perplexity: f64,
    pub true_t_ve: f64,
    pub true_t_llm: f64,
}

/// Candidate grid and bounds for the guided search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Candidate LLM ranks, strictly increasing.
    pub r_options: Vec<u32>,
    /// Target dataset size D_f the final run will use.
    pub d_target: u64,
    pub r_min: u32,
    pub r_max: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            r_options: vec![8, 16, 32, 64],
            d_target: 8192,
            r_min: 1,
            r_max: 256,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_options.is_empty() {
            return Err(MarsError::Usage("r_options must be non-empty".into()));
        }
        if !self.r_options.windows(2).all(|w| w[0] < w[1]) {
            return Err(MarsError::Usage(
                "r_options must be strictly increasing".into(),
            ));
        }
        if self.r_min < 1 || self.r_min > self.r_max {
            return Err(MarsError::Usage(format!(
                "need 1 <= r_min <= r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        let (lo, hi) = (self.r_options[0], *self.r_options.last().unwrap());
        if lo < self.r_min || hi > self.r_max {
            return Err(MarsError::Usage(format!(
                "r_options [{lo}, {hi}] outside [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.d_target == 0 {
            return Err(MarsError::Usage("d_target must be positive".into()));
        }
        Ok(())
    }
}

/// One pruned pair: the balanced VE rank for a given LLM rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ranks: RankPair,
    /// Exact real-valued balance solution; absent on the fallback branch.
    pub r_ve_continuous: Option<f64>,
    pub fallback_used: bool,
    /// True when the rounded rank fell outside [r_min, r_max] and was pulled
    /// to the nearer bound.
    pub clamped: bool,
    pub predicted_t_ve: f64,
    pub predicted_t_llm: f64,
    /// Filled by selection; None only between generation and selection.
    pub predicted_loss: Option<f64>,
}

/// The pruned candidate list plus the argmin choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub candidates: Vec<Candidate>,
    pub chosen: RankPair,
    pub chosen_predicted_loss: f64,
    /// Fraction of candidates that took the fallback branch.
    pub fallback_rate: f64,
}

/// Step-count accounting for the naive-vs-guided comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub naive_runs: usize,
    pub naive_steps: f64,
    pub mars_calibration_steps: f64,
    pub mars_final_steps: f64,
    pub speedup: f64,
    pub shared_backbone_mode: bool,
}
