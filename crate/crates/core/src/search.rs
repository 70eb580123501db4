//! Guided rank-pair search: balance pruning, candidate selection, the naive
//! baseline, and step-cost accounting.
//!
//! The guided branch turns the two fitted convergence laws into a closed-form
//! balanced VE rank per candidate LLM rank, prunes the quadratic grid down to
//! one candidate per r_llm, and picks the pair whose fitted Law-P prediction
//! is lowest. The naive branch trains the full grid and reads the truth.

use crate::error::{MarsError, Result};
use crate::laws::{self, FitConfig};
use crate::sim;
use crate::types::{
    CalibrationDataset, Candidate, CostReport, FitReport, LawCCoefficients, LawPCoefficients,
    Module, RankPair, SearchConfig, SearchResult, SimConfig,
};

/// Outcome of the balance equation for one LLM rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BalanceSolution {
    /// The exact real rank r* with t_ve(r*, D) = t_llm(r_llm, D).
    Continuous(f64),
    /// The LLM side converges faster than the VE side ever could; adopt
    /// r_ve = r_llm as the default configuration.
    Fallback,
}

/// Solves t_ve(r, d) = t_llm(r_llm, d) for r in closed form. The numerator
/// N = t_llm - E_ve is the VE power term's required value; when it is not
/// positive no rank can meet it and the fallback branch applies.
pub fn balanced_ve_rank(
    c_ve: &LawCCoefficients,
    c_llm: &LawCCoefficients,
    r_llm: u32,
    d_target: f64,
) -> Result<BalanceSolution> {
    let t_llm = laws::predict_convergence(c_llm, r_llm, d_target)?;
    let numerator = t_llm - c_ve.e;
    if numerator <= 0.0 {
        return Ok(BalanceSolution::Fallback);
    }
    let scale = c_ve.k * d_target.powf(c_ve.delta);
    let r_star = (numerator / scale).powf(1.0 / c_ve.gamma);
    if !r_star.is_finite() || r_star <= 0.0 {
        return Err(MarsError::NumericRange(format!(
            "balance solution is not a positive finite rank (r_llm={r_llm}, d={d_target})"
        )));
    }
    Ok(BalanceSolution::Continuous(r_star))
}

/// Round half up, in keeping with erring toward more adaptation capacity.
fn round_rank(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// One candidate per r_llm in the config: the balanced VE rank, rounded and
/// clamped, or the fallback diagonal pair. Predicted convergence times are
/// evaluated at the integer ranks actually proposed.
pub fn generate_candidates(
    c_ve: &LawCCoefficients,
    c_llm: &LawCCoefficients,
    config: &SearchConfig,
) -> Result<Vec<Candidate>> {
    config.validate()?;
    let d = config.d_target as f64;
    let mut out = Vec::with_capacity(config.r_options.len());
    for &r_llm in &config.r_options {
        let annotate = |e: MarsError| match e {
            MarsError::NumericRange(msg) => {
                MarsError::NumericRange(format!("{msg} (candidate r_llm={r_llm})"))
            }
            other => other,
        };
        let solution = balanced_ve_rank(c_ve, c_llm, r_llm, d).map_err(annotate)?;
        let (ranks, r_cont, fallback, clamped) = match solution {
            BalanceSolution::Fallback => (RankPair::new(r_llm, r_llm), None, true, false),
            BalanceSolution::Continuous(r_star) => {
                let rounded = round_rank(r_star);
                let clamped_val = rounded.clamp(config.r_min as u64, config.r_max as u64) as u32;
                (
                    RankPair::new(clamped_val, r_llm),
                    Some(r_star),
                    false,
                    rounded != clamped_val as u64,
                )
            }
        };
        let predicted_t_ve = laws::predict_convergence(c_ve, ranks.r_ve, d).map_err(annotate)?;
        let predicted_t_llm = laws::predict_convergence(c_llm, ranks.r_llm, d).map_err(annotate)?;
        out.push(Candidate {
            ranks,
            r_ve_continuous: r_cont,
            fallback_used: fallback,
            clamped,
            predicted_t_ve,
            predicted_t_llm,
            predicted_loss: None,
        });
    }
    Ok(out)
}

/// Index of the candidate with the lowest predicted loss; ties go to the
/// smallest r_llm, then the smallest r_ve. Candidates must have their
/// predicted_loss filled.
pub fn argmin_candidate(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for i in 1..candidates.len() {
        let a = candidates[i].predicted_loss.expect("predicted_loss filled");
        let b = candidates[best].predicted_loss.expect("predicted_loss filled");
        let ra = candidates[i].ranks;
        let rb = candidates[best].ranks;
        if a < b
            || (a == b && (ra.r_llm < rb.r_llm || (ra.r_llm == rb.r_llm && ra.r_ve < rb.r_ve)))
        {
            best = i;
        }
    }
    best
}

/// Fills each candidate's predicted loss from the fitted Law-P and picks the
/// argmin.
pub fn select_best(
    candidates: &[Candidate],
    c_p: &LawPCoefficients,
    d_target: f64,
) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(MarsError::Usage("cannot select from zero candidates".into()));
    }
    let mut filled: Vec<Candidate> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let loss = laws::predict_loss(c_p, c.ranks, d_target)?;
        filled.push(Candidate { predicted_loss: Some(loss), ..c.clone() });
    }
    let idx = argmin_candidate(&filled);
    let fallback_count = filled.iter().filter(|c| c.fallback_used).count();
    Ok(SearchResult {
        chosen: filled[idx].ranks,
        chosen_predicted_loss: filled[idx].predicted_loss.unwrap(),
        fallback_rate: fallback_count as f64 / filled.len() as f64,
        candidates: filled,
    })
}

/// The three fit diagnostics produced by a guided search.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReports {
    pub law_p: FitReport<LawPCoefficients>,
    pub law_c_ve: FitReport<LawCCoefficients>,
    pub law_c_llm: FitReport<LawCCoefficients>,
}

fn stage_error(stage: &str, e: MarsError) -> MarsError {
    match e {
        MarsError::Identifiability { axis, detail } => MarsError::Identifiability {
            axis,
            detail: format!("{stage} fit: {detail}"),
        },
        MarsError::FitFailure(msg) => MarsError::FitFailure(format!("{stage} fit: {msg}")),
        MarsError::Validation { line, msg } => MarsError::Validation {
            line,
            msg: format!("{stage} fit: {msg}"),
        },
        other => other,
    }
}

/// The full guided branch: fit both convergence laws and the performance law
/// from one calibration dataset, generate candidates, select the winner.
pub fn mars_search(
    dataset: &CalibrationDataset,
    config: &SearchConfig,
    fit_config: &FitConfig,
) -> Result<(SearchResult, FitReports)> {
    config.validate()?;
    let law_c_ve =
        laws::fit_law_c(dataset, Module::Ve, fit_config).map_err(|e| stage_error("law_c_ve", e))?;
    let law_c_llm = laws::fit_law_c(dataset, Module::Llm, fit_config)
        .map_err(|e| stage_error("law_c_llm", e))?;
    let law_p = laws::fit_law_p(dataset, fit_config).map_err(|e| stage_error("law_p", e))?;

    let candidates = generate_candidates(
        &law_c_ve.coefficients,
        &law_c_llm.coefficients,
        config,
    )?;
    let result = select_best(&candidates, &law_p.coefficients, config.d_target as f64)?;
    Ok((result, FitReports { law_p, law_c_ve, law_c_llm }))
}

/// What the naive branch learned: the grid argmin and what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveOutcome {
    pub best: RankPair,
    pub runs: usize,
    /// Total simulated optimizer steps across the grid.
    pub steps: f64,
    /// (pair, true final perplexity) for every grid point, in row order.
    pub table: Vec<(RankPair, f64)>,
}

/// Trains every pair on the full r_options x r_options grid to convergence
/// and picks the one with the lowest true final perplexity. The cost of a
/// run is its last logged step.
pub fn naive_search(
    sim_cfg: &SimConfig,
    r_options: &[u32],
    d_target: u64,
) -> Result<NaiveOutcome> {
    if r_options.is_empty() {
        return Err(MarsError::Usage("r_options must be non-empty".into()));
    }
    let mut best: Option<(RankPair, f64)> = None;
    let mut steps = 0.0;
    let mut runs = 0;
    let mut table = Vec::with_capacity(r_options.len() * r_options.len());
    for &rv in r_options {
        for &rl in r_options {
            let ranks = RankPair::new(rv, rl);
            let run_id = format!("naive-d{d_target}-rv{rv}-rl{rl}");
            let out = sim::simulate_run(sim_cfg, &run_id, ranks, d_target)?;
            let last_step = out.run.curve.last().map(|&(s, _)| s).unwrap_or(0);
            steps += last_step as f64;
            runs += 1;
            table.push((ranks, out.true_final_perplexity));
            if best.map_or(true, |(_, b)| out.true_final_perplexity < b) {
                best = Some((ranks, out.true_final_perplexity));
            }
        }
    }
    let (best, _) = best.expect("grid is non-empty");
    Ok(NaiveOutcome { best, runs, steps, table })
}

/// Assembles the step-cost comparison. With the shared-backbone calibration
/// mode, one backbone pass serves all `parallel_heads` adapter heads, so the
/// calibration total divides by that factor.
pub fn cost_report(
    naive_runs: usize,
    naive_steps: f64,
    calibration_steps: &[f64],
    final_run_steps: f64,
    shared_backbone: bool,
    parallel_heads: usize,
) -> Result<CostReport> {
    if naive_runs == 0 {
        return Err(MarsError::Usage("naive_runs must be positive".into()));
    }
    if !(naive_steps > 0.0) || !(final_run_steps > 0.0) {
        return Err(MarsError::Usage("step counts must be positive".into()));
    }
    if calibration_steps.is_empty() || calibration_steps.iter().any(|&s| !(s > 0.0)) {
        return Err(MarsError::Usage("calibration step counts must be positive".into()));
    }
    if shared_backbone && parallel_heads == 0 {
        return Err(MarsError::Usage(
            "shared backbone mode needs at least one parallel head".into(),
        ));
    }
    let mut calibration: f64 = calibration_steps.iter().sum();
    if shared_backbone {
        calibration /= parallel_heads as f64;
    }
    let denom = calibration + final_run_steps;
    if !(denom > 0.0) {
        return Err(MarsError::Usage("total guided cost must be positive".into()));
    }
    Ok(CostReport {
        naive_runs,
        naive_steps,
        mars_calibration_steps: calibration,
        mars_final_steps: final_run_steps,
        speedup: naive_steps / denom,
        shared_backbone_mode: shared_backbone,
    })
}
