//! The five pipeline commands and their file formats.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mars_core::error::Result;
use mars_core::laws::{self, CoefficientsFile, FitConfig};
use mars_core::rng::{self, Stream};
use mars_core::search;
use mars_core::sim;
use mars_core::telemetry::{self, Format};
use mars_core::types::{
    CostReport, FitReport, RankPair, SearchConfig, SearchResult, TelemetryRun,
};
use mars_core::MarsError;
use serde::{Deserialize, Serialize};

use crate::config::{pick, resolve_sim, FileConfig};
use crate::{FitArgs, OracleArgs, ReportArgs, SearchArgs, SimulateArgs};

/// Sentinel checkpoint far past any horizon, so the full curve contributes a
/// final observation at d_eff = dataset_size.
const CHECKPOINT_SENTINEL: u64 = 1 << 20;

/// Correlation tiers reported by `report` (the Table-5-style analysis).
const CORRELATION_TIERS: [u64; 5] = [512, 1024, 2048, 4096, 8192];

// --- file schemas -----------------------------------------------------------

/// On-disk product of `search`: the result plus the dataset size it targeted,
/// which `report` needs to price the final run.
#[derive(Debug, Serialize, Deserialize)]
pub struct SearchFile {
    pub d_target: u64,
    #[serde(flatten)]
    pub result: SearchResult,
}

/// One row of the oracle CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleRow {
    pub r_ve: u32,
    pub r_llm: u32,
    pub true_perplexity: f64,
    pub t_ve: f64,
    pub t_llm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TierCorrelation {
    pub d_f: u64,
    pub pearson: f64,
}

/// On-disk product of `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub chosen: RankPair,
    pub chosen_true_perplexity: f64,
    pub oracle_best: RankPair,
    pub oracle_best_perplexity: f64,
    /// Relative excess of the chosen pair over the grid optimum; negative
    /// when the balanced rank leaves the grid and beats it.
    pub regret: f64,
    pub cost: CostReport,
    pub correlations: Vec<TierCorrelation>,
}

// --- shared helpers ---------------------------------------------------------

/// Attaches the destination path to I/O errors, which otherwise carry none.
fn with_path(path: &Path) -> impl Fn(MarsError) -> MarsError + '_ {
    move |e| match e {
        MarsError::Io(io) => MarsError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

/// Writes through a temp file in the destination directory, then renames, so
/// a crash or a concurrent reader never sees a half-written artifact.
fn atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| MarsError::Usage(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp.{}", name.to_string_lossy(), std::process::id()));
    write(&tmp).map_err(with_path(path))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        MarsError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn write_atomic_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic(path, |tmp| Ok(std::fs::write(tmp, bytes)?))
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| MarsError::Internal(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Evaluation-grid checkpoints up to 3/5 of one epoch at the smallest
/// dataset (past that point d_eff saturates and perf observations would
/// collapse onto the same effective size), plus the far sentinel.
fn default_checkpoints(min_dataset: u64, batch: u64, eval: u64) -> Vec<u64> {
    let cap = 3 * min_dataset / (5 * batch);
    let mut cps: Vec<u64> = (1..=cap / eval).map(|i| i * eval).collect();
    cps.push(CHECKPOINT_SENTINEL);
    cps
}

fn parse_format(flag: Option<String>, file: &FileConfig) -> Result<Format> {
    pick(flag, file.format.clone(), "jsonl".to_string()).parse()
}

fn cross_product(ranks: &[u32]) -> Vec<RankPair> {
    let mut grid = Vec::with_capacity(ranks.len() * ranks.len());
    for &rv in ranks {
        for &rl in ranks {
            grid.push(RankPair::new(rv, rl));
        }
    }
    grid
}

// --- simulate -----------------------------------------------------------------

pub fn cmd_simulate(args: &SimulateArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_sim(&args.sim, file);
    let format = parse_format(args.format.clone(), file)?;
    let ranks = pick(args.ranks.clone(), file.ranks.clone(), vec![8, 16, 32, 64]);
    let schedule = default_checkpoints(
        cfg.plan_d_diag.min(cfg.plan_d_anti),
        u64::from(cfg.batch_size),
        u64::from(cfg.eval_interval),
    );
    let plan = sim::generate_calibration_plan(&cfg, &ranks, &schedule)?;
    let count = pick(args.runs, file.runs, plan.len());
    if count > plan.len() {
        return Err(MarsError::Usage(format!(
            "--runs {count} exceeds the calibration plan's {} runs",
            plan.len()
        )));
    }
    let outputs = &plan[..count];

    let out = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(match format {
            Format::Jsonl => "telemetry.jsonl",
            Format::Csv => "telemetry.csv",
        })
    });
    let runs: Vec<TelemetryRun> = outputs.iter().map(|o| o.run.clone()).collect();
    atomic(&out, |tmp| telemetry::write_telemetry(tmp, &runs, format))?;
    atomic(&args.sidecar_out, |tmp| sim::write_sidecar(tmp, outputs))?;

    println!(
        "wrote {count} calibration runs (seed {}) to {}; ground-truth sidecar to {}",
        cfg.seed,
        out.display(),
        args.sidecar_out.display()
    );
    Ok(())
}

// --- fit ----------------------------------------------------------------------

fn law_summary<C>(name: &str, report: &FitReport<C>) -> String {
    format!(
        "{name}: objective {:.3e}, holdout MAE(log) {:.3e}, R2(log) {:.4}, \
         starts {} ({} converged)",
        report.objective_value,
        report.holdout_mae_log,
        report.r_squared_log,
        report.starts_tried,
        report.converged_starts
    )
}

pub fn cmd_fit(args: &FitArgs, file: &FileConfig) -> Result<()> {
    let huber_delta = pick(args.huber_delta, file.huber_delta, 1e-3);
    if !huber_delta.is_finite() || huber_delta <= 0.0 {
        return Err(MarsError::Usage(format!(
            "--huber-delta must be positive and finite, got {huber_delta}"
        )));
    }
    let patience = pick(args.patience, file.patience, 5);
    let format = parse_format(args.format.clone(), file)?;

    let runs = telemetry::parse_telemetry(&args.telemetry, format)?;
    if runs.is_empty() {
        return Err(MarsError::Identifiability {
            axis: "runs".into(),
            detail: format!("{} holds no telemetry", args.telemetry.display()),
        });
    }
    let min_dataset = runs.iter().map(|r| r.dataset_size).min().unwrap();
    let batch = runs.iter().map(|r| u64::from(r.batch_size)).max().unwrap();
    let eval = runs.iter().map(|r| u64::from(r.eval_interval)).min().unwrap();
    let checkpoints = default_checkpoints(min_dataset, batch, eval);

    let (dataset, diag) = telemetry::build_calibration_dataset(&runs, &checkpoints, patience)?;
    if diag.censored_ve + diag.censored_llm > 0 {
        eprintln!(
            "note: {} ve / {} llm runs never converged within their curves and were censored",
            diag.censored_ve, diag.censored_llm
        );
    }

    let fit_config = FitConfig { huber_delta, ..FitConfig::default() };
    let law_p = laws::fit_law_p(&dataset, &fit_config)?;
    let law_c_ve = laws::fit_law_c(&dataset, mars_core::types::Module::Ve, &fit_config)?;
    let law_c_llm = laws::fit_law_c(&dataset, mars_core::types::Module::Llm, &fit_config)?;

    let coefficients = CoefficientsFile::from_reports(&law_p, &law_c_ve, &law_c_llm, huber_delta);
    atomic(&args.out, |tmp| laws::write_coefficients(tmp, &coefficients))?;

    println!("{}", law_summary("law_p   ", &law_p));
    println!("{}", law_summary("law_c_ve", &law_c_ve));
    println!("{}", law_summary("law_c_llm", &law_c_llm));
    println!(
        "fit {} perf and {}+{} convergence observations; coefficients -> {}",
        dataset.perf_obs.len(),
        dataset.conv_obs_ve.len(),
        dataset.conv_obs_llm.len(),
        args.out.display()
    );
    Ok(())
}

// --- search ---------------------------------------------------------------------

pub fn cmd_search(args: &SearchArgs, file: &FileConfig) -> Result<()> {
    let coefficients = laws::read_coefficients(&args.coefficients)?;
    let d_target = pick(args.d_target, file.d_target, 8192);
    let config = SearchConfig {
        r_options: pick(args.r_options.clone(), file.r_options.clone(), vec![8, 16, 32, 64]),
        d_target,
        r_min: pick(args.r_min, file.r_min, 1),
        r_max: pick(args.r_max, file.r_max, 256),
    };

    let candidates = search::generate_candidates(
        &coefficients.law_c_ve,
        &coefficients.law_c_llm,
        &config,
    )?;
    let result = search::select_best(&candidates, &coefficients.law_p, d_target as f64)?;

    println!("r_llm  r_ve*      r_ve  t_ve          t_llm         L_hat      fallback");
    for c in &result.candidates {
        let r_star = match c.r_ve_continuous {
            Some(x) => format!("{x:<9.4}"),
            None => format!("{:<9}", "-"),
        };
        println!(
            "{:<6} {} {:<5} {:<13.3} {:<13.3} {:<10.6} {}",
            c.ranks.r_llm,
            r_star,
            c.ranks.r_ve,
            c.predicted_t_ve,
            c.predicted_t_llm,
            c.predicted_loss.unwrap_or(f64::NAN),
            if c.fallback_used { "yes" } else { "no" },
        );
    }
    println!(
        "chosen ({}, {}) with predicted perplexity {:.6} at d_target {}",
        result.chosen.r_ve, result.chosen.r_llm, result.chosen_predicted_loss, d_target
    );

    let out = SearchFile { d_target, result };
    write_atomic_bytes(&args.out, &to_pretty_json(&out)?)?;
    println!("search result -> {}", args.out.display());
    Ok(())
}

// --- oracle ---------------------------------------------------------------------

pub fn cmd_oracle(args: &OracleArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_sim(&args.sim, file);
    let ranks = pick(args.ranks.clone(), file.ranks.clone(), vec![8, 16, 32, 64]);
    let d_target = pick(args.d_target, file.d_target, 8192);
    let grid = cross_product(&ranks);
    let (best, table) = sim::oracle_grid(&cfg, &grid, d_target)?;

    let d = d_target as f64;
    let mut buf = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        for (pair, perplexity) in &table {
            wtr.serialize(OracleRow {
                r_ve: pair.r_ve,
                r_llm: pair.r_llm,
                true_perplexity: *perplexity,
                t_ve: laws::predict_convergence(&cfg.true_law_c_ve, pair.r_ve, d)?,
                t_llm: laws::predict_convergence(&cfg.true_law_c_llm, pair.r_llm, d)?,
            })
            .map_err(|e| MarsError::Internal(format!("oracle serialization: {e}")))?;
        }
        wtr.flush()?;
    }
    write_atomic_bytes(&args.out, &buf)?;

    let best_value = table
        .iter()
        .find(|(p, _)| *p == best)
        .map(|(_, v)| *v)
        .ok_or_else(|| MarsError::Internal("oracle best missing from its own table".into()))?;
    println!(
        "oracle best ({}, {}) with true perplexity {:.6} over {} pairs at d_f {}; table -> {}",
        best.r_ve,
        best.r_llm,
        best_value,
        table.len(),
        d_target,
        args.out.display()
    );
    Ok(())
}

// --- report ---------------------------------------------------------------------

fn read_search_file(path: &Path) -> Result<SearchFile> {
    let text = std::fs::read_to_string(path).map_err(with_path_io(path))?;
    serde_json::from_str(&text).map_err(|e| MarsError::Parse {
        line: e.line(),
        msg: format!("search result {}: {e}", path.display()),
    })
}

fn read_oracle_table(path: &Path) -> Result<Vec<OracleRow>> {
    let text = std::fs::read_to_string(path).map_err(with_path_io(path))?;
    let mut rows = Vec::new();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    for (i, record) in rdr.deserialize::<OracleRow>().enumerate() {
        rows.push(record.map_err(|e| MarsError::Parse {
            line: i + 2, // header is line 1
            msg: format!("oracle table {}: {e}", path.display()),
        })?);
    }
    Ok(rows)
}

fn with_path_io(path: &Path) -> impl Fn(std::io::Error) -> MarsError + '_ {
    move |e| MarsError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// The rank values of a full square grid, or a mismatch error.
fn square_grid_ranks(rows: &[OracleRow]) -> Result<Vec<u32>> {
    let ve: BTreeSet<u32> = rows.iter().map(|r| r.r_ve).collect();
    let llm: BTreeSet<u32> = rows.iter().map(|r| r.r_llm).collect();
    if ve != llm {
        return Err(MarsError::Mismatch(format!(
            "oracle grid is not square: r_ve values {ve:?} vs r_llm values {llm:?}"
        )));
    }
    let pairs: BTreeSet<(u32, u32)> = rows.iter().map(|r| (r.r_ve, r.r_llm)).collect();
    if pairs.len() != rows.len() || rows.len() != ve.len() * ve.len() {
        return Err(MarsError::Mismatch(format!(
            "oracle grid over {} rank values needs {} distinct pairs, found {} rows",
            ve.len(),
            ve.len() * ve.len(),
            rows.len()
        )));
    }
    Ok(ve.into_iter().collect())
}

pub fn cmd_report(args: &ReportArgs, file: &FileConfig) -> Result<()> {
    let cfg = resolve_sim(&args.sim, file);
    let search_file = read_search_file(&args.search)?;
    let rows = read_oracle_table(&args.oracle)?;
    if rows.is_empty() {
        return Err(MarsError::Mismatch(format!(
            "oracle table {} is empty",
            args.oracle.display()
        )));
    }
    let grid_ranks = square_grid_ranks(&rows)?;
    for c in &search_file.result.candidates {
        if !grid_ranks.contains(&c.ranks.r_llm) {
            return Err(MarsError::Mismatch(format!(
                "search candidate r_llm {} is not covered by the oracle grid {grid_ranks:?}",
                c.ranks.r_llm
            )));
        }
    }

    let d_target = search_file.d_target;
    let chosen = search_file.result.chosen;
    let chosen_true = sim::true_perplexity(&cfg, chosen, d_target as f64)?;
    let best_row = rows
        .iter()
        .min_by(|a, b| a.true_perplexity.total_cmp(&b.true_perplexity))
        .unwrap();
    let regret = chosen_true / best_row.true_perplexity - 1.0;

    // cost accounting: the naive branch runs every grid pair to convergence,
    // so each run costs its horizon (the last logged step)
    let format = parse_format(args.format.clone(), file)?;
    let runs = telemetry::parse_telemetry(&args.telemetry, format)?;
    let calibration_steps: Vec<f64> = runs
        .iter()
        .map(|r| r.curve.last().map(|&(s, _)| s as f64).unwrap_or(0.0))
        .collect();
    let eval = f64::from(cfg.eval_interval);
    let naive_steps: f64 = rows
        .iter()
        .map(|r| (r.t_ve.max(r.t_llm) / eval).ceil() * eval + 5.0 * eval)
        .sum();
    let final_run = sim::simulate_run(&cfg, "final", chosen, d_target)?;
    let final_steps = final_run.run.curve.last().map(|&(s, _)| s as f64).unwrap_or(0.0);
    let shared = pick(args.shared_backbone, file.shared_backbone, false);
    let heads = pick(args.parallel_heads, file.parallel_heads, 4);
    let cost = search::cost_report(
        rows.len(),
        naive_steps,
        &calibration_steps,
        final_steps,
        shared,
        heads,
    )?;

    // Table-5-style analysis: gap-vs-perplexity scatter and Pearson r per tier
    let grid: Vec<RankPair> = rows.iter().map(|r| RankPair::new(r.r_ve, r.r_llm)).collect();
    let mut correlations = Vec::with_capacity(CORRELATION_TIERS.len());
    let mut scatter = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut scatter);
        wtr.write_record(["d_f", "r_ve", "r_llm", "gap", "perplexity"])
            .map_err(|e| MarsError::Internal(format!("scatter serialization: {e}")))?;
        for &d_f in &CORRELATION_TIERS {
            let pearson = sim::gap_perplexity_correlation(&cfg, &grid, d_f)?;
            correlations.push(TierCorrelation { d_f, pearson });
            let d = d_f as f64;
            let key = rng::run_key(&format!("table-d{d_f}"));
            for (i, &pair) in grid.iter().enumerate() {
                let t_ve = laws::predict_convergence(&cfg.true_law_c_ve, pair.r_ve, d)?;
                let t_llm = laws::predict_convergence(&cfg.true_law_c_llm, pair.r_llm, d)?;
                let noise = rng::lognormal_factor(
                    cfg.noise_sigma_log,
                    cfg.seed,
                    key,
                    Stream::TableNoise,
                    i as u64,
                );
                let perplexity = sim::true_perplexity(&cfg, pair, d)? * noise;
                wtr.write_record([
                    d_f.to_string(),
                    pair.r_ve.to_string(),
                    pair.r_llm.to_string(),
                    format!("{}", (t_ve - t_llm).abs()),
                    format!("{perplexity}"),
                ])
                .map_err(|e| MarsError::Internal(format!("scatter serialization: {e}")))?;
            }
        }
        wtr.flush()?;
    }

    let report = ReportFile {
        chosen,
        chosen_true_perplexity: chosen_true,
        oracle_best: RankPair::new(best_row.r_ve, best_row.r_llm),
        oracle_best_perplexity: best_row.true_perplexity,
        regret,
        cost,
        correlations,
    };
    write_atomic_bytes(&args.out, &to_pretty_json(&report)?)?;
    write_atomic_bytes(&args.scatter_out, &scatter)?;

    println!(
        "chosen ({}, {}) true perplexity {:.6}; oracle best ({}, {}) at {:.6}; regret {:+.4}",
        chosen.r_ve,
        chosen.r_llm,
        chosen_true,
        report.oracle_best.r_ve,
        report.oracle_best.r_llm,
        report.oracle_best_perplexity,
        regret
    );
    println!(
        "naive {} runs / {:.0} steps vs calibration {:.0} + final {:.0}: speedup {:.2}x{}",
        report.cost.naive_runs,
        report.cost.naive_steps,
        report.cost.mars_calibration_steps,
        report.cost.mars_final_steps,
        report.cost.speedup,
        if report.cost.shared_backbone_mode { " (shared backbone)" } else { "" }
    );
    let tiers: Vec<String> = report
        .correlations
        .iter()
        .map(|t| format!("{}:{:.3}", t.d_f, t.pearson))
        .collect();
    println!("gap-perplexity Pearson per tier: {}", tiers.join(" "));
    println!(
        "report -> {}; scatter -> {}",
        args.out.display(),
        args.scatter_out.display()
    );
    Ok(())
}
