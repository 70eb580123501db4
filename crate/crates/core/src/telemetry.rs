//! Telemetry ingestion: log parsing, convergence detection, and assembly of
//! the calibration dataset.
//!
//! Checkpoints double as smaller effective dataset sizes: an evaluation at
//! step `s` of a run with batch size `b` is treated as the outcome of training
//! on `min(s * b, dataset_size)` samples. Convergence observations only make
//! sense once a truncated series has actually stalled, so non-converged
//! truncations are censored (counted, never fitted).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};
use crate::types::{
    BuildDiagnostics, CalibrationDataset, ConvObs, ConvergenceVerdict, Module, PerfObs, RankPair,
    TelemetryRun,
};

/// On-disk telemetry encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = MarsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(MarsError::Usage(format!(
                "unknown telemetry format '{other}' (expected jsonl or csv)"
            ))),
        }
    }
}

/// One evaluation event as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub run_id: String,
    pub r_ve: u32,
    pub r_llm: u32,
    pub dataset_size: u64,
    pub batch_size: u32,
    pub step: u64,
    pub val_perplexity: f64,
    pub ve_progress: f64,
    pub llm_progress: f64,
}

/// Scans a series for the patience early-stopping criterion.
///
/// A position qualifies when at least `patience` evaluations follow it and
/// none of the next `patience` values improves on it by more than
/// `min_delta`. The verdict's `t_steps` is the step of the minimum-valued
/// qualifying position (earliest on ties). When nothing qualifies the series
/// has not converged and `t_steps` reports the global minimum's step.
pub fn detect_convergence(
    series: &[(u64, f64)],
    patience: usize,
    min_delta: f64,
) -> Result<ConvergenceVerdict> {
    if series.is_empty() {
        return Err(MarsError::Usage(
            "detect_convergence: series must be non-empty".into(),
        ));
    }
    if patience == 0 {
        return Err(MarsError::Usage(
            "detect_convergence: patience must be >= 1".into(),
        ));
    }
    if min_delta < 0.0 {
        return Err(MarsError::Usage(
            "detect_convergence: min_delta must be >= 0".into(),
        ));
    }
    if !series.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(MarsError::Usage(
            "detect_convergence: steps must be strictly increasing".into(),
        ));
    }

    let n = series.len();
    let mut best: Option<(u64, f64)> = None;
    for i in 0..n {
        if n - 1 - i < patience {
            break;
        }
        let v = series[i].1;
        let stalled = series[i + 1..=i + patience]
            .iter()
            .all(|&(_, w)| w >= v - min_delta);
        if stalled {
            match best {
                Some((_, bv)) if bv <= v => {}
                _ => best = Some((series[i].0, v)),
            }
        }
    }

    if let Some((step, value)) = best {
        return Ok(ConvergenceVerdict {
            converged: true,
            t_steps: step,
            best_value: value,
        });
    }

    // no stall: report the global minimum (earliest on ties)
    let (mut step, mut value) = series[0];
    for &(s, v) in &series[1..] {
        if v < value {
            step = s;
            value = v;
        }
    }
    Ok(ConvergenceVerdict {
        converged: false,
        t_steps: step,
        best_value: value,
    })
}

/// Reads telemetry records and assembles one [`TelemetryRun`] per `run_id`.
///
/// Series are sorted by step; duplicate `(run_id, step)` pairs and metadata
/// that changes within a run are rejected with the offending line number.
pub fn parse_telemetry(path: &Path, format: Format) -> Result<Vec<TelemetryRun>> {
    let file = std::fs::File::open(path).map_err(|e| {
        MarsError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let reader = BufReader::new(file);
    let records = match format {
        Format::Jsonl => read_jsonl(reader)?,
        Format::Csv => read_csv(reader)?,
    };
    assemble_runs(records)
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<(usize, TelemetryRecord)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TelemetryRecord = serde_json::from_str(&line).map_err(|e| MarsError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

fn read_csv<R: BufRead>(reader: R) -> Result<Vec<(usize, TelemetryRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for result in rdr.deserialize::<TelemetryRecord>() {
        let rec = result.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or_default();
            MarsError::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        // the csv crate tracks the position of the *next* record; recompute
        // from the record count instead (header is line 1)
        let line_no = out.len() + 2;
        out.push((line_no, rec));
    }
    Ok(out)
}

fn validate_record(line: usize, rec: &TelemetryRecord) -> Result<()> {
    let bad = |msg: String| {
        Err(MarsError::Validation {
            line: Some(line),
            msg,
        })
    };
    if rec.run_id.is_empty() {
        return bad("empty run_id".into());
    }
    if rec.r_ve < 1 || rec.r_llm < 1 {
        return bad(format!("ranks must be >= 1, got ({}, {})", rec.r_ve, rec.r_llm));
    }
    if rec.dataset_size == 0 || rec.batch_size == 0 {
        return bad("dataset_size and batch_size must be positive".into());
    }
    if !(rec.val_perplexity.is_finite() && rec.val_perplexity > 0.0) {
        return bad(format!("non-positive perplexity {}", rec.val_perplexity));
    }
    if !(rec.ve_progress.is_finite() && rec.ve_progress > 0.0)
        || !(rec.llm_progress.is_finite() && rec.llm_progress > 0.0)
    {
        return bad("progress metrics must be finite and > 0".into());
    }
    Ok(())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn assemble_runs(records: Vec<(usize, TelemetryRecord)>) -> Result<Vec<TelemetryRun>> {
    // BTreeMap keeps output ordering independent of record interleaving
    let mut groups: BTreeMap<String, Vec<(usize, TelemetryRecord)>> = BTreeMap::new();
    for (line, rec) in records {
        validate_record(line, &rec)?;
        groups.entry(rec.run_id.clone()).or_default().push((line, rec));
    }

    let mut runs = Vec::with_capacity(groups.len());
    for (run_id, mut rows) in groups {
        rows.sort_by_key(|(_, r)| r.step);
        for w in rows.windows(2) {
            if w[0].1.step == w[1].1.step {
                return Err(MarsError::Parse {
                    line: w[1].0,
                    msg: format!("duplicate step {} for run '{run_id}'", w[1].1.step),
                });
            }
        }
        let head = &rows[0].1;
        let ranks = RankPair::new(head.r_ve, head.r_llm);
        for (line, rec) in &rows {
            if rec.r_ve != head.r_ve
                || rec.r_llm != head.r_llm
                || rec.dataset_size != head.dataset_size
                || rec.batch_size != head.batch_size
            {
                return Err(MarsError::Validation {
                    line: Some(*line),
                    msg: format!("run '{run_id}' changes metadata mid-run"),
                });
            }
        }
        // grid spacing: gcd of deltas absorbs off-grid convergence insertions
        let mut interval = 0u64;
        for w in rows.windows(2) {
            interval = gcd(interval, w[1].1.step - w[0].1.step);
        }
        if interval == 0 {
            interval = rows[0].1.step.max(1);
        }
        let mut curve = Vec::with_capacity(rows.len());
        let mut ve_progress = Vec::with_capacity(rows.len());
        let mut llm_progress = Vec::with_capacity(rows.len());
        for (_, rec) in &rows {
            curve.push((rec.step, rec.val_perplexity));
            ve_progress.push((rec.step, rec.ve_progress));
            llm_progress.push((rec.step, rec.llm_progress));
        }
        runs.push(TelemetryRun {
            run_id,
            ranks,
            dataset_size: head.dataset_size,
            batch_size: head.batch_size,
            eval_interval: u32::try_from(interval).map_err(|_| MarsError::Validation {
                line: None,
                msg: format!("evaluation interval {interval} does not fit in u32"),
            })?,
            curve,
            ve_progress,
            llm_progress,
        });
    }
    Ok(runs)
}

/// Writes runs back to the record format `parse_telemetry` reads.
pub fn write_telemetry(path: &Path, runs: &[TelemetryRun], format: Format) -> Result<()> {
    let mut records = Vec::new();
    for run in runs {
        for (i, &(step, val)) in run.curve.iter().enumerate() {
            records.push(TelemetryRecord {
                run_id: run.run_id.clone(),
                r_ve: run.ranks.r_ve,
                r_llm: run.ranks.r_llm,
                dataset_size: run.dataset_size,
                batch_size: run.batch_size,
                step,
                val_perplexity: val,
                ve_progress: run.ve_progress[i].1,
                llm_progress: run.llm_progress[i].1,
            });
        }
    }
    let mut buf = Vec::new();
    match format {
        Format::Jsonl => {
            for rec in &records {
                serde_json::to_writer(&mut buf, rec).map_err(|e| {
                    MarsError::Internal(format!("telemetry serialization: {e}"))
                })?;
                buf.push(b'\n');
            }
        }
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(&mut buf);
            for rec in &records {
                wtr.serialize(rec).map_err(|e| {
                    MarsError::Internal(format!("telemetry serialization: {e}"))
                })?;
            }
            wtr.flush()?;
            drop(wtr);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Truncates a series to entries with step <= limit.
fn truncate(series: &[(u64, f64)], limit: u64) -> &[(u64, f64)] {
    let end = series.partition_point(|&(s, _)| s <= limit);
    &series[..end]
}

/// Value of the evaluation nearest at-or-before `step`, if any.
fn value_at_or_before(series: &[(u64, f64)], step: u64) -> Option<f64> {
    let end = series.partition_point(|&(s, _)| s <= step);
    if end == 0 {
        None
    } else {
        Some(series[end - 1].1)
    }
}

/// Flattens runs into fit-ready observations.
///
/// Per run and checkpoint step `s`: one performance observation at
/// `d_eff = min(s * batch, dataset_size)` reading the evaluation nearest
/// at-or-before `s`, and per module a convergence observation from the
/// detector applied to the truncated progress series. A stalled prefix stays
/// stalled under extension, so each (run, module) contributes its convergence
/// observation only at the first checkpoint tier whose truncation converged;
/// later tiers would re-emit the identical stall and overweight it.
pub fn build_calibration_dataset(
    runs: &[TelemetryRun],
    checkpoint_steps: &[u64],
    patience: usize,
) -> Result<(CalibrationDataset, BuildDiagnostics)> {
    if !checkpoint_steps.windows(2).all(|w| w[0] <= w[1]) {
        return Err(MarsError::Usage(
            "checkpoint_steps must be sorted ascending".into(),
        ));
    }
    let mut dataset = CalibrationDataset::default();
    let mut diag = BuildDiagnostics::default();

    for run in runs {
        if run.curve.is_empty() {
            return Err(MarsError::Validation {
                line: None,
                msg: format!("run '{}' has an empty curve", run.run_id),
            });
        }
        dataset.provenance.push(run.run_id.clone());
        let mut conv_done = [false, false]; // [ve, llm]
        for &s in checkpoint_steps {
            let d_eff = (s * u64::from(run.batch_size)).min(run.dataset_size);
            let Some(perplexity) = value_at_or_before(&run.curve, s) else {
                diag.skipped_checkpoints += 1;
                continue;
            };
            dataset.perf_obs.push(PerfObs {
                ranks: run.ranks,
                d_eff,
                perplexity,
            });
            for module in [Module::Ve, Module::Llm] {
                let slot = match module {
                    Module::Ve => 0,
                    Module::Llm => 1,
                };
                if conv_done[slot] {
                    continue;
                }
                let prefix = truncate(run.progress_of(module), s);
                if prefix.is_empty() {
                    continue; // already counted via the skipped checkpoint
                }
                let verdict = detect_convergence(prefix, patience, 0.0)?;
                if verdict.converged {
                    conv_done[slot] = true;
                    let obs = ConvObs {
                        rank: run.ranks.rank_of(module),
                        d_eff,
                        t_steps: verdict.t_steps as f64,
                    };
                    match module {
                        Module::Ve => dataset.conv_obs_ve.push(obs),
                        Module::Llm => dataset.conv_obs_llm.push(obs),
                    }
                } else {
                    match module {
                        Module::Ve => diag.censored_ve += 1,
                        Module::Llm => diag.censored_llm += 1,
                    }
                }
            }
        }
    }
    Ok((dataset, diag))
}

/// Serializes a dataset to the interchange JSON layout.
pub fn write_calibration_dataset(path: &Path, dataset: &CalibrationDataset) -> Result<()> {
    let json = serde_json::to_string_pretty(dataset)
        .map_err(|e| MarsError::Internal(format!("dataset serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_calibration_dataset(path: &Path) -> Result<CalibrationDataset> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MarsError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}
