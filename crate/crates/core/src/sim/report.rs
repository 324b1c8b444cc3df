//! Trace files and metrics.
//!
//! A run writes `traces.csv` (one row per sample, deterministic),
//! `steps.csv` (solver statistics per sample), `timing.csv` (wall-clock
//! estimates, which vary between runs) and `run.json` (config echo and
//! summary).

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::closed_loop::{final_quarter_rmse, rmse, SampleRecord, SimulationReport, TimingSummary};
use crate::error::{Error, Result};

pub const TRACES_FILE: &str = "traces.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const METADATA_FILE: &str = "run.json";

fn trace_header(g: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "p_ref".into(), "p_total".into()];
    h.extend((0..g).map(|i| format!("p_{i}")));
    h.extend((0..g).map(|i| format!("ct_{i}")));
    h.extend((0..g).map(|i| format!("v_{i}")));
    h
}

pub fn write_traces<W: Write>(records: &[SampleRecord], out: W) -> Result<()> {
    let g = records.first().map_or(0, |r| r.powers.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(g))?;
    for r in records {
        let mut row = vec![r.k.to_string(), r.p_ref.to_string(), r.p_total.to_string()];
        row.extend(r.powers.iter().chain(&r.cts).chain(&r.winds).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces<R: Read>(input: R) -> Result<Vec<SampleRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.len() < 3 || (header.len() - 3) % 3 != 0 {
        return Err(Error::validation("traces", format!("unexpected column count {}", header.len())));
    }
    let g = (header.len() - 3) / 3;
    let expected = trace_header(g);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::validation("traces", "header does not name the expected columns"));
    }
    let mut out = Vec::new();
    for (n, row) in rd.records().enumerate() {
        let row = row?;
        let bad = |c: usize| Error::Ingestion {
            line: n + 2,
            reason: format!("column {} is not a number", expected[c]),
        };
        let k: usize = row[0].parse().map_err(|_| bad(0))?;
        let vals: Vec<f64> = (1..row.len())
            .map(|c| row[c].parse::<f64>().map_err(|_| bad(c)))
            .collect::<Result<_>>()?;
        out.push(SampleRecord {
            k,
            p_ref: vals[0],
            p_total: vals[1],
            powers: vals[2..2 + g].to_vec(),
            cts: vals[2 + g..2 + 2 * g].to_vec(),
            winds: vals[2 + 2 * g..].to_vec(),
        });
    }
    Ok(out)
}

/// Metrics recomputed from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub samples: usize,
    pub rmse: f64,
    pub final_quarter_rmse: f64,
    /// Samples where total power differs from the sum of turbine powers by
    /// more than rounding.
    pub bookkeeping_mismatches: usize,
    pub ct_violations: usize,
    pub min_ct: f64,
    pub max_ct: f64,
}

pub fn report_metrics(records: &[SampleRecord], ct_min: f64, ct_max: f64) -> TraceMetrics {
    let p_ref: Vec<f64> = records.iter().map(|r| r.p_ref).collect();
    let p: Vec<f64> = records.iter().map(|r| r.p_total).collect();
    let cts = records.iter().flat_map(|r| r.cts.iter().copied());
    let (min_ct, max_ct) = cts.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c), b.max(c)));
    TraceMetrics {
        samples: records.len(),
        rmse: rmse(&p_ref, &p),
        final_quarter_rmse: if records.is_empty() { 0.0 } else { final_quarter_rmse(&p_ref, &p) },
        bookkeeping_mismatches: records
            .iter()
            .filter(|r| {
                let s: f64 = r.powers.iter().sum();
                (s - r.p_total).abs() > 1e-9 * r.p_total.abs().max(1.0)
            })
            .count(),
        ct_violations: cts.filter(|c| !(ct_min..=ct_max).contains(c)).count(),
        min_ct,
        max_ct,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepRow {
    k: usize,
    iterations: usize,
    converged: bool,
    cost: f64,
    centralized_cost: Option<f64>,
    distance: Option<f64>,
    plan_violation: f64,
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    config: &'a super::SimConfig,
    greedy_power: f64,
    initial_ct: &'a [f64],
    reference_source: &'a super::ReferenceSource,
    rmse: f64,
    rmse_fraction_of_greedy: f64,
    final_quarter_rmse: f64,
    audit: &'a super::ConstraintAudit,
    nonconverged_steps: usize,
    mean_iterations: f64,
    timing: &'a TimingSummary,
}

/// Writes all run files into `dir` and returns their paths.
pub fn write_report(report: &SimulationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let traces = dir.join(TRACES_FILE);
    write_traces(&report.records, std::fs::File::create(&traces)?)?;

    let steps = dir.join(STEPS_FILE);
    let mut w = csv::Writer::from_path(&steps)?;
    for (k, s) in report.steps.iter().enumerate() {
        w.serialize(StepRow {
            k,
            iterations: s.iterations,
            converged: s.converged,
            cost: s.cost,
            centralized_cost: s.centralized_cost,
            distance: s.distance,
            plan_violation: s.plan_violation,
        })?;
    }
    w.flush()?;

    let timing = dir.join(TIMING_FILE);
    let mut w = csv::Writer::from_path(&timing)?;
    w.write_record([
        "k",
        "parallel_seconds",
        "serial_seconds",
        "slowest_subproblem_seconds",
        "mean_subproblem_seconds",
        "combine_seconds",
        "slowest_prediction_seconds",
    ])?;
    for (k, t) in report.step_timing.iter().enumerate() {
        let row = [t.parallel, t.serial, t.slowest_subproblem, t.mean_subproblem, t.combine, t.slowest_prediction];
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let meta = dir.join(METADATA_FILE);
    let m = Metadata {
        config: &report.config,
        greedy_power: report.greedy_power,
        initial_ct: &report.initial_ct,
        reference_source: &report.reference.source,
        rmse: report.rmse,
        rmse_fraction_of_greedy: report.rmse / report.greedy_power,
        final_quarter_rmse: report.final_quarter_rmse,
        audit: &report.audit,
        nonconverged_steps: report.nonconverged_steps,
        mean_iterations: mean_iterations(report),
        timing: &report.timing,
    };
    std::fs::write(&meta, serde_json::to_string_pretty(&m)?)?;
    Ok(vec![traces, steps, timing, meta])
}

fn mean_iterations(report: &SimulationReport) -> f64 {
    let n = report.steps.len().max(1) as f64;
    report.steps.iter().map(|s| s.iterations as f64).sum::<f64>() / n
}

/// Human-readable summary.
pub fn summary(report: &SimulationReport) -> String {
    let mut s = String::new();
    let pg = report.greedy_power;
    let _ = writeln!(s, "turbines            {}", report.turbines());
    let _ = writeln!(s, "samples             {}", report.records.len());
    let _ = writeln!(s, "greedy power        {:.4} MW", pg * 1e-6);
    let _ = writeln!(s, "rmse                {:.5} MW ({:.3}% of greedy)", report.rmse * 1e-6, 100.0 * report.rmse / pg);
    let _ = writeln!(
        s,
        "final-quarter rmse  {:.5} MW ({:.3}% of greedy)",
        report.final_quarter_rmse * 1e-6,
        100.0 * report.final_quarter_rmse / pg
    );
    let _ = writeln!(s, "mean iterations     {:.2}", mean_iterations(report));
    let _ = writeln!(s, "iteration cap hits  {}", report.nonconverged_steps);
    let _ = writeln!(
        s,
        "bound violations    applied {}, planned {}",
        report.audit.applied, report.audit.planned
    );
    let _ = writeln!(
        s,
        "parallel time/step  median {:.4} s, max {:.4} s",
        report.timing.median_parallel_seconds, report.timing.max_parallel_seconds
    );
    let gaps: Vec<f64> = report.steps.iter().filter_map(|s| s.cost_gap()).collect();
    if !gaps.is_empty() {
        let worst = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "worst cost gap      {:.4}%", 100.0 * worst);
    }
    s
}
