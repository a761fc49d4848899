//! Fleet-level QoE, stall-tail and audit statistics over session logs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SessionLog;

pub const DEFAULT_TAIL_FRACTION: f64 = 0.05;
pub const DEFAULT_SEVERE_THRESHOLD_S: f64 = 10.0;

/// Guard so that a product equal to an integer up to rounding does not round
/// up to the next count.
const CEIL_GUARD: f64 = 1e-9;

/// 1-indexed ascending order statistic `ceil(q * n)`, as a 0-based index.
pub fn quantile_index(q: f64, n: usize) -> usize {
    ((q * n as f64 - CEIL_GUARD).ceil() as usize).clamp(1, n.max(1)) - 1
}

/// `ceil(fraction * n)`, at least 1.
pub fn tail_count(n: usize, fraction: f64) -> usize {
    quantile_index(fraction, n) + 1
}

fn nonempty(logs: &[SessionLog]) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::validation("metrics need at least one session"));
    }
    Ok(())
}

/// Mean session QoE and mean session stall time.
pub fn mean_metrics(logs: &[SessionLog]) -> Result<(f64, f64)> {
    nonempty(logs)?;
    let n = logs.len() as f64;
    let q = logs.iter().map(|l| l.session_qoe).sum::<f64>() / n;
    let r = logs.iter().map(|l| l.session_rebuf).sum::<f64>() / n;
    Ok((q, r))
}

/// `K = ceil(fraction * n)` and the mean of the `K` largest values.
pub fn worst_tail_mean(values: &[f64], fraction: f64) -> Result<(usize, f64)> {
    if values.is_empty() {
        return Err(Error::validation("tail mean of an empty sample"));
    }
    let k = tail_count(values.len(), fraction);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok((k, sorted[..k].iter().sum::<f64>() / k as f64))
}

pub fn worst_tail_rebuf(logs: &[SessionLog], fraction: f64) -> Result<(usize, f64)> {
    nonempty(logs)?;
    let r: Vec<f64> = logs.iter().map(|l| l.session_rebuf).collect();
    worst_tail_mean(&r, fraction)
}

/// Fraction of values strictly above `threshold`.
pub fn severe_fraction(values: &[f64], threshold: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("severe ratio of an empty sample"));
    }
    Ok(values.iter().filter(|&&v| v > threshold).count() as f64 / values.len() as f64)
}

pub fn severe_ratio(logs: &[SessionLog], threshold_s: f64) -> Result<f64> {
    nonempty(logs)?;
    let r: Vec<f64> = logs.iter().map(|l| l.session_rebuf).collect();
    severe_fraction(&r, threshold_s)
}

/// Fraction of all chunks where the auditor changed the request.
pub fn audit_rate(logs: &[SessionLog]) -> f64 {
    let chunks: usize = logs.iter().map(|l| l.outcomes.len()).sum();
    if chunks == 0 {
        return 0.0;
    }
    logs.iter().map(|l| l.interventions()).sum::<usize>() as f64 / chunks as f64
}

/// Predictor-level decision statistics attached to a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionStats {
    pub v_dec: f64,
    pub over_rate_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub method: String,
    pub n_sessions: usize,
    pub mean_qoe: f64,
    pub mean_rebuf: f64,
    pub worst5_rebuf: f64,
    pub severe_ratio: f64,
    pub severe_threshold_s: f64,
    pub tail_k: usize,
    pub audit_rate: f64,
    pub v_dec: Option<f64>,
    pub over_rate_hr: Option<f64>,
}

impl RiskReport {
    pub const CSV_HEADER: &'static str =
        "method,sessions,qoe,mean_rebuf_s,worst5_rebuf_s,session_gt10s,audit_rate,tail_k,v_dec,over_rate_hr";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.n_sessions,
            self.mean_qoe,
            self.mean_rebuf,
            self.worst5_rebuf,
            self.severe_ratio,
            self.audit_rate,
            self.tail_k,
            opt(self.v_dec),
            opt(self.over_rate_hr)
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Header plus one row per report.
pub fn reports_to_csv(reports: &[RiskReport]) -> String {
    let mut out = String::from(RiskReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn build_report(method: &str, logs: &[SessionLog], decision: Option<DecisionStats>) -> Result<RiskReport> {
    let (mean_qoe, mean_rebuf) = mean_metrics(logs)?;
    let (tail_k, worst5_rebuf) = worst_tail_rebuf(logs, DEFAULT_TAIL_FRACTION)?;
    Ok(RiskReport {
        method: method.to_string(),
        n_sessions: logs.len(),
        mean_qoe,
        mean_rebuf,
        worst5_rebuf,
        severe_ratio: severe_ratio(logs, DEFAULT_SEVERE_THRESHOLD_S)?,
        severe_threshold_s: DEFAULT_SEVERE_THRESHOLD_S,
        tail_k,
        audit_rate: audit_rate(logs),
        v_dec: decision.map(|d| d.v_dec),
        over_rate_hr: decision.map(|d| d.over_rate_hr),
    })
}
