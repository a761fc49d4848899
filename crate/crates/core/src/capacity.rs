//! Safe-capacity predictors for the runtime auditor.
//!
//! The point predictor forecasts mean throughput over the next horizon as the
//! mean of the most recent horizon of history. The lower bound multiplies it
//! by `q`, the delta-quantile of realized/point ratios on calibration
//! windows, so realized throughput falls below it on about a delta share of
//! windows. The oracle reads the realized per-rung capacity off the trace.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audit::{decision_violation, AuditConfig, RuntimeAuditor};
use crate::error::{Error, Result};
use crate::metrics::{build_report, quantile_index, DecisionStats, RiskReport};
use crate::sim::{download_chunk, download_time_hold_last, run_sessions, Observation, PurePolicy, QoeWeights, SessionLog, VideoSpec};
use crate::trace::ThroughputTrace;

pub const DEFAULT_INPUT_LEN_S: usize = 75;
pub const DEFAULT_HORIZON_S: usize = 15;
pub const DEFAULT_DELTA: f64 = 0.10;
pub const MIN_CALIBRATION_WINDOWS: usize = 50;
/// Share of lowest realized capacities forming the high-risk sample set.
pub const HIGH_RISK_FRACTION: f64 = 0.30;

/// Most recent throughput samples (bps), oldest first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorInput<'a> {
    pub history: &'a [f64],
}

impl<'a> PredictorInput<'a> {
    /// Fully elapsed seconds before the decision, at most `input_len`.
    pub fn from_observation(obs: &Observation<'a>, input_len: usize) -> Self {
        let rates = obs.trace.throughput_bps();
        let elapsed = (obs.now_s.floor().max(0.0) as usize).min(rates.len());
        Self {
            history: &rates[elapsed.saturating_sub(input_len)..elapsed],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeCapacityEstimate {
    pub value_bps: f64,
    pub predictor: String,
}

/// Mean of the last `min(horizon, len)` samples.
pub fn point_predict(input: &PredictorInput<'_>, horizon_s: usize) -> Result<f64> {
    let h = input.history;
    if h.is_empty() {
        return Err(Error::validation("point prediction needs a nonempty history"));
    }
    let tail = &h[h.len().saturating_sub(horizon_s.max(1))..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean throughput over `[t, t + horizon)`.
pub fn realized_target(trace: &ThroughputTrace, t: usize, horizon_s: usize) -> Result<f64> {
    let rates = trace.throughput_bps();
    if horizon_s == 0 || t + horizon_s > rates.len() {
        return Err(Error::validation(format!(
            "target window [{t}, {}) overruns trace {} of {} s",
            t + horizon_s,
            trace.id(),
            rates.len()
        )));
    }
    Ok(rates[t..t + horizon_s].iter().sum::<f64>() / horizon_s as f64)
}

/// A (point forecast, realized target) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub point_bps: f64,
    pub realized_bps: f64,
}

/// Windows at every `stride` seconds with a full input history and a full
/// target horizon.
pub fn prediction_windows(traces: &[ThroughputTrace], input_len_s: usize, horizon_s: usize, stride_s: usize) -> Result<Vec<Window>> {
    if input_len_s == 0 || horizon_s == 0 || stride_s == 0 {
        return Err(Error::validation("window lengths and stride must be positive"));
    }
    let mut out = Vec::new();
    for tr in traces {
        let rates = tr.throughput_bps();
        let mut t = input_len_s;
        while t + horizon_s <= rates.len() {
            let input = PredictorInput {
                history: &rates[t - input_len_s..t],
            };
            out.push(Window {
                point_bps: point_predict(&input, horizon_s)?,
                realized_bps: realized_target(tr, t, horizon_s)?,
            });
            t += stride_s;
        }
    }
    Ok(out)
}

/// Persisted calibration of the lower-bound predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub predictor: String,
    /// Multiplier `q` applied to the point forecast.
    pub scale: f64,
    pub delta: f64,
    pub n_windows: usize,
    pub input_len_s: usize,
    pub horizon_s: usize,
}

impl CalibrationResult {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        if !(c.scale > 0.0 && c.scale.is_finite()) {
            return Err(Error::validation("calibration scale must be positive"));
        }
        Ok(c)
    }

    pub fn predictor(&self) -> CapacityPredictor {
        CapacityPredictor::LowerBound {
            input_len_s: self.input_len_s,
            horizon_s: self.horizon_s,
            scale: self.scale,
        }
    }
}

/// Delta-quantile (order statistic `ceil(delta n)`) of realized/point ratios.
pub fn quantile_scale(windows: &[Window], delta: f64) -> Result<f64> {
    if windows.len() < MIN_CALIBRATION_WINDOWS {
        return Err(Error::validation(format!(
            "calibration needs at least {MIN_CALIBRATION_WINDOWS} windows, got {}",
            windows.len()
        )));
    }
    ratio_quantile(&windows.iter().map(|w| w.realized_bps / w.point_bps).collect::<Vec<_>>(), delta)
}

/// Ascending order statistic at `ceil(delta n)`.
pub fn ratio_quantile(ratios: &[f64], delta: f64) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::validation("quantile of an empty ratio set"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::validation(format!("delta {delta} outside (0, 1)")));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_index(delta, sorted.len())])
}

/// Fits the lower-bound scale on non-overlapping calibration windows.
pub fn calibrate_lower_bound(traces: &[ThroughputTrace], delta: f64, input_len_s: usize, horizon_s: usize) -> Result<CalibrationResult> {
    let windows = prediction_windows(traces, input_len_s, horizon_s, horizon_s)?;
    Ok(CalibrationResult {
        predictor: "lower-bound".into(),
        scale: quantile_scale(&windows, delta)?,
        delta,
        n_windows: windows.len(),
        input_len_s,
        horizon_s,
    })
}

/// Share of windows whose realized target falls strictly below `scale * point`.
pub fn miss_rate(windows: &[Window], scale: f64) -> f64 {
    if windows.is_empty() {
        return 0.0;
    }
    windows.iter().filter(|w| w.realized_bps < scale * w.point_bps).count() as f64 / windows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CapacityPredictor {
    Point { input_len_s: usize, horizon_s: usize },
    LowerBound { input_len_s: usize, horizon_s: usize, scale: f64 },
    /// Realized capacity of each rung's download, times `factor`.
    Oracle { factor: f64 },
}

impl CapacityPredictor {
    pub fn point() -> Self {
        Self::Point {
            input_len_s: DEFAULT_INPUT_LEN_S,
            horizon_s: DEFAULT_HORIZON_S,
        }
    }

    pub fn oracle() -> Self {
        Self::Oracle { factor: 1.0 }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::Point { .. } => "point",
            Self::LowerBound { .. } => "lower-bound",
            Self::Oracle { .. } => "oracle",
        }
    }

    /// Capacity estimate for downloading `rung` now; `None` without history.
    pub fn predict(&self, obs: &Observation<'_>, rung: usize) -> Option<f64> {
        match *self {
            Self::Point { input_len_s, horizon_s } => {
                point_predict(&PredictorInput::from_observation(obs, input_len_s), horizon_s).ok()
            }
            Self::LowerBound {
                input_len_s,
                horizon_s,
                scale,
            } => point_predict(&PredictorInput::from_observation(obs, input_len_s), horizon_s)
                .ok()
                .map(|p| scale * p),
            Self::Oracle { factor } => {
                let size = obs.state.next_chunk_sizes[rung];
                let c = match download_chunk(obs.trace, obs.now_s, size) {
                    Ok(d) => d.throughput_bps,
                    Err(_) => 8.0 * size / download_time_hold_last(obs.trace.throughput_bps(), obs.now_s, size),
                };
                Some(factor * c)
            }
        }
    }

    pub fn estimate(&self, obs: &Observation<'_>, rung: usize) -> Option<SafeCapacityEstimate> {
        self.predict(obs, rung).map(|value_bps| SafeCapacityEstimate {
            value_bps,
            predictor: self.id().to_string(),
        })
    }
}

/// Per-predictor decision metrics over audited sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub predictor: String,
    pub v_dec: f64,
    pub over_rate_hr: f64,
    /// Executed non-fallback chunks that had a capacity estimate.
    pub admitted: usize,
    pub high_risk_samples: usize,
    pub report: RiskReport,
}

impl DecisionReport {
    pub const CSV_HEADER: &'static str =
        "predictor,v_dec,over_rate_hr,admitted,high_risk_samples,qoe,mean_rebuf_s,worst5_rebuf_s,session_gt10s,audit_rate";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.predictor,
            self.v_dec,
            self.over_rate_hr,
            self.admitted,
            self.high_risk_samples,
            r.mean_qoe,
            r.mean_rebuf,
            r.worst5_rebuf,
            r.severe_ratio,
            r.audit_rate
        )
    }
}

pub fn decision_reports_to_csv(rows: &[DecisionReport]) -> String {
    let mut out = String::from(DecisionReport::CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// `(V_dec, OverRate_HR, admitted, |D_HR|)` from audited session logs.
///
/// Chunks streamed without an estimate are outside both sample sets.
pub fn decision_stats(logs: &[SessionLog], guard_s: f64) -> (f64, f64, usize, usize) {
    let mut admitted = 0;
    let mut violations = 0;
    let mut estimated: Vec<(f64, f64)> = Vec::new();
    for o in logs.iter().flat_map(|l| &l.outcomes) {
        let Some(c_hat) = o.capacity_bps else { continue };
        estimated.push((o.throughput_bps, c_hat));
        if !o.fallback {
            admitted += 1;
            violations += usize::from(decision_violation(o.size_bytes, o.throughput_bps, o.buffer_before_s, guard_s));
        }
    }
    let v_dec = if admitted == 0 { 0.0 } else { violations as f64 / admitted as f64 };
    if estimated.is_empty() {
        return (v_dec, 0.0, admitted, 0);
    }
    estimated.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = quantile_index(HIGH_RISK_FRACTION, estimated.len()) + 1;
    let over = estimated[..k].iter().filter(|(c, c_hat)| c_hat > c).count();
    (v_dec, over as f64 / k as f64, admitted, k)
}

pub fn evaluate_predictor_decisions(
    predictor: &CapacityPredictor,
    policy: &dyn PurePolicy,
    traces: &[ThroughputTrace],
    spec: &VideoSpec,
    weights: &QoeWeights,
    audit: &AuditConfig,
) -> Result<DecisionReport> {
    let auditor = RuntimeAuditor::new(predictor.clone(), *audit);
    let logs = run_sessions(policy, Some(&auditor), traces, spec, weights);
    let (v_dec, over_rate_hr, admitted, high_risk_samples) = decision_stats(&logs, audit.guard_s);
    let report = build_report(predictor.id(), &logs, Some(DecisionStats { v_dec, over_rate_hr }))?;
    Ok(DecisionReport {
        predictor: predictor.id().to_string(),
        v_dec,
        over_rate_hr,
        admitted,
        high_risk_samples,
        report,
    })
}

/// Index of the candidate with the least worst-5% stall among those within
/// `eps_qoe` (relative) of the best mean QoE; ties go to the lower `V_dec`.
pub fn select_predictor(candidates: &[DecisionReport], eps_qoe: f64) -> Result<usize> {
    let best_qoe = candidates
        .iter()
        .map(|c| c.report.mean_qoe)
        .fold(f64::NEG_INFINITY, f64::max);
    if candidates.is_empty() {
        return Err(Error::validation("predictor selection needs at least one candidate"));
    }
    let floor = best_qoe - eps_qoe * best_qoe.abs();
    let mut chosen: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.report.mean_qoe < floor {
            continue;
        }
        let better = match chosen {
            None => true,
            Some(j) => {
                let b = &candidates[j];
                c.report.worst5_rebuf < b.report.worst5_rebuf
                    || (c.report.worst5_rebuf == b.report.worst5_rebuf && c.v_dec < b.v_dec)
            }
        };
        if better {
            chosen = Some(i);
        }
    }
    Ok(chosen.expect("the best-QoE candidate always clears the floor"))
}
