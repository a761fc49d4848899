//! Throughput traces: ingestion, synthesis, splitting and handover-stress selection.
//!
//! A trace is a sequence of 1-s throughput samples plus the times at which the
//! serving link changed (handovers). Traces are immutable once built and are
//! shared read-only by every simulated session.
//!
//! On disk a trace is a two-column CSV `time_s,throughput_bps` (header
//! optional) and an optional sidecar `<id>.handovers` with one time per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest throughput the synthetic generator will emit.
pub const MIN_SYNTH_BPS: f64 = 0.1e6;

/// Throughput samples at 1-s granularity with handover metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTrace {
    id: String,
    start_s: f64,
    throughput_bps: Vec<f64>,
    handover_times_s: Vec<f64>,
}

impl ThroughputTrace {
    /// Builds a trace whose samples sit at `start_s, start_s + 1, ...`.
    pub fn new(
        id: impl Into<String>,
        start_s: f64,
        throughput_bps: Vec<f64>,
        mut handover_times_s: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if throughput_bps.is_empty() {
            return Err(Error::validation(format!("trace {id} has no samples")));
        }
        if !start_s.is_finite() {
            return Err(Error::validation(format!("trace {id} has a non-finite start time")));
        }
        if let Some((i, v)) = throughput_bps
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::validation(format!(
                "trace {id}: sample {i} has non-positive throughput {v}"
            )));
        }
        handover_times_s.sort_by(f64::total_cmp);
        let last = start_s + (throughput_bps.len() - 1) as f64;
        if let Some(h) = handover_times_s
            .iter()
            .find(|h| !(h.is_finite() && **h >= start_s && **h <= last))
        {
            return Err(Error::validation(format!(
                "trace {id}: handover at {h} s lies outside [{start_s}, {last}]"
            )));
        }
        Ok(Self {
            id,
            start_s,
            throughput_bps,
            handover_times_s,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    /// Throughput values; sample `i` covers `[start + i, start + i + 1)`.
    pub fn throughput_bps(&self) -> &[f64] {
        &self.throughput_bps
    }

    pub fn handover_times_s(&self) -> &[f64] {
        &self.handover_times_s
    }

    pub fn len(&self) -> usize {
        self.throughput_bps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.throughput_bps.is_empty()
    }

    /// Iterates `(time_s, throughput_bps)` pairs.
    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.throughput_bps
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.start_s + i as f64, v))
    }

    pub fn mean_bps(&self) -> f64 {
        self.throughput_bps.iter().sum::<f64>() / self.len() as f64
    }

    /// Handovers whose offset from the trace start lies in `[0, window_s)`.
    pub fn handovers_within(&self, window_s: f64) -> usize {
        self.handover_times_s
            .iter()
            .filter(|&&h| h - self.start_s < window_s)
            .count()
    }

    /// Largest one-second throughput decrease among samples inside `[0, window_s)`.
    pub fn max_drop_within(&self, window_s: f64) -> f64 {
        let n = (window_s.ceil().max(0.0) as usize).min(self.len());
        self.throughput_bps[..n]
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }

    /// Writes `<dir>/<id>.csv` and, when handovers exist, `<dir>/<id>.handovers`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.csv", self.id));
        let mut out = String::from("time_s,throughput_bps\n");
        for (t, v) in self.samples() {
            out.push_str(&format!("{t},{v}\n"));
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        if !self.handover_times_s.is_empty() {
            let side = dir.join(format!("{}.handovers", self.id));
            let body: String = self
                .handover_times_s
                .iter()
                .map(|h| format!("{h}\n"))
                .collect();
            fs::write(&side, body).map_err(|e| Error::io(&side, e))?;
        }
        Ok(path)
    }
}

/// Reads a `time_s,throughput_bps` CSV (plus optional `.handovers` sidecar).
///
/// Rows that are not spaced exactly 1 s apart are resampled onto a 1-s grid
/// starting at the first timestamp with previous-value hold.
pub fn ingest_trace(path: &Path) -> Result<ThroughputTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::validation(format!("cannot derive trace id from {}", path.display())))?
        .to_string();

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut rows: Vec<(f64, f64)> = Vec::new();
    let mut seen_content = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let first_content = !seen_content;
        seen_content = true;
        if first_content && fields[0].parse::<f64>().is_err() {
            // header row
            continue;
        }
        if fields.len() != 2 {
            return Err(parse_err(
                line_no,
                format!("expected 2 fields `time_s,throughput_bps`, found {}", fields.len()),
            ));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad time value {:?}", fields[0])))?;
        let v: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad throughput value {:?}", fields[1])))?;
        if !t.is_finite() || !v.is_finite() {
            return Err(parse_err(line_no, "non-finite value".into()));
        }
        if v <= 0.0 {
            return Err(Error::validation(format!(
                "{}: line {line_no}: throughput must be positive, got {v}",
                path.display()
            )));
        }
        if let Some(&(prev, _)) = rows.last() {
            if t <= prev {
                return Err(parse_err(
                    line_no,
                    format!("time {t} is not after previous time {prev}"),
                ));
            }
        }
        rows.push((t, v));
    }
    if rows.is_empty() {
        return Err(Error::validation(format!(
            "{}: trace file has no samples",
            path.display()
        )));
    }

    let samples = resample_hold(&rows);
    let start = rows[0].0;

    let side = path.with_extension("handovers");
    let mut handovers = Vec::new();
    if side.exists() {
        let body = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        for (idx, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let h: f64 = line.parse().map_err(|_| Error::Parse {
                path: side.clone(),
                line: idx + 1,
                msg: format!("bad handover time {line:?}"),
            })?;
            handovers.push(h);
        }
    }
    ThroughputTrace::new(id, start, samples, handovers)
}

/// Zero-order hold onto the grid `t0, t0 + 1, ...` up to the last row time.
fn resample_hold(rows: &[(f64, f64)]) -> Vec<f64> {
    let t0 = rows[0].0;
    let span = rows[rows.len() - 1].0 - t0;
    let n = (span + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let tau = t0 + k as f64;
        while j + 1 < rows.len() && rows[j + 1].0 <= tau + 1e-9 {
            j += 1;
        }
        out.push(rows[j].1);
    }
    out
}

/// Loads every `*.csv` trace in `dir`, sorted by file name.
pub fn load_trace_dir(dir: &Path) -> Result<Vec<ThroughputTrace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation(format!(
            "no trace files (*.csv) in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| ingest_trace(p)).collect()
}

/// Parameters of the two-level synthetic link model.
///
/// Regime means are log-normal and redrawn every dwell period. Each regime
/// boundary is a handover: throughput is scaled by `handover_dip_fraction` for
/// `handover_dip_duration_s` seconds. AR(1) noise rides on top within regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Mean of ln(regime throughput in Mbps).
    pub regime_mean_log_mbps: f64,
    pub regime_sigma_log: f64,
    pub regime_dwell_s: f64,
    /// Uniform jitter applied to every dwell period; 0 keeps handovers periodic.
    pub dwell_jitter_s: f64,
    pub handover_dip_fraction: f64,
    pub handover_dip_duration_s: f64,
    pub ar1_rho: f64,
    pub ar1_sigma_mbps: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            regime_mean_log_mbps: 130f64.ln(),
            regime_sigma_log: 0.7,
            regime_dwell_s: 15.0,
            dwell_jitter_s: 5.0,
            handover_dip_fraction: 0.3,
            handover_dip_duration_s: 2.0,
            ar1_rho: 0.8,
            ar1_sigma_mbps: 12.0,
            duration_s: 600.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.regime_mean_log_mbps,
            self.regime_sigma_log,
            self.regime_dwell_s,
            self.dwell_jitter_s,
            self.handover_dip_fraction,
            self.handover_dip_duration_s,
            self.ar1_rho,
            self.ar1_sigma_mbps,
            self.duration_s,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("synth config has non-finite fields"));
        }
        if self.regime_sigma_log < 0.0 || self.ar1_sigma_mbps < 0.0 || self.dwell_jitter_s < 0.0 {
            return Err(Error::validation("synth spreads must be non-negative"));
        }
        if self.regime_dwell_s < 1.0 {
            return Err(Error::validation("regime_dwell_s must be at least 1 s"));
        }
        if self.dwell_jitter_s >= self.regime_dwell_s {
            return Err(Error::validation("dwell_jitter_s must be below regime_dwell_s"));
        }
        if !(0.0..=1.0).contains(&self.handover_dip_fraction) || self.handover_dip_fraction == 0.0 {
            return Err(Error::validation("handover_dip_fraction must be in (0, 1]"));
        }
        if self.handover_dip_duration_s < 0.0 {
            return Err(Error::validation("handover_dip_duration_s must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ar1_rho) {
            return Err(Error::validation("ar1_rho must be in [0, 1)"));
        }
        if self.duration_s < 1.0 {
            return Err(Error::validation("duration_s must be at least 1 s"));
        }
        Ok(())
    }
}

/// Generates a synthetic trace; bit-identical for a fixed config.
pub fn synthesize_trace(id: impl Into<String>, cfg: &SynthConfig) -> Result<ThroughputTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.duration_s.round() as usize;
    let regime = Normal::new(cfg.regime_mean_log_mbps, cfg.regime_sigma_log)
        .map_err(|e| Error::validation(e.to_string()))?;
    let dip_len = cfg.handover_dip_duration_s.round() as usize;

    let mut samples = Vec::with_capacity(n);
    let mut handovers = Vec::new();
    let mut noise = 0.0f64;
    let mut t = 0usize;
    while t < n {
        let dwell = if cfg.dwell_jitter_s > 0.0 {
            let j = rng.random_range(-cfg.dwell_jitter_s..=cfg.dwell_jitter_s);
            (cfg.regime_dwell_s + j).round().max(1.0) as usize
        } else {
            cfg.regime_dwell_s.round() as usize
        };
        let mean_mbps = regime.sample(&mut rng).exp();
        handovers.push(t as f64);
        for k in 0..dwell.min(n - t) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            noise = cfg.ar1_rho * noise + cfg.ar1_sigma_mbps * eps;
            let mut mbps = mean_mbps + noise;
            if k < dip_len {
                mbps *= cfg.handover_dip_fraction;
            }
            samples.push((mbps * 1e6).max(MIN_SYNTH_BPS));
        }
        t += dwell;
    }
    ThroughputTrace::new(id, 0.0, samples, handovers)
}

/// Train / calibration / test partition of trace ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSplit {
    pub train: Vec<String>,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

impl TraceSplit {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.calibration.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles ids by `seed` and partitions them by `fractions` (train, cal, test).
///
/// Calibration and test sizes are rounded (at least one each); train takes the
/// remainder, so the parts always partition the input exactly.
pub fn split_traces(ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<TraceSplit> {
    let (f_train, f_cal, f_test) = fractions;
    if [f_train, f_cal, f_test].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::validation("every split fraction must be positive"));
    }
    if ((f_train + f_cal + f_test) - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split fractions must sum to 1, got {}",
            f_train + f_cal + f_test
        )));
    }
    let n = ids.len();
    if n < 3 {
        return Err(Error::validation(format!("need at least 3 traces to split, got {n}")));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::validation("duplicate trace ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);

    let n_cal = ((n as f64 * f_cal).round() as usize).max(1);
    let n_test = ((n as f64 * f_test).round() as usize).max(1);
    if n_cal + n_test >= n {
        return Err(Error::validation("split leaves no training traces"));
    }
    let n_train = n - n_cal - n_test;
    let test = sorted.split_off(n_train + n_cal);
    let calibration = sorted.split_off(n_train);
    Ok(TraceSplit {
        train: sorted,
        calibration,
        test,
    })
}

/// Ids of the top `top_fraction` traces by handover count within `[0, window_s)`,
/// ranking all traces as one group.
pub fn handover_heavy_subset(
    traces: &[ThroughputTrace],
    window_s: f64,
    top_fraction: f64,
) -> Result<Vec<String>> {
    handover_heavy_subset_grouped(traces, window_s, top_fraction, |_| String::new())
}

/// Per-group variant: each group contributes its own top `top_fraction`.
///
/// Ties on handover count go to the trace with the larger single-second
/// throughput drop inside the window, then to the smaller id.
pub fn handover_heavy_subset_grouped<F>(
    traces: &[ThroughputTrace],
    window_s: f64,
    top_fraction: f64,
    group_of: F,
) -> Result<Vec<String>>
where
    F: Fn(&ThroughputTrace) -> String,
{
    if !(window_s > 0.0) {
        return Err(Error::validation("handover window must be positive"));
    }
    if !(0.0..=1.0).contains(&top_fraction) {
        return Err(Error::validation("top_fraction must lie in [0, 1]"));
    }
    let mut groups: BTreeMap<String, Vec<&ThroughputTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(group_of(t)).or_default().push(t);
    }
    let mut out = Vec::new();
    for (_, members) in groups {
        let take = (members.len() as f64 * top_fraction).round() as usize;
        let mut ranked: Vec<(usize, f64, &ThroughputTrace)> = members
            .into_iter()
            .map(|t| (t.handovers_within(window_s), t.max_drop_within(window_s), t))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.id().cmp(b.2.id())));
        out.extend(ranked.iter().take(take).map(|r| r.2.id().to_string()));
    }
    Ok(out)
}
