//! Chunk-level streaming simulator.
//!
//! Each chunk download is replayed against the 1-s trace samples, so the
//! effective throughput `c_t` of a chunk is defined by integration and the
//! relation `d_t = 8 S_t / c_t` holds exactly. Wall-clock time advances only by
//! download time; the buffer is capped at `B_max` without idling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ThroughputTrace;

/// Ascending bitrate ladder in kbps; rung 0 is the lowest bitrate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BitrateLadder {
    rungs_kbps: Vec<f64>,
}

impl BitrateLadder {
    pub fn new(rungs_kbps: Vec<f64>) -> Result<Self> {
        if rungs_kbps.len() < 2 {
            return Err(Error::validation("bitrate ladder needs at least 2 rungs"));
        }
        if rungs_kbps.len() > 64 {
            return Err(Error::validation("bitrate ladder supports at most 64 rungs"));
        }
        if rungs_kbps.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::validation("ladder bitrates must be positive"));
        }
        if rungs_kbps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("ladder bitrates must be strictly ascending"));
        }
        Ok(Self { rungs_kbps })
    }

    pub fn len(&self) -> usize {
        self.rungs_kbps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rungs_kbps.is_empty()
    }

    pub fn kbps(&self, rung: usize) -> f64 {
        self.rungs_kbps[rung]
    }

    pub fn bps(&self, rung: usize) -> f64 {
        self.rungs_kbps[rung] * 1000.0
    }

    pub fn top(&self) -> usize {
        self.rungs_kbps.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rungs_kbps
    }
}

impl Default for BitrateLadder {
    fn default() -> Self {
        Self {
            rungs_kbps: vec![3000.0, 8000.0, 15000.0, 30000.0, 60000.0, 120000.0],
        }
    }
}

impl TryFrom<Vec<f64>> for BitrateLadder {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitrateLadder> for Vec<f64> {
    fn from(l: BitrateLadder) -> Self {
        l.rungs_kbps
    }
}

/// Video and player configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub num_chunks: usize,
    pub chunk_duration_s: f64,
    pub ladder: BitrateLadder,
    /// Per-chunk size multiplier (variable-bitrate variation), length `num_chunks`.
    pub size_jitter: Vec<f64>,
    pub buffer_max_s: f64,
    /// Buffer level before the first chunk is requested.
    pub initial_buffer_s: f64,
    /// Rung treated as `a_0` by the first chunk's smoothness term.
    pub initial_prev_rung: usize,
    /// Number of past chunk throughputs kept in the player state.
    pub history_len: usize,
}

impl VideoSpec {
    /// 48 chunks of 4 s, 3..120 Mbps ladder, 60 s buffer, jitter in [0.9, 1.1].
    pub fn standard() -> Self {
        Self {
            num_chunks: 48,
            chunk_duration_s: 4.0,
            ladder: BitrateLadder::default(),
            size_jitter: size_jitter_table(48, 0.9, 1.1, DEFAULT_JITTER_SEED),
            buffer_max_s: 60.0,
            initial_buffer_s: 4.0,
            initial_prev_rung: 0,
            history_len: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_chunks == 0 {
            return Err(Error::validation("num_chunks must be at least 1"));
        }
        if !(self.chunk_duration_s > 0.0) {
            return Err(Error::validation("chunk duration must be positive"));
        }
        if !(self.buffer_max_s >= self.chunk_duration_s) {
            return Err(Error::validation("buffer_max must be at least one chunk duration"));
        }
        if !(0.0..=self.buffer_max_s).contains(&self.initial_buffer_s) {
            return Err(Error::validation("initial buffer must lie in [0, buffer_max]"));
        }
        if self.size_jitter.len() != self.num_chunks {
            return Err(Error::Shape {
                expected: self.num_chunks,
                got: self.size_jitter.len(),
            });
        }
        if self.size_jitter.iter().any(|j| !(j.is_finite() && *j > 0.0)) {
            return Err(Error::validation("size jitter multipliers must be positive"));
        }
        if self.initial_prev_rung >= self.ladder.len() {
            return Err(Error::validation("initial_prev_rung is not a ladder index"));
        }
        Ok(())
    }

    /// Nominal (unjittered) size of the top rung, used as a byte scale.
    pub fn nominal_top_size_bytes(&self) -> f64 {
        self.ladder.bps(self.ladder.top()) * self.chunk_duration_s / 8.0
    }

    pub fn chunk_sizes(&self, t: usize) -> Vec<f64> {
        (0..self.ladder.len()).map(|a| chunk_size(self, t, a)).collect()
    }
}

pub const DEFAULT_JITTER_SEED: u64 = 0x5eed_ab12;

/// Deterministic per-chunk multipliers drawn from `Uniform[low, high]`.
pub fn size_jitter_table(num_chunks: usize, low: f64, high: f64, seed: u64) -> Vec<f64> {
    if low == high {
        return vec![low; num_chunks];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_chunks).map(|_| rng.random_range(low..high)).collect()
}

/// Session QoE weights: stall penalty per second and smoothness penalty per Mbps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QoeWeights {
    pub rebuf_penalty: f64,
    pub smooth_penalty: f64,
}

impl Default for QoeWeights {
    fn default() -> Self {
        Self {
            rebuf_penalty: 40.0,
            smooth_penalty: 1.0,
        }
    }
}

/// Bytes of chunk `t` at `rung`.
pub fn chunk_size(spec: &VideoSpec, t: usize, rung: usize) -> f64 {
    spec.ladder.bps(rung) * spec.chunk_duration_s / 8.0 * spec.size_jitter[t]
}

/// Download outcome of one chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Download {
    pub time_s: f64,
    pub throughput_bps: f64,
}

/// Replays `size_bytes` against the trace from `start_s` (offset from the
/// trace's first sample), consuming each 1-s sample at its rate.
pub fn download_chunk(trace: &ThroughputTrace, start_s: f64, size_bytes: f64) -> Result<Download> {
    if !(size_bytes > 0.0 && size_bytes.is_finite()) {
        return Err(Error::validation(format!("chunk size must be positive, got {size_bytes}")));
    }
    let rates = trace.throughput_bps();
    if !(start_s >= 0.0 && start_s < rates.len() as f64) {
        return Err(Error::Truncated {
            trace_id: trace.id().to_string(),
            at_s: start_s,
        });
    }
    match integrate(rates, start_s, 8.0 * size_bytes, false) {
        Some(end) => {
            let time_s = end - start_s;
            Ok(Download {
                time_s,
                throughput_bps: 8.0 * size_bytes / time_s,
            })
        }
        None => Err(Error::Truncated {
            trace_id: trace.id().to_string(),
            at_s: rates.len() as f64,
        }),
    }
}

/// Like [`download_chunk`] but holds the last sample past the end of the
/// trace. Used for offline planning only.
pub fn download_time_hold_last(rates: &[f64], start_s: f64, size_bytes: f64) -> f64 {
    let end = integrate(rates, start_s, 8.0 * size_bytes, true).expect("hold-last never truncates");
    end - start_s
}

/// Finish time of delivering `bits` from `start_s`; `None` when the trace runs out.
fn integrate(rates: &[f64], start_s: f64, bits: f64, hold_last: bool) -> Option<f64> {
    let mut remaining = bits;
    let mut t = start_s;
    loop {
        let idx = t.floor() as usize;
        let rate = match rates.get(idx) {
            Some(r) => *r,
            None if hold_last => {
                let r = *rates.last()?;
                return Some(t + remaining / r);
            }
            None => return None,
        };
        let slot_end = (idx + 1) as f64;
        let capacity = rate * (slot_end - t);
        if capacity >= remaining {
            return Some(t + remaining / rate);
        }
        remaining -= capacity;
        t = slot_end;
    }
}

/// Stall time caused by a download that outlasts the buffer.
pub fn rebuffer_time(download_time_s: f64, buffer_s: f64) -> f64 {
    (download_time_s - buffer_s).max(0.0)
}

/// Buffer level after downloading one chunk of `chunk_duration_s` seconds.
pub fn advance_buffer(buffer_s: f64, download_time_s: f64, chunk_duration_s: f64, buffer_max_s: f64) -> f64 {
    buffer_max_s.min((buffer_s - download_time_s).max(0.0) + chunk_duration_s)
}

/// Per-chunk QoE: bitrate utility minus stall and switching penalties.
pub fn chunk_qoe(rung_kbps: f64, prev_rung_kbps: f64, rebuf_s: f64, w: &QoeWeights) -> f64 {
    rung_kbps / 1000.0 - w.rebuf_penalty * rebuf_s - w.smooth_penalty * (rung_kbps - prev_rung_kbps).abs() / 1000.0
}

/// Everything a bitrate policy observes before choosing chunk `chunk_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerState {
    pub chunk_index: usize,
    pub buffer_s: f64,
    pub prev_rung: usize,
    /// Measured effective throughputs of the most recent chunks, oldest first
    /// (at most `history_len` entries).
    pub throughput_history: Vec<f64>,
    /// Chunks still to download, including this one.
    pub remaining_chunks: usize,
    pub next_chunk_sizes: Vec<f64>,
}

/// Decision-time view handed to policies and auditors.
///
/// `trace` and `now_s` give access to the link; only offline experts may look
/// past `now_s`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub state: &'a PlayerState,
    pub spec: &'a VideoSpec,
    pub weights: &'a QoeWeights,
    pub trace: &'a ThroughputTrace,
    pub now_s: f64,
}

impl Observation<'_> {
    /// Trace samples whose 1-s interval has fully elapsed, at most `max_len` of them.
    pub fn past_samples(&self, max_len: usize) -> &[f64] {
        let rates = self.trace.throughput_bps();
        let elapsed = (self.now_s.floor().max(0.0) as usize).min(rates.len());
        &rates[elapsed.saturating_sub(max_len)..elapsed]
    }
}

/// A bitrate policy, possibly stateful (e.g. sampling with an internal RNG).
pub trait AbrPolicy {
    fn choose(&mut self, obs: &Observation<'_>) -> usize;
}

/// A policy that is a pure function of its observation.
pub trait PurePolicy: Sync {
    fn select(&self, obs: &Observation<'_>) -> usize;
}

impl<P: PurePolicy + ?Sized> PurePolicy for &P {
    fn select(&self, obs: &Observation<'_>) -> usize {
        (**self).select(obs)
    }
}

impl<P: PurePolicy> AbrPolicy for P {
    fn choose(&mut self, obs: &Observation<'_>) -> usize {
        self.select(obs)
    }
}

/// Outcome of auditing one raw request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRecord {
    pub safe_rung: usize,
    pub intervened: bool,
    /// The feasible set below the request was empty and the lowest rung was forced.
    pub fallback: bool,
    /// Predicted safe capacity for the executed rung, when a prediction existed.
    pub capacity_bps: Option<f64>,
    /// Capacity after the auditor's margin.
    pub effective_capacity_bps: Option<f64>,
}

/// Runtime check applied between the policy's request and execution.
pub trait ActionAuditor: Sync {
    fn audit(&self, obs: &Observation<'_>, raw_rung: usize) -> AuditRecord;
}

/// Logged outcome of one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkOutcome {
    pub chunk_index: usize,
    pub start_time_s: f64,
    pub raw_rung: usize,
    pub rung: usize,
    pub audited: bool,
    pub fallback: bool,
    pub download_time_s: f64,
    pub rebuffer_s: f64,
    pub throughput_bps: f64,
    pub qoe: f64,
    pub buffer_before_s: f64,
    pub buffer_after_s: f64,
    pub size_bytes: f64,
    pub capacity_bps: Option<f64>,
    pub effective_capacity_bps: Option<f64>,
}

/// Per-chunk outcomes plus session aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub trace_id: String,
    pub outcomes: Vec<ChunkOutcome>,
    pub session_qoe: f64,
    pub session_rebuf: f64,
    /// The trace ran out before all chunks were downloaded.
    pub truncated: bool,
}

#[derive(Serialize)]
struct SessionSummary<'a> {
    trace_id: &'a str,
    chunks: usize,
    session_qoe: f64,
    session_rebuf: f64,
    interventions: usize,
    truncated: bool,
}

impl SessionLog {
    pub const CSV_HEADER: &'static str = "chunk,start_s,raw_rung,rung,audited,fallback,download_s,rebuffer_s,throughput_bps,qoe,buffer_before_s,buffer_after_s,size_bytes,capacity_bps,effective_capacity_bps";

    pub fn interventions(&self) -> usize {
        self.outcomes.iter().filter(|o| o.audited).count()
    }

    /// One row per chunk, including the audit columns.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for o in &self.outcomes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                o.chunk_index,
                o.start_time_s,
                o.raw_rung,
                o.rung,
                u8::from(o.audited),
                u8::from(o.fallback),
                o.download_time_s,
                o.rebuffer_s,
                o.throughput_bps,
                o.qoe,
                o.buffer_before_s,
                o.buffer_after_s,
                o.size_bytes,
                opt(o.capacity_bps),
                opt(o.effective_capacity_bps),
            ));
        }
        out
    }

    /// Session aggregates as JSON.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&SessionSummary {
            trace_id: &self.trace_id,
            chunks: self.outcomes.len(),
            session_qoe: self.session_qoe,
            session_rebuf: self.session_rebuf,
            interventions: self.interventions(),
            truncated: self.truncated,
        })
        .expect("summary serializes")
    }
}

/// Step-wise session over one trace. Used directly by training rollouts and
/// wrapped by [`run_session`] for evaluation.
#[derive(Debug, Clone)]
pub struct SessionEnv<'a> {
    trace: &'a ThroughputTrace,
    spec: &'a VideoSpec,
    weights: QoeWeights,
    chunk: usize,
    now_s: f64,
    state: PlayerState,
    outcomes: Vec<ChunkOutcome>,
    qoe_total: f64,
    rebuf_total: f64,
    truncated: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// `None` when the trace ran out during this chunk.
    pub outcome: Option<ChunkOutcome>,
    pub done: bool,
    pub truncated: bool,
}

impl<'a> SessionEnv<'a> {
    pub fn new(trace: &'a ThroughputTrace, spec: &'a VideoSpec, weights: QoeWeights) -> Self {
        let state = PlayerState {
            chunk_index: 0,
            buffer_s: spec.initial_buffer_s,
            prev_rung: spec.initial_prev_rung,
            throughput_history: Vec::with_capacity(spec.history_len),
            remaining_chunks: spec.num_chunks,
            next_chunk_sizes: spec.chunk_sizes(0),
        };
        Self {
            trace,
            spec,
            weights,
            chunk: 0,
            now_s: 0.0,
            state,
            outcomes: Vec::with_capacity(spec.num_chunks),
            qoe_total: 0.0,
            rebuf_total: 0.0,
            truncated: false,
        }
    }

    pub fn state(&self) -> &PlayerState {
        &self.state
    }

    pub fn now_s(&self) -> f64 {
        self.now_s
    }

    pub fn trace(&self) -> &'a ThroughputTrace {
        self.trace
    }

    pub fn spec(&self) -> &'a VideoSpec {
        self.spec
    }

    pub fn is_done(&self) -> bool {
        self.truncated || self.chunk >= self.spec.num_chunks
    }

    pub fn rebuffer_so_far(&self) -> f64 {
        self.rebuf_total
    }

    pub fn observation(&self) -> Observation<'_> {
        Observation {
            state: &self.state,
            spec: self.spec,
            weights: &self.weights,
            trace: self.trace,
            now_s: self.now_s,
        }
    }

    /// Downloads the current chunk at `rung` without an auditor.
    pub fn step(&mut self, rung: usize) -> Step {
        self.step_audited(rung, rung, None)
    }

    /// Downloads at `record.safe_rung`, logging the raw request and audit data.
    pub fn step_audited(&mut self, raw_rung: usize, rung: usize, record: Option<AuditRecord>) -> Step {
        assert!(!self.is_done(), "step on a finished session");
        assert!(rung < self.spec.ladder.len(), "rung {rung} outside ladder");
        let t = self.chunk;
        let size = self.state.next_chunk_sizes[rung];
        let dl = match download_chunk(self.trace, self.now_s, size) {
            Ok(d) => d,
            Err(_) => {
                self.truncated = true;
                return Step {
                    outcome: None,
                    done: true,
                    truncated: true,
                };
            }
        };
        let b_before = self.state.buffer_s;
        let rebuf = rebuffer_time(dl.time_s, b_before);
        let b_after = advance_buffer(b_before, dl.time_s, self.spec.chunk_duration_s, self.spec.buffer_max_s);
        let ladder = &self.spec.ladder;
        let q = chunk_qoe(ladder.kbps(rung), ladder.kbps(self.state.prev_rung), rebuf, &self.weights);

        let outcome = ChunkOutcome {
            chunk_index: t,
            start_time_s: self.now_s,
            raw_rung,
            rung,
            audited: record.is_some_and(|r| r.intervened),
            fallback: record.is_some_and(|r| r.fallback),
            download_time_s: dl.time_s,
            rebuffer_s: rebuf,
            throughput_bps: dl.throughput_bps,
            qoe: q,
            buffer_before_s: b_before,
            buffer_after_s: b_after,
            size_bytes: size,
            capacity_bps: record.and_then(|r| r.capacity_bps),
            effective_capacity_bps: record.and_then(|r| r.effective_capacity_bps),
        };
        self.outcomes.push(outcome.clone());
        self.qoe_total += q;
        self.rebuf_total += rebuf;
        self.now_s += dl.time_s;
        self.chunk += 1;

        let hist = &mut self.state.throughput_history;
        if hist.len() == self.spec.history_len && !hist.is_empty() {
            hist.remove(0);
        }
        if self.spec.history_len > 0 {
            hist.push(dl.throughput_bps);
        }
        self.state.chunk_index = self.chunk;
        self.state.buffer_s = b_after;
        self.state.prev_rung = rung;
        self.state.remaining_chunks = self.spec.num_chunks - self.chunk;
        if self.chunk < self.spec.num_chunks {
            self.state.next_chunk_sizes = self.spec.chunk_sizes(self.chunk);
        }
        Step {
            outcome: Some(outcome),
            done: self.is_done(),
            truncated: false,
        }
    }

    pub fn into_log(self) -> SessionLog {
        SessionLog {
            trace_id: self.trace.id().to_string(),
            outcomes: self.outcomes,
            session_qoe: self.qoe_total,
            session_rebuf: self.rebuf_total,
            truncated: self.truncated,
        }
    }
}

/// Streams the whole video over `trace`, querying `policy` (and `auditor`, if
/// any) before every chunk.
pub fn run_session(
    trace: &ThroughputTrace,
    spec: &VideoSpec,
    weights: &QoeWeights,
    policy: &mut dyn AbrPolicy,
    auditor: Option<&dyn ActionAuditor>,
) -> SessionLog {
    let mut env = SessionEnv::new(trace, spec, *weights);
    while !env.is_done() {
        let obs = env.observation();
        let raw = policy.choose(&obs).min(spec.ladder.top());
        let (rung, record) = match auditor {
            Some(a) => {
                let rec = a.audit(&obs, raw);
                (rec.safe_rung, Some(rec))
            }
            None => (raw, None),
        };
        env.step_audited(raw, rung, record);
    }
    env.into_log()
}

/// One session per trace, run concurrently; logs come back in trace order.
pub fn run_sessions(
    policy: &dyn PurePolicy,
    auditor: Option<&dyn ActionAuditor>,
    traces: &[ThroughputTrace],
    spec: &VideoSpec,
    weights: &QoeWeights,
) -> Vec<SessionLog> {
    traces
        .par_iter()
        .map(|t| run_session(t, spec, weights, &mut { policy }, auditor))
        .collect()
}

/// Always requests the same rung.
#[derive(Debug, Clone, Copy)]
pub struct FixedRung(pub usize);

impl PurePolicy for FixedRung {
    fn select(&self, _obs: &Observation<'_>) -> usize {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_no_jitter() -> VideoSpec {
        VideoSpec {
            size_jitter: vec![1.0; 48],
            ..VideoSpec::standard()
        }
    }

    fn constant(bps: f64, secs: usize) -> ThroughputTrace {
        ThroughputTrace::new("c", 0.0, vec![bps; secs], vec![]).unwrap()
    }

    #[test]
    fn chunk_sizes_follow_bitrate() {
        let mut spec = spec_no_jitter();
        assert_eq!(chunk_size(&spec, 0, 3), 15_000_000.0);
        assert_eq!(chunk_size(&spec, 0, 0), 1_500_000.0);
        spec.size_jitter[2] = 1.1;
        assert!((chunk_size(&spec, 2, 0) - 1_650_000.0).abs() < 1e-6);
    }

    #[test]
    fn jitter_table_is_deterministic_and_bounded() {
        let a = size_jitter_table(48, 0.9, 1.1, 3);
        assert_eq!(a, size_jitter_table(48, 0.9, 1.1, 3));
        assert!(a.iter().all(|j| (0.9..1.1).contains(j)));
    }

    #[test]
    fn download_constant_rate() {
        let t = constant(120e6, 10);
        let d = download_chunk(&t, 0.0, 30e6).unwrap();
        assert!((d.time_s - 2.0).abs() < 1e-12);
        assert!((d.throughput_bps - 120e6).abs() < 1e-3);
    }

    #[test]
    fn download_crosses_sample_boundary() {
        let t = ThroughputTrace::new("s", 0.0, vec![10e6, 30e6, 30e6], vec![]).unwrap();
        let d = download_chunk(&t, 0.0, 2.5e6).unwrap();
        assert!((d.time_s - 4.0 / 3.0).abs() < 1e-12);
        assert!((d.throughput_bps - 15e6).abs() < 1e-3);
    }

    #[test]
    fn download_errors() {
        let t = constant(1e6, 2);
        assert!(matches!(download_chunk(&t, 0.0, 0.0), Err(Error::Validation(_))));
        assert!(matches!(download_chunk(&t, 0.0, 1e6), Err(Error::Truncated { .. })));
        assert!((download_time_hold_last(t.throughput_bps(), 0.0, 1e6) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rebuffer_and_buffer_rules() {
        assert_eq!(rebuffer_time(2.0, 10.0), 0.0);
        assert_eq!(rebuffer_time(5.0, 3.0), 2.0);
        assert_eq!(rebuffer_time(4.0, 4.0), 0.0);
        assert_eq!(advance_buffer(3.0, 5.0, 4.0, 60.0), 4.0);
        assert_eq!(advance_buffer(59.0, 1.0, 4.0, 60.0), 60.0);
        assert_eq!(advance_buffer(10.0, 2.0, 4.0, 60.0), 12.0);
    }

    #[test]
    fn qoe_terms() {
        let w = QoeWeights::default();
        assert!((chunk_qoe(60000.0, 30000.0, 0.5, &w) - 10.0).abs() < 1e-12);
        assert!((chunk_qoe(3000.0, 3000.0, 0.0, &w) - 3.0).abs() < 1e-12);
        assert!((chunk_qoe(120000.0, 120000.0, 1.0, &w) - 80.0).abs() < 1e-12);
    }

    #[test]
    fn lowest_rung_on_fast_link_never_stalls() {
        let mut spec = spec_no_jitter();
        spec.initial_prev_rung = 2;
        let w = QoeWeights::default();
        let trace = constant(500e6, 400);
        let log = run_session(&trace, &spec, &w, &mut FixedRung(0), None);
        assert_eq!(log.session_rebuf, 0.0);
        let expected = 48.0 * 3.0 - (15.0 - 3.0);
        assert!((log.session_qoe - expected).abs() < 1e-9);
        assert!(!log.truncated);
    }

    #[test]
    fn zero_weights_score_only_bitrate() {
        let spec = spec_no_jitter();
        let w = QoeWeights {
            rebuf_penalty: 0.0,
            smooth_penalty: 0.0,
        };
        let trace = constant(20e6, 2000);
        let log = run_session(&trace, &spec, &w, &mut FixedRung(5), None);
        assert!(log.session_rebuf > 0.0);
        assert!((log.session_qoe - 48.0 * 120.0).abs() < 1e-9);
    }

    #[test]
    fn short_trace_truncates() {
        let spec = spec_no_jitter();
        let trace = constant(10e6, 20);
        let log = run_session(&trace, &spec, &QoeWeights::default(), &mut FixedRung(5), None);
        assert!(log.truncated);
        assert!(log.outcomes.len() < 48);
    }

    #[test]
    fn session_is_deterministic_and_serializes() {
        let spec = VideoSpec::standard();
        let trace = constant(50e6, 600);
        let w = QoeWeights::default();
        let a = run_session(&trace, &spec, &w, &mut FixedRung(3), None);
        let b = run_session(&trace, &spec, &w, &mut FixedRung(3), None);
        assert_eq!(a, b);
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 49);
        let json: serde_json::Value = serde_json::from_str(&a.summary_json()).unwrap();
        assert_eq!(json["chunks"], 48);
    }

    #[test]
    fn past_samples_exclude_current_second() {
        let spec = VideoSpec::standard();
        let trace = ThroughputTrace::new("p", 0.0, (1..=10).map(f64::from).collect(), vec![]).unwrap();
        let state = SessionEnv::new(&trace, &spec, QoeWeights::default()).state().clone();
        let w = QoeWeights::default();
        let obs = Observation {
            state: &state,
            spec: &spec,
            weights: &w,
            trace: &trace,
            now_s: 3.5,
        };
        assert_eq!(obs.past_samples(75), &[1.0, 2.0, 3.0]);
        assert_eq!(obs.past_samples(2), &[2.0, 3.0]);
    }
}
