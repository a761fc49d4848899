//! Deterministic baseline policies and the future-aware planning expert.
//!
//! All of these are pure functions of their observation. The MPC baseline and
//! the expert share one exhaustive plan search: every `ladder^H` plan is
//! simulated with the simulator's stall, buffer and QoE rules and the first
//! rung of the best plan wins (ties go to the lexicographically smallest plan,
//! so to the lower first rung).

use serde::{Deserialize, Serialize};

use crate::sim::{
    advance_buffer, chunk_qoe, chunk_size, download_time_hold_last, rebuffer_time, Observation,
    PlayerState, PurePolicy, QoeWeights, VideoSpec,
};

/// Highest rung whose bitrate does not exceed the mean measured throughput.
#[derive(Debug, Clone, Copy, Default)]
pub struct RateRule;

pub fn rate_rule_decide(state: &PlayerState, spec: &VideoSpec) -> usize {
    let hist: Vec<f64> = state.throughput_history.iter().copied().filter(|v| *v > 0.0).collect();
    if hist.is_empty() {
        return 0;
    }
    let mean = hist.iter().sum::<f64>() / hist.len() as f64;
    (0..spec.ladder.len())
        .rev()
        .find(|&a| spec.ladder.bps(a) <= mean)
        .unwrap_or(0)
}

impl PurePolicy for RateRule {
    fn select(&self, obs: &Observation<'_>) -> usize {
        rate_rule_decide(obs.state, obs.spec)
    }
}

/// Buffer-based Lyapunov rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BolaConfig {
    /// Trade-off weight `V` (seconds per utility unit).
    pub control_v: f64,
    /// Utility offset `gamma_p`.
    pub utility_offset: f64,
}

impl BolaConfig {
    /// Offset 5 and `V` scaled so the top rung is reached just below a full buffer.
    pub fn for_spec(spec: &VideoSpec) -> Self {
        let utility_offset = 5.0;
        let top_utility = (spec.ladder.kbps(spec.ladder.top()) / spec.ladder.kbps(0)).ln();
        Self {
            control_v: (spec.buffer_max_s - spec.chunk_duration_s) / (top_utility + utility_offset),
            utility_offset,
        }
    }
}

pub fn bola_objective(state: &PlayerState, spec: &VideoSpec, cfg: &BolaConfig, rung: usize) -> f64 {
    let utility = (spec.ladder.kbps(rung) / spec.ladder.kbps(0)).ln();
    (cfg.control_v * (utility + cfg.utility_offset) - state.buffer_s) / state.next_chunk_sizes[rung]
}

pub fn bola_decide(state: &PlayerState, spec: &VideoSpec, cfg: &BolaConfig) -> usize {
    let mut best = 0;
    let mut best_val = bola_objective(state, spec, cfg, 0);
    for a in 1..spec.ladder.len() {
        let v = bola_objective(state, spec, cfg, a);
        if v > best_val {
            best = a;
            best_val = v;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct Bola(pub BolaConfig);

impl PurePolicy for Bola {
    fn select(&self, obs: &Observation<'_>) -> usize {
        bola_decide(obs.state, obs.spec, &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub history_len: usize,
    pub robust: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            history_len: 5,
            robust: true,
        }
    }
}

fn harmonic_mean(xs: &[f64]) -> f64 {
    xs.len() as f64 / xs.iter().map(|x| 1.0 / x).sum::<f64>()
}

/// Harmonic-mean throughput estimate, discounted by the worst relative error
/// the same estimator made over the recent history when `robust` is set.
pub fn mpc_throughput_estimate(state: &PlayerState, cfg: &MpcConfig) -> Option<f64> {
    let hist: Vec<f64> = state.throughput_history.iter().copied().filter(|v| *v > 0.0).collect();
    if hist.is_empty() || cfg.history_len == 0 {
        return None;
    }
    let n = hist.len();
    let window = &hist[n.saturating_sub(cfg.history_len)..];
    let estimate = harmonic_mean(window);
    if !cfg.robust {
        return Some(estimate);
    }
    let mut max_err = 0.0f64;
    for j in n.saturating_sub(cfg.history_len).max(1)..n {
        let past = &hist[j.saturating_sub(cfg.history_len)..j];
        let predicted = harmonic_mean(past);
        max_err = max_err.max((predicted - hist[j]).abs() / hist[j]);
    }
    Some(estimate / (1.0 + max_err))
}

/// Exhaustive plan search over `horizon` chunks starting at chunk
/// `state.chunk_index`. `download_time(elapsed_s, chunk, rung)` gives the
/// planned download time of a chunk that starts `elapsed_s` after now.
pub fn plan_search<F>(state: &PlayerState, spec: &VideoSpec, w: &QoeWeights, horizon: usize, download_time: F) -> usize
where
    F: Fn(f64, usize, usize) -> f64,
{
    let depth = horizon.min(spec.num_chunks - state.chunk_index).max(1);
    let mut search = PlanSearch {
        spec,
        w,
        depth,
        download_time: &download_time,
        best_value: f64::NEG_INFINITY,
        best_first: 0,
    };
    search.descend(0, state.chunk_index, 0.0, state.buffer_s, state.prev_rung, 0.0, 0);
    search.best_first
}

struct PlanSearch<'a, F> {
    spec: &'a VideoSpec,
    w: &'a QoeWeights,
    depth: usize,
    download_time: &'a F,
    best_value: f64,
    best_first: usize,
}

impl<F: Fn(f64, usize, usize) -> f64> PlanSearch<'_, F> {
    #[allow(clippy::too_many_arguments)]
    fn descend(&mut self, level: usize, chunk: usize, elapsed: f64, buffer: f64, prev: usize, acc: f64, first: usize) {
        if level == self.depth {
            if acc > self.best_value {
                self.best_value = acc;
                self.best_first = first;
            }
            return;
        }
        let ladder = &self.spec.ladder;
        for a in 0..ladder.len() {
            let d = (self.download_time)(elapsed, chunk, a);
            let rebuf = rebuffer_time(d, buffer);
            let next_buffer = advance_buffer(buffer, d, self.spec.chunk_duration_s, self.spec.buffer_max_s);
            let q = chunk_qoe(ladder.kbps(a), ladder.kbps(prev), rebuf, self.w);
            let first = if level == 0 { a } else { first };
            self.descend(level + 1, chunk + 1, elapsed + d, next_buffer, a, acc + q, first);
        }
    }
}

/// Model-predictive control under a constant (robust) throughput estimate.
pub fn robust_mpc_decide(state: &PlayerState, spec: &VideoSpec, w: &QoeWeights, cfg: &MpcConfig) -> usize {
    let Some(estimate) = mpc_throughput_estimate(state, cfg) else {
        return 0;
    };
    plan_search(state, spec, w, cfg.horizon, |_, chunk, a| 8.0 * chunk_size(spec, chunk, a) / estimate)
}

#[derive(Debug, Clone, Copy)]
pub struct RobustMpc(pub MpcConfig);

impl PurePolicy for RobustMpc {
    fn select(&self, obs: &Observation<'_>) -> usize {
        robust_mpc_decide(obs.state, obs.spec, obs.weights, &self.0)
    }
}

/// Offline expert: plans against the real future trace segment.
pub fn beam_expert_decide(obs: &Observation<'_>, horizon: usize) -> usize {
    let rates = obs.trace.throughput_bps();
    let now = obs.now_s;
    let spec = obs.spec;
    plan_search(obs.state, spec, obs.weights, horizon, |elapsed, chunk, a| {
        download_time_hold_last(rates, now + elapsed, chunk_size(spec, chunk, a))
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BeamExpert {
    pub horizon: usize,
}

impl Default for BeamExpert {
    fn default() -> Self {
        Self { horizon: 5 }
    }
}

impl PurePolicy for BeamExpert {
    fn select(&self, obs: &Observation<'_>) -> usize {
        beam_expert_decide(obs, self.horizon)
    }
}
