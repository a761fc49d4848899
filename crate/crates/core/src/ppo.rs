//! Clipped policy-gradient fine-tuning with a tail-risk penalty on episode
//! rebuffering.
//!
//! The penalty enters as terminal reward shaping: an episode whose total
//! stall time exceeds the rolling empirical alpha-quantile `xi` loses
//! `lambda / (1 - alpha) * (R - budget - xi)+` on its last step. Averaged over
//! a batch whose window is the batch itself this equals
//! `lambda * (CVaR - xi)`, and `xi` carries no gradient.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::quantile_index;
use crate::nn::{backward_batch, featurize, optimizer_step, sample_action, Adam, Forward, PolicyNet};
use crate::sim::{QoeWeights, SessionEnv, VideoSpec};
use crate::trace::ThroughputTrace;

/// Empirical value-at-risk `xi` and conditional value-at-risk at level `alpha`.
pub fn empirical_cvar(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::validation("cvar of an empty sample"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("cvar alpha {alpha} outside (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let xi = sorted[quantile_index(alpha, sorted.len())];
    let excess: f64 = sorted.iter().map(|v| (v - xi).max(0.0)).sum();
    // (1 - alpha) N is an integer tail size up to float noise, e.g. 0.1 * 10
    let mut tail = (1.0 - alpha) * sorted.len() as f64;
    if (tail - tail.round()).abs() < 1e-9 {
        tail = tail.round();
    }
    Ok((xi, xi + excess / tail))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvarConfig {
    pub alpha: f64,
    pub penalty_weight: f64,
    /// Most recent completed episodes kept for the quantile.
    pub window: usize,
    /// Stall seconds forgiven before the hinge.
    pub budget: f64,
}

impl Default for CvarConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            penalty_weight: 20.0,
            window: 512,
            budget: 0.0,
        }
    }
}

impl CvarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation("cvar alpha must lie in (0, 1)"));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::validation("cvar penalty weight must be finite and non-negative"));
        }
        if self.window == 0 {
            return Err(Error::validation("cvar window must be positive"));
        }
        if !(self.budget >= 0.0) {
            return Err(Error::validation("cvar budget must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub n_steps: usize,
    pub n_envs: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub total_steps: usize,
    pub normalize_reward: bool,
    pub reward_clip: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_steps: 512,
            n_envs: 4,
            minibatch_size: 64,
            epochs: 10,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            learning_rate: 3e-4,
            adam_eps: 1e-5,
            total_steps: 50_000,
            normalize_reward: true,
            reward_clip: 10.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_envs == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("ppo n_steps, n_envs, minibatch_size and epochs must be positive"));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(Error::validation("ppo clip range must lie in (0, 1)"));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("ppo {name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("reward_clip", self.reward_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("ppo {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn batch_steps(&self) -> usize {
        self.n_steps * self.n_envs
    }
}

/// One environment step as recorded during collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    /// Chunk QoE, plus the tail penalty on an episode's last step once shaped.
    pub reward: f64,
    /// Running return scale at collection time.
    pub reward_scale: f64,
    pub done: bool,
}

/// An episode that ended inside the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEnd {
    /// Index of the episode's last transition in the batch.
    pub terminal: usize,
    pub rebuffer_s: f64,
    pub qoe: f64,
    /// Ended because the trace ran out rather than the video finishing.
    pub truncated: bool,
}

/// Contiguous run of one environment's transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// `V(s)` of the state after the segment, 0 when it ended an episode.
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub segments: Vec<Segment>,
    pub episodes: Vec<EpisodeEnd>,
}

/// Subtracts the tail penalty from every ended episode's terminal reward.
///
/// `xi` is the alpha-quantile of the last `cfg.window` entries of `window`;
/// returns it, or `None` (batch unchanged) when the window is empty.
pub fn shape_terminal_rewards(batch: &mut RolloutBatch, cfg: &CvarConfig, window: &[f64]) -> Result<Option<f64>> {
    if window.is_empty() {
        return Ok(None);
    }
    let recent = &window[window.len().saturating_sub(cfg.window)..];
    let (xi, _) = empirical_cvar(recent, cfg.alpha)?;
    if cfg.penalty_weight == 0.0 {
        return Ok(Some(xi));
    }
    let scale = cfg.penalty_weight / (1.0 - cfg.alpha);
    for ep in &batch.episodes {
        let excess = (ep.rebuffer_s - cfg.budget - xi).max(0.0);
        if excess > 0.0 {
            batch.transitions[ep.terminal].reward -= scale * excess;
        }
    }
    Ok(Some(xi))
}

/// Generalized advantage estimation over one segment. Returns
/// `(advantages, returns)` with `returns = advantages + values`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Training rewards: shaped reward over the running scale, clipped.
pub fn training_rewards(batch: &RolloutBatch, clip: f64) -> Vec<f64> {
    batch.transitions.iter().map(|t| (t.reward / t.reward_scale).clamp(-clip, clip)).collect()
}

/// GAE over every segment of the batch.
pub fn batch_advantages(batch: &RolloutBatch, rewards: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(rewards.len());
    let mut ret = Vec::with_capacity(rewards.len());
    for seg in &batch.segments {
        let tr = &batch.transitions[seg.start..seg.end];
        let values: Vec<f64> = tr.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = tr.iter().map(|t| t.done).collect();
        let (a, r) = gae_advantages(&rewards[seg.start..seg.end], &values, &dones, seg.bootstrap_value, gamma, lambda);
        adv.extend(a);
        ret.extend(r);
    }
    (adv, ret)
}

/// Zero mean, unit variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// One optimization sample.
#[derive(Debug, Clone, Copy)]
pub struct PpoSample<'a> {
    pub features: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MinibatchEval {
    /// Mean clipped surrogate (to be maximized).
    pub surrogate: f64,
    /// Mean squared value error.
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// Loss `-surrogate + value_coef * value_loss` and its gradient.
pub fn minibatch_loss(net: &PolicyNet, batch: &[PpoSample<'_>], clip: f64, value_coef: f64) -> Result<(MinibatchEval, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::validation("ppo minibatch is empty"));
    }
    let n = batch.len() as f64;
    let mut eval = MinibatchEval::default();
    let mut items: Vec<(Forward, Vec<f64>, f64)> = Vec::with_capacity(batch.len());
    for s in batch {
        let fwd = net.forward(s.features)?;
        let ratio = (fwd.log_prob(s.action) - s.old_log_prob).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite("probability ratio"));
        }
        let unclipped = ratio * s.advantage;
        let sur = clipped_surrogate(ratio, s.advantage, clip);
        eval.surrogate += sur / n;
        eval.mean_ratio += ratio / n;
        if (ratio - 1.0).abs() > clip {
            eval.clip_fraction += 1.0 / n;
        }
        let err = fwd.value - s.value_target;
        eval.value_loss += err * err / n;

        // d(-sur)/dlogits = -(r A / n) (onehot - p) while the unclipped branch is active
        let mut d_logits = vec![0.0; fwd.probs.len()];
        if unclipped <= sur {
            let g = -unclipped / n;
            for (a, (d, p)) in d_logits.iter_mut().zip(&fwd.probs).enumerate() {
                *d = g * (f64::from(u8::from(a == s.action)) - p);
            }
        }
        let d_value = value_coef * 2.0 * err / n;
        items.push((fwd, d_logits, d_value));
    }
    let grad = backward_batch(net, &items)?;
    Ok((eval, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Epochs of shuffled minibatch updates. Advantages are normalized over the
/// whole update first.
pub fn ppo_update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    samples: &[PpoSample<'_>],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    normalize_advantages(&mut adv);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let mb: Vec<PpoSample<'_>> = idx
                .iter()
                .map(|&i| PpoSample {
                    advantage: adv[i],
                    ..samples[i]
                })
                .collect();
            let (eval, grad) = minibatch_loss(net, &mb, cfg.clip_range, cfg.value_coef)?;
            let norm = optimizer_step(opt, net, &grad)?;
            stats.surrogate += eval.surrogate;
            stats.value_loss += eval.value_loss;
            stats.clip_fraction += eval.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.surrogate /= k;
        stats.value_loss /= k;
        stats.clip_fraction /= k;
        stats.grad_norm /= k;
    }
    Ok(stats)
}

/// Running variance of a stream (parallel-merge form), seeded with a tiny
/// pseudo-count so the first scale is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStd {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for RunningStd {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 1e-4,
        }
    }
}

impl RunningStd {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let delta = mean - self.mean;
        let total = self.count + n;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    pub fn scale(&self) -> f64 {
        (self.var + 1e-8).sqrt()
    }
}

/// Everything besides the parameters needed to continue a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub steps_done: u64,
    pub updates: u64,
    pub rebuffer_window: Vec<f64>,
    pub return_std: RunningStd,
    pub optimizer: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: u64,
    pub steps: u64,
    pub mean_reward: f64,
    pub episodes: usize,
    pub mean_episode_rebuf: f64,
    pub batch_cvar: f64,
    pub xi: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub curve: Vec<CurvePoint>,
}

impl FinetuneReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,steps,mean_reward,episodes,mean_episode_rebuf,batch_cvar,xi,value_loss,clip_fraction\n");
        for p in &self.curve {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.update, p.steps, p.mean_reward, p.episodes, p.mean_episode_rebuf, p.batch_cvar, p.xi, p.value_loss, p.clip_fraction
            );
        }
        out
    }
}

struct Worker<'a> {
    env: SessionEnv<'a>,
    ret: f64,
}

fn fresh_env<'a>(
    traces: &'a [ThroughputTrace],
    spec: &'a VideoSpec,
    weights: &QoeWeights,
    rng: &mut ChaCha8Rng,
) -> SessionEnv<'a> {
    SessionEnv::new(&traces[rng.random_range(0..traces.len())], spec, *weights)
}

fn update_rng(seed: u64, update: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ update.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Steps every worker `n_steps` times with sampled actions.
#[allow(clippy::too_many_arguments)]
fn collect<'a>(
    net: &PolicyNet,
    workers: &mut [Worker<'a>],
    traces: &'a [ThroughputTrace],
    spec: &'a VideoSpec,
    weights: &QoeWeights,
    cfg: &PpoConfig,
    ret_std: &mut RunningStd,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    let n_envs = workers.len();
    let mut per_env: Vec<Vec<Transition>> = vec![Vec::with_capacity(cfg.n_steps); n_envs];
    let mut ends: Vec<Vec<EpisodeEnd>> = vec![Vec::new(); n_envs];
    for _ in 0..cfg.n_steps {
        let mut step_rewards = Vec::with_capacity(n_envs);
        let mut step_done = Vec::with_capacity(n_envs);
        for (e, w) in workers.iter_mut().enumerate() {
            let x = featurize(w.env.state(), spec);
            let fwd = net.forward(&x)?;
            let a = sample_action(&fwd.probs, rng);
            let step = w.env.step(a);
            let q = step.outcome.as_ref().map_or(0.0, |o| o.qoe);
            if step.truncated {
                // trace ran out mid-chunk: close the episode on its last recorded step
                if let Some(last) = per_env[e].last_mut().filter(|t| !t.done) {
                    last.done = true;
                    let finished = std::mem::replace(&mut w.env, fresh_env(traces, spec, weights, rng));
                    let log = finished.into_log();
                    ends[e].push(EpisodeEnd {
                        terminal: per_env[e].len() - 1,
                        rebuffer_s: log.session_rebuf,
                        qoe: log.session_qoe,
                        truncated: true,
                    });
                } else {
                    w.env = fresh_env(traces, spec, weights, rng);
                }
                w.ret = 0.0;
                continue;
            }
            per_env[e].push(Transition {
                features: x,
                action: a,
                log_prob: fwd.log_prob(a),
                value: fwd.value,
                reward: q,
                reward_scale: 1.0,
                done: step.done,
            });
            step_rewards.push((e, q));
            step_done.push(step.done);
            if step.done {
                let finished = std::mem::replace(&mut w.env, fresh_env(traces, spec, weights, rng));
                let log = finished.into_log();
                ends[e].push(EpisodeEnd {
                    terminal: per_env[e].len() - 1,
                    rebuffer_s: log.session_rebuf,
                    qoe: log.session_qoe,
                    truncated: false,
                });
            }
        }
        if cfg.normalize_reward && !step_rewards.is_empty() {
            let rets: Vec<f64> = step_rewards
                .iter()
                .map(|&(e, q)| {
                    workers[e].ret = workers[e].ret * cfg.gamma + q;
                    workers[e].ret
                })
                .collect();
            ret_std.update(&rets);
            let scale = ret_std.scale();
            for (&(e, _), &done) in step_rewards.iter().zip(&step_done) {
                per_env[e].last_mut().expect("pushed this step").reward_scale = scale;
                if done {
                    workers[e].ret = 0.0;
                }
            }
        }
    }

    let mut batch = RolloutBatch::default();
    for (e, (trs, eps)) in per_env.into_iter().zip(ends).enumerate() {
        let start = batch.transitions.len();
        let open = trs.last().is_some_and(|t| !t.done);
        let bootstrap_value = if open {
            net.forward(&featurize(workers[e].env.state(), spec))?.value
        } else {
            0.0
        };
        batch.episodes.extend(eps.into_iter().map(|ep| EpisodeEnd {
            terminal: ep.terminal + start,
            ..ep
        }));
        batch.transitions.extend(trs);
        batch.segments.push(Segment {
            start,
            end: batch.transitions.len(),
            bootstrap_value,
        });
    }
    Ok(batch)
}

/// Tail-penalized fine-tuning of `net` on the training traces until
/// `ppo.total_steps` environment steps have been consumed. Passing a
/// `resume` state continues its step count, window and optimizer.
pub fn finetune(
    mut net: PolicyNet,
    traces: &[ThroughputTrace],
    spec: &VideoSpec,
    weights: &QoeWeights,
    ppo: &PpoConfig,
    cvar: &CvarConfig,
    resume: Option<TrainerState>,
) -> Result<(PolicyNet, TrainerState, FinetuneReport)> {
    ppo.validate()?;
    cvar.validate()?;
    if traces.is_empty() {
        return Err(Error::validation("fine-tuning needs a nonempty training split"));
    }
    let mut state = resume.unwrap_or_else(|| TrainerState {
        steps_done: 0,
        updates: 0,
        rebuffer_window: Vec::new(),
        return_std: RunningStd::default(),
        optimizer: Adam::new(net.num_params(), ppo.learning_rate)
            .with_eps(ppo.adam_eps)
            .with_clip(ppo.max_grad_norm),
    });
    if state.optimizer.steps > 0 && state.optimizer.learning_rate != ppo.learning_rate {
        state.optimizer.learning_rate = ppo.learning_rate;
    }
    let mut window: VecDeque<f64> = state.rebuffer_window.drain(..).collect();
    let mut report = FinetuneReport::default();

    let mut rng = update_rng(ppo.seed, state.updates);
    let mut workers: Vec<Worker<'_>> = (0..ppo.n_envs)
        .map(|_| Worker {
            env: fresh_env(traces, spec, weights, &mut rng),
            ret: 0.0,
        })
        .collect();

    while state.steps_done < ppo.total_steps as u64 {
        let mut rng = update_rng(ppo.seed, state.updates + 1);
        let mut batch = collect(&net, &mut workers, traces, spec, weights, ppo, &mut state.return_std, &mut rng)?;
        let mean_reward = batch.transitions.iter().map(|t| t.reward).sum::<f64>() / batch.transitions.len().max(1) as f64;

        let batch_rebuf: Vec<f64> = batch.episodes.iter().map(|e| e.rebuffer_s).collect();
        for &r in &batch_rebuf {
            window.push_back(r);
            if window.len() > cvar.window {
                window.pop_front();
            }
        }
        let recent: Vec<f64> = window.iter().copied().collect();
        let xi = shape_terminal_rewards(&mut batch, cvar, &recent)?;
        let batch_cvar = if batch_rebuf.is_empty() {
            f64::NAN
        } else {
            empirical_cvar(&batch_rebuf, cvar.alpha)?.1
        };

        let clip = if ppo.normalize_reward { ppo.reward_clip } else { f64::INFINITY };
        let rewards = training_rewards(&batch, clip);
        let (adv, ret) = batch_advantages(&batch, &rewards, ppo.gamma, ppo.gae_lambda);
        let samples: Vec<PpoSample<'_>> = batch
            .transitions
            .iter()
            .zip(adv.iter().zip(&ret))
            .map(|(t, (&a, &r))| PpoSample {
                features: &t.features,
                action: t.action,
                old_log_prob: t.log_prob,
                advantage: a,
                value_target: r,
            })
            .collect();
        let stats = ppo_update(&mut net, &mut state.optimizer, &samples, ppo, &mut rng)?;

        state.steps_done += batch.transitions.len() as u64;
        state.updates += 1;
        report.curve.push(CurvePoint {
            update: state.updates,
            steps: state.steps_done,
            mean_reward,
            episodes: batch.episodes.len(),
            mean_episode_rebuf: if batch_rebuf.is_empty() {
                f64::NAN
            } else {
                batch_rebuf.iter().sum::<f64>() / batch_rebuf.len() as f64
            },
            batch_cvar,
            xi: xi.unwrap_or(f64::NAN),
            value_loss: stats.value_loss,
            clip_fraction: stats.clip_fraction,
        });
    }
    state.rebuffer_window = window.into_iter().collect();
    Ok((net, state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetShape;

    #[test]
    fn cvar_hand_examples() {
        let mut v = vec![0.0; 8];
        v.extend([10.0, 20.0]);
        assert_eq!(empirical_cvar(&v, 0.9).unwrap(), (10.0, 20.0));
        assert_eq!(empirical_cvar(&[0.0; 7], 0.9).unwrap(), (0.0, 0.0));
        let (xi, c) = empirical_cvar(&[1.0, 2.0, 3.0, 4.0], 0.75).unwrap();
        assert_eq!(xi, 3.0);
        assert!((c - 4.0).abs() < 1e-12);
        assert!(empirical_cvar(&[], 0.9).is_err());
        assert!(empirical_cvar(&[1.0], 1.0).is_err());
    }

    fn batch_with(rebufs: &[f64]) -> RolloutBatch {
        let mut b = RolloutBatch::default();
        for (i, &r) in rebufs.iter().enumerate() {
            for k in 0..3 {
                b.transitions.push(Transition {
                    features: vec![],
                    action: 0,
                    log_prob: 0.0,
                    value: 0.0,
                    reward: 10.0 + k as f64,
                    reward_scale: 1.0,
                    done: k == 2,
                });
            }
            b.episodes.push(EpisodeEnd {
                terminal: 3 * i + 2,
                rebuffer_s: r,
                qoe: 0.0,
                truncated: false,
            });
        }
        b
    }

    #[test]
    fn shaping_hand_example() {
        let mut window = vec![0.0; 8];
        window.extend([10.0, 20.0]);
        let mut b = batch_with(&[20.0]);
        let xi = shape_terminal_rewards(&mut b, &CvarConfig::default(), &window).unwrap();
        assert_eq!(xi, Some(10.0));
        assert!((b.transitions[2].reward - (12.0 - 2000.0)).abs() < 1e-9);
        assert_eq!(b.transitions[0].reward, 10.0);
    }

    #[test]
    fn shaping_noops() {
        let orig = batch_with(&[1.0, 2.0, 5.0]);
        let mut b = orig.clone();
        let cfg = CvarConfig {
            penalty_weight: 0.0,
            ..CvarConfig::default()
        };
        shape_terminal_rewards(&mut b, &cfg, &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(b, orig);
        // window quantile above every episode
        shape_terminal_rewards(&mut b, &CvarConfig::default(), &[50.0; 4]).unwrap();
        assert_eq!(b, orig);
        assert_eq!(shape_terminal_rewards(&mut b, &CvarConfig::default(), &[]).unwrap(), None);
    }

    #[test]
    fn shaped_mean_is_lambda_times_cvar_gap() {
        let rebufs: Vec<f64> = (0..20).map(|i| (i * i) as f64 * 0.3).collect();
        let mut b = batch_with(&rebufs);
        let cfg = CvarConfig::default();
        let before: Vec<f64> = b.transitions.iter().map(|t| t.reward).collect();
        let xi = shape_terminal_rewards(&mut b, &cfg, &rebufs).unwrap().unwrap();
        let pen: f64 = b.transitions.iter().zip(&before).map(|(t, r)| r - t.reward).sum::<f64>() / 20.0;
        let (_, cvar) = empirical_cvar(&rebufs, cfg.alpha).unwrap();
        assert!((pen - cfg.penalty_weight * (cvar - xi)).abs() < 1e-9);
    }

    #[test]
    fn gae_degenerate_and_hand_unrolled() {
        let (a, r) = gae_advantages(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], &[false, false, true], 9.0, 0.0, 0.0);
        assert_eq!(a, vec![0.5, 1.5, 2.5]);
        assert_eq!(r, vec![1.0, 2.0, 3.0]);

        // constant reward 1, gamma 0.5, perfect values for an endless stream: V = 2
        let (a, _) = gae_advantages(&[1.0; 4], &[2.0; 4], &[false; 4], 2.0, 0.5, 0.9);
        assert!(a.iter().all(|x| x.abs() < 1e-12));

        let (g, l) = (0.9, 0.8);
        let rw = [1.0, -2.0, 3.0];
        let v = [0.5, 1.0, -0.5];
        let d2 = rw[2] - v[2];
        let d1 = rw[1] + g * v[2] - v[1];
        let d0 = rw[0] + g * v[1] - v[0];
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (a, _) = gae_advantages(&rw, &v, &[false, false, true], 7.0, g, l);
        for (x, y) in a.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-12);
        }
        // open segment bootstraps from the supplied value
        let (a, _) = gae_advantages(&[1.0], &[0.0], &[false], 4.0, 0.5, 1.0);
        assert_eq!(a, vec![3.0]);
    }

    #[test]
    fn clip_arithmetic() {
        assert!((clipped_surrogate(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    fn small_net(seed: u64) -> PolicyNet {
        PolicyNet::init(
            NetShape {
                input: 4,
                hidden: [8, 8],
                actions: 6,
            },
            seed,
        )
    }

    #[test]
    fn identical_params_give_unit_ratio() {
        let net = small_net(1);
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1, 0.2, -0.3, 1.0]).collect();
        let advs = [0.5, -1.0, 2.0, 0.0, 1.5];
        let samples: Vec<PpoSample<'_>> = xs
            .iter()
            .zip(advs)
            .enumerate()
            .map(|(i, (x, a))| {
                let f = net.forward(x).unwrap();
                PpoSample {
                    features: x,
                    action: i % 6,
                    old_log_prob: f.log_prob(i % 6),
                    advantage: a,
                    value_target: f.value,
                }
            })
            .collect();
        let (eval, _) = minibatch_loss(&net, &samples, 0.2, 0.5).unwrap();
        assert!((eval.mean_ratio - 1.0).abs() < 1e-12);
        assert!((eval.surrogate - advs.iter().sum::<f64>() / 5.0).abs() < 1e-12);
        assert_eq!(eval.value_loss, 0.0);
    }

    #[test]
    fn zero_advantage_and_exact_values_leave_params() {
        let mut net = small_net(2);
        let before = net.clone();
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0, 1.0, -1.0]).collect();
        let samples: Vec<PpoSample<'_>> = xs
            .iter()
            .map(|x| {
                let f = net.forward(x).unwrap();
                PpoSample {
                    features: x,
                    action: 1,
                    old_log_prob: f.log_prob(1),
                    advantage: 0.0,
                    value_target: f.value,
                }
            })
            .collect();
        let cfg = PpoConfig {
            minibatch_size: 4,
            epochs: 3,
            ..PpoConfig::default()
        };
        let mut opt = Adam::new(net.num_params(), 3e-4).with_clip(0.5);
        ppo_update(&mut net, &mut opt, &samples, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn running_std_matches_batch_variance() {
        let mut rs = RunningStd {
            mean: 0.0,
            var: 0.0,
            count: 0.0,
        };
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sin() * 7.0 + 3.0).collect();
        rs.update(&xs[..20]);
        rs.update(&xs[20..]);
        let m = xs.iter().sum::<f64>() / 50.0;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 50.0;
        assert!((rs.mean - m).abs() < 1e-12);
        assert!((rs.var - v).abs() < 1e-9);
    }

    fn tiny_run(total: usize, lambda: f64, resume: Option<TrainerState>, net: PolicyNet) -> (PolicyNet, TrainerState, FinetuneReport) {
        let spec = VideoSpec::standard();
        let traces: Vec<ThroughputTrace> = (0..3)
            .map(|i| ThroughputTrace::new(format!("t{i}"), 0.0, vec![10e6 + 15e6 * i as f64; 2000], vec![]).unwrap())
            .collect();
        let ppo = PpoConfig {
            n_steps: 64,
            n_envs: 2,
            minibatch_size: 32,
            epochs: 2,
            total_steps: total,
            seed: 3,
            ..PpoConfig::default()
        };
        let cvar = CvarConfig {
            penalty_weight: lambda,
            ..CvarConfig::default()
        };
        finetune(net, &traces, &spec, &QoeWeights::default(), &ppo, &cvar, resume).unwrap()
    }

    fn spec_net() -> PolicyNet {
        PolicyNet::init(NetShape::for_spec(&VideoSpec::standard(), [16, 16]), 4)
    }

    #[test]
    fn finetune_is_deterministic_and_resumable() {
        let (a, sa, ra) = tiny_run(256, 20.0, None, spec_net());
        let (b, sb, rb) = tiny_run(256, 20.0, None, spec_net());
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(sa.steps_done, 256);
        assert_eq!(ra.curve.len(), 2);
        assert!(ra.curve.iter().all(|p| p.episodes >= 1));
        assert_ne!(a, spec_net());

        let (_, sc, rc) = tiny_run(384, 20.0, Some(sa), a);
        assert_eq!(sc.steps_done, 384);
        assert_eq!(rc.curve.len(), 1);
        assert_eq!(rc.curve[0].update, 3);
    }
}
