//! Behavior-cloning pretraining with dataset aggregation (DAgger).
//!
//! Each round the learner streams sessions with its own sampled actions, every
//! visited state is labeled by the expert, the labels join an append-only
//! dataset, and the net is refit on the whole dataset.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_batch, featurize, greedy_action, optimizer_step, sample_action, Adam, NetShape, PolicyNet};
use crate::sim::{Observation, PlayerState, PurePolicy, QoeWeights, SessionEnv, VideoSpec};
use crate::trace::ThroughputTrace;

/// Probability floor inside the log of the imitation loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Append-only (features, expert rung) records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImitationDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl ImitationDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, features: Vec<f64>, label: usize) {
        self.features.push(features);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub dagger_iterations: usize,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: [usize; 2],
    pub expert_horizon: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            dagger_iterations: 15,
            rollout_steps: 2000,
            epochs: 5,
            batch_size: 128,
            learning_rate: 1e-3,
            hidden: [64, 64],
            expert_horizon: 5,
            seed: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_steps == 0 || self.epochs == 0 || self.batch_size == 0 || self.expert_horizon == 0 {
            return Err(Error::validation("bc rollout_steps, epochs, batch_size and expert_horizon must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("bc learning_rate must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// Mean loss and its parameter gradient over a batch.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Samples whose expert-action probability fell below [`LOG_CLAMP`].
    pub clamped: usize,
}

/// Mean of `-log pi(a_E | s)` over the batch, with its gradient.
pub fn imitation_loss(net: &PolicyNet, batch: &[(&[f64], usize)]) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::validation("imitation loss on an empty batch"));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut items = Vec::with_capacity(batch.len());
    for &(x, label) in batch {
        let fwd = net.forward(x)?;
        if label >= fwd.probs.len() {
            return Err(Error::validation(format!("expert rung {label} outside ladder")));
        }
        let p = fwd.probs[label];
        if p < LOG_CLAMP {
            clamped += 1;
            loss -= LOG_CLAMP.ln();
        } else {
            loss -= p.ln();
        }
        let mut d = fwd.probs.clone();
        d[label] -= 1.0;
        d.iter_mut().for_each(|g| *g /= n);
        items.push((fwd, d, 0.0));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("imitation loss"));
    }
    let grad = backward_batch(net, &items)?;
    Ok(LossEval {
        loss: loss / n,
        grad,
        clamped,
    })
}

const EVAL_CHUNK: usize = 1024;

/// Mean imitation loss and greedy agreement over the whole dataset.
///
/// Parallel over fixed-size chunks, reduced in order, so results do not depend
/// on the thread count.
pub fn dataset_fit(net: &PolicyNet, data: &ImitationDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::validation("empty imitation dataset"));
    }
    let parts: Vec<Result<(f64, usize)>> = data
        .features
        .par_chunks(EVAL_CHUNK)
        .zip(data.labels.par_chunks(EVAL_CHUNK))
        .map(|(xs, ys)| {
            let mut loss = 0.0;
            let mut hits = 0;
            for (x, &y) in xs.iter().zip(ys) {
                let fwd = net.forward(x)?;
                loss -= fwd.probs[y].max(LOG_CLAMP).ln();
                hits += usize::from(greedy_action(&fwd.probs) == y);
            }
            Ok((loss, hits))
        })
        .collect();
    let (mut loss, mut hits) = (0.0, 0);
    for part in parts {
        let (l, h) = part?;
        loss += l;
        hits += h;
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Per-round training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub new_records: usize,
    pub dataset_size: usize,
    /// Dataset loss after each epoch of this round.
    pub epoch_losses: Vec<f64>,
    pub loss: f64,
    pub agreement: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub rounds: Vec<RoundStats>,
}

impl BcReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,dataset_size,loss,agreement\n");
        for r in &self.rounds {
            let _ = writeln!(out, "{},{},{},{}", r.round, r.dataset_size, r.loss, r.agreement);
        }
        out
    }
}

/// Streams learner-driven sessions for `steps` chunk decisions and returns the
/// visited (features, state, trace index, time) tuples. The state of a chunk
/// that ran off the end of its trace is dropped.
fn collect_visits(
    net: &PolicyNet,
    traces: &[ThroughputTrace],
    spec: &VideoSpec,
    weights: &QoeWeights,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, PlayerState, usize, f64)>> {
    let mut visits = Vec::with_capacity(steps);
    let mut taken = 0;
    while taken < steps {
        let ti = rng.random_range(0..traces.len());
        let mut env = SessionEnv::new(&traces[ti], spec, *weights);
        while !env.is_done() && taken < steps {
            let x = featurize(env.state(), spec);
            let fwd = net.forward(&x)?;
            let a = sample_action(&fwd.probs, rng);
            let visit = (x, env.state().clone(), ti, env.now_s());
            taken += 1;
            if !env.step(a).truncated {
                visits.push(visit);
            }
        }
    }
    Ok(visits)
}

/// One DAgger round: learner rollouts, expert labels, aggregate, refit.
#[allow(clippy::too_many_arguments)]
pub fn dagger_round(
    net: &mut PolicyNet,
    opt: &mut Adam,
    expert: &dyn PurePolicy,
    traces: &[ThroughputTrace],
    spec: &VideoSpec,
    weights: &QoeWeights,
    dataset: &mut ImitationDataset,
    cfg: &BcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RoundStats> {
    if traces.is_empty() {
        return Err(Error::validation("dagger round needs at least one training trace"));
    }
    let visits = collect_visits(net, traces, spec, weights, cfg.rollout_steps, rng)?;
    let labels: Vec<usize> = visits
        .par_iter()
        .map(|(_, state, ti, now)| {
            expert.select(&Observation {
                state,
                spec,
                weights,
                trace: &traces[*ti],
                now_s: *now,
            })
        })
        .collect();
    let new_records = visits.len();
    for ((x, ..), a) in visits.into_iter().zip(labels) {
        dataset.push(x, a);
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut clamped = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = idx.iter().map(|&i| (dataset.features[i].as_slice(), dataset.labels[i])).collect();
            let eval = imitation_loss(net, &batch)?;
            clamped += eval.clamped;
            optimizer_step(opt, net, &eval.grad)?;
        }
        epoch_losses.push(dataset_fit(net, dataset)?.0);
    }
    let (loss, agreement) = dataset_fit(net, dataset)?;
    Ok(RoundStats {
        round: 0,
        new_records,
        dataset_size: dataset.len(),
        epoch_losses,
        loss,
        agreement,
        clamped,
    })
}

/// Full pretraining run from a freshly initialized net.
pub fn pretrain(
    cfg: &BcConfig,
    expert: &dyn PurePolicy,
    traces: &[ThroughputTrace],
    spec: &VideoSpec,
    weights: &QoeWeights,
) -> Result<(PolicyNet, BcReport)> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(Error::validation("pretraining needs a nonempty training split"));
    }
    let shape = NetShape::for_spec(spec, cfg.hidden);
    let mut net = PolicyNet::init(shape, cfg.seed);
    let mut opt = Adam::new(net.num_params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbc00_0000);
    let mut dataset = ImitationDataset::new();
    let mut report = BcReport::default();
    for round in 0..cfg.dagger_iterations {
        let mut stats = dagger_round(&mut net, &mut opt, expert, traces, spec, weights, &mut dataset, cfg, &mut rng)?;
        stats.round = round + 1;
        report.rounds.push(stats);
    }
    Ok((net, report))
}
