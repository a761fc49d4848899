//! Feed-forward stochastic policy with a value head.
//!
//! Two tanh hidden layers form a shared trunk; a linear policy head produces
//! one logit per ladder rung and a linear value head a scalar. Gradients are
//! computed by hand: callers supply the loss gradient with respect to the
//! logits and the value, and [`PolicyNet::backward`] propagates it to every
//! parameter. Parameters live in one flat vector so the optimizer and the
//! checkpoint format never need to know the layer structure.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{AbrPolicy, Observation, PlayerState, PurePolicy, VideoSpec};

/// Throughput normalizer (bps); above the ladder top so features stay near [0, 1.5].
pub const THROUGHPUT_SCALE_BPS: f64 = 200e6;

/// Input dimension for a spec: buffer, last rate, history, remaining, sizes.
pub fn feature_dim(spec: &VideoSpec) -> usize {
    spec.history_len + spec.ladder.len() + 3
}

/// Normalized policy input.
///
/// Layout: `[b/B_max, r_prev/r_max, hist_1..hist_k (oldest first, zero-padded
/// at the front), remaining/T, size_1..size_L]`. Sizes are scaled by the
/// nominal top-rung chunk size.
pub fn featurize(state: &PlayerState, spec: &VideoSpec) -> Vec<f64> {
    let k = spec.history_len;
    let mut x = Vec::with_capacity(feature_dim(spec));
    x.push(state.buffer_s / spec.buffer_max_s);
    x.push(spec.ladder.kbps(state.prev_rung) / spec.ladder.kbps(spec.ladder.top()));
    let hist = &state.throughput_history[state.throughput_history.len().saturating_sub(k)..];
    x.extend(std::iter::repeat_n(0.0, k - hist.len()));
    x.extend(hist.iter().map(|v| v / THROUGHPUT_SCALE_BPS));
    x.push(state.remaining_chunks as f64 / spec.num_chunks as f64);
    let scale = spec.nominal_top_size_bytes();
    x.extend(state.next_chunk_sizes.iter().map(|s| s / scale));
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: [usize; 2],
    pub actions: usize,
}

impl NetShape {
    pub fn for_spec(spec: &VideoSpec, hidden: [usize; 2]) -> Self {
        Self {
            input: feature_dim(spec),
            hidden,
            actions: spec.ladder.len(),
        }
    }

    fn offsets(&self) -> Offsets {
        let [h1, h2] = self.hidden;
        let w1 = 0;
        let b1 = w1 + h1 * self.input;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let wp = b2 + h2;
        let bp = wp + self.actions * h2;
        let wv = bp + self.actions;
        let bv = wv + h2;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            wp,
            bp,
            wv,
            bv,
            total: bv + 1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.offsets().total
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
    total: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl Forward {
    /// Numerically stable `log pi(a|s)`.
    pub fn log_prob(&self, action: usize) -> f64 {
        self.logits[action] - log_sum_exp(&self.logits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    shape: NetShape,
    params: Vec<f64>,
}

impl PolicyNet {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.num_params()],
        }
    }

    /// Glorot-uniform trunk, near-zero policy head (almost uniform start),
    /// unit-scale value head, zero biases.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let mut net = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = shape.offsets();
        let [h1, h2] = shape.hidden;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, gain: f64| {
            let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[range] {
                *p = rng.random_range(-a..a);
            }
        };
        fill(o.w1..o.b1, shape.input, h1, 1.0);
        fill(o.w2..o.b2, h1, h2, 1.0);
        fill(o.wp..o.bp, h2, shape.actions, 0.01);
        fill(o.wv..o.bv, h2, 1, 1.0);
        net
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.num_params() {
            return Err(Error::Shape {
                expected: shape.num_params(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Sets the policy-head bias directly; the remaining head weights are zeroed.
    pub fn set_policy_logits_bias(&mut self, bias: &[f64]) {
        let o = self.shape.offsets();
        self.params[o.wp..o.bp].iter_mut().for_each(|p| *p = 0.0);
        self.params[o.bp..o.wv].copy_from_slice(bias);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let s = self.shape;
        if x.len() != s.input {
            return Err(Error::Shape {
                expected: s.input,
                got: x.len(),
            });
        }
        let o = s.offsets();
        let p = &self.params;
        let [n1, n2] = s.hidden;
        let h1 = dense_tanh(&p[o.w1..o.b1], &p[o.b1..o.w2], x, n1);
        let h2 = dense_tanh(&p[o.w2..o.b2], &p[o.b2..o.wp], &h1, n2);
        let mut logits = Vec::with_capacity(s.actions);
        for a in 0..s.actions {
            let row = &p[o.wp + a * n2..o.wp + (a + 1) * n2];
            logits.push(p[o.bp + a] + dot(row, &h2));
        }
        let value = p[o.bv] + dot(&p[o.wv..o.bv], &h2);
        let probs = softmax(&logits);
        Ok(Forward {
            input: x.to_vec(),
            h1,
            h2,
            logits,
            probs,
            value,
        })
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose gradient
    /// with respect to this sample's logits is `d_logits` and with respect to
    /// its value is `d_value`.
    pub fn backward(&self, fwd: &Forward, d_logits: &[f64], d_value: f64, grad: &mut [f64]) {
        let s = self.shape;
        let o = s.offsets();
        let p = &self.params;
        let [n1, n2] = s.hidden;
        debug_assert_eq!(grad.len(), p.len());
        debug_assert_eq!(d_logits.len(), s.actions);

        let mut d_h2 = vec![0.0; n2];
        for (a, &g) in d_logits.iter().enumerate() {
            grad[o.bp + a] += g;
            if g == 0.0 {
                continue;
            }
            let row = o.wp + a * n2;
            for j in 0..n2 {
                grad[row + j] += g * fwd.h2[j];
                d_h2[j] += g * p[row + j];
            }
        }
        grad[o.bv] += d_value;
        if d_value != 0.0 {
            for j in 0..n2 {
                grad[o.wv + j] += d_value * fwd.h2[j];
                d_h2[j] += d_value * p[o.wv + j];
            }
        }

        let d_z2: Vec<f64> = d_h2.iter().zip(&fwd.h2).map(|(g, h)| g * (1.0 - h * h)).collect();
        let mut d_h1 = vec![0.0; n1];
        for (j, &g) in d_z2.iter().enumerate() {
            grad[o.b2 + j] += g;
            let row = o.w2 + j * n1;
            for i in 0..n1 {
                grad[row + i] += g * fwd.h1[i];
                d_h1[i] += g * p[row + i];
            }
        }
        for (i, (&g, &h)) in d_h1.iter().zip(&fwd.h1).enumerate() {
            let dz = g * (1.0 - h * h);
            grad[o.b1 + i] += dz;
            let row = o.w1 + i * s.input;
            for (gk, xk) in grad[row..row + s.input].iter_mut().zip(&fwd.input) {
                *gk += dz * xk;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out).map(|j| (b[j] + dot(&w[j * n..(j + 1) * n], x)).tanh()).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradient of `-log softmax(logits)[target]` with respect to the logits.
pub fn cross_entropy_grad(probs: &[f64], target: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[target] -= 1.0;
    g
}

/// Inverse-CDF draw from `probs` using one uniform variate.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (a, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return a;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Argmax with ties to the lower index.
pub fn greedy_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (a, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = a;
        }
    }
    best
}

/// Sums per-sample gradients (no averaging) over a batch.
pub fn backward_batch(net: &PolicyNet, batch: &[(Forward, Vec<f64>, f64)]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::validation("backward on an empty batch"));
    }
    let mut grad = vec![0.0; net.num_params()];
    for (fwd, d_logits, d_value) in batch {
        if !d_value.is_finite() || d_logits.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("loss gradient"));
        }
        net.backward(fwd, d_logits, *d_value, &mut grad);
    }
    Ok(grad)
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Adaptive-moment optimizer with bias correction and global-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    pub steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            steps: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn with_clip(mut self, max_grad_norm: f64) -> Self {
        self.max_grad_norm = Some(max_grad_norm);
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// One update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                got: grad.len().min(params.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let mut g = grad.to_vec();
        let norm = match self.max_grad_norm {
            Some(max) => clip_grad_norm(&mut g, max),
            None => g.iter().map(|x| x * x).sum::<f64>().sqrt(),
        };
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(norm)
    }
}

/// Applies one optimizer update to the network's parameters.
pub fn optimizer_step(opt: &mut Adam, net: &mut PolicyNet, grad: &[f64]) -> Result<f64> {
    opt.step(net.params_mut(), grad)
}

/// Evaluation-time policy: argmax of the network's distribution.
#[derive(Debug, Clone, Copy)]
pub struct GreedyNet<'a>(pub &'a PolicyNet);

impl PurePolicy for GreedyNet<'_> {
    fn select(&self, obs: &Observation<'_>) -> usize {
        let x = featurize(obs.state, obs.spec);
        let fwd = self.0.forward(&x).expect("feature dimension matches network");
        greedy_action(&fwd.probs)
    }
}

/// Training-time policy: samples from the network's distribution.
#[derive(Debug, Clone)]
pub struct SampledNet<'a> {
    pub net: &'a PolicyNet,
    pub rng: ChaCha8Rng,
}

impl AbrPolicy for SampledNet<'_> {
    fn choose(&mut self, obs: &Observation<'_>) -> usize {
        let x = featurize(obs.state, obs.spec);
        let fwd = self.net.forward(&x).expect("feature dimension matches network");
        sample_action(&fwd.probs, &mut self.rng)
    }
}

pub const CHECKPOINT_FORMAT: &str = "riskabr-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized policy: versioned header, shape manifest, flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: NetShape,
    /// Stage that produced it, e.g. `pretrain` or `finetune`.
    pub stage: String,
    /// Environment steps consumed by fine-tuning so far.
    #[serde(default)]
    pub steps_done: u64,
    /// Content hash of the checkpoint this one was derived from.
    #[serde(default)]
    pub parent_sha256: Option<String>,
    /// Optimizer and schedule state for resuming fine-tuning.
    #[serde(default)]
    pub trainer: Option<crate::ppo::TrainerState>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: &PolicyNet, stage: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            shape: net.shape(),
            stage: stage.into(),
            steps_done: 0,
            parent_sha256: None,
            trainer: None,
            params: net.params().to_vec(),
        }
    }

    pub fn net(&self) -> Result<PolicyNet> {
        PolicyNet::from_params(self.shape, self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.params.len() != ck.shape.num_params() {
            return Err(Error::Shape {
                expected: ck.shape.num_params(),
                got: ck.params.len(),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
