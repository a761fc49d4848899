//! Test-side oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskabr_core::nn::{backward_batch, NetShape, PolicyNet};
use riskabr_core::ThroughputTrace;

/// Policy cross-entropy plus weighted value regression, written directly
/// from log-sum-exp so it shares no code with the library's backward pass.
pub fn reference_loss(net: &PolicyNet, batch: &[(Vec<f64>, usize, f64)], value_w: f64) -> f64 {
    batch
        .iter()
        .map(|(x, a, y)| {
            let f = net.forward(x).unwrap();
            let m = f.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + f.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            (lse - f.logits[*a]) + value_w * (f.value - y).powi(2)
        })
        .sum()
}

pub fn analytic_grad(net: &PolicyNet, batch: &[(Vec<f64>, usize, f64)], value_w: f64) -> Vec<f64> {
    let items: Vec<_> = batch
        .iter()
        .map(|(x, a, y)| {
            let f = net.forward(x).unwrap();
            let mut d = f.probs.clone();
            d[*a] -= 1.0;
            let dv = 2.0 * value_w * (f.value - y);
            (f, d, dv)
        })
        .collect();
    backward_batch(net, &items).unwrap()
}

/// Max relative error between the analytic gradient and a five-point
/// central difference over every parameter.
///
/// The two-point stencil at step 1e-5 has a roundoff floor near 1e-10 for
/// losses of order 10, which swamps coordinates whose true gradient is below
/// 1e-6. The five-point stencil at step 1e-3 has truncation error O(h^4) and
/// a roundoff floor about 100x lower.
pub fn gradient_check(net: &PolicyNet, batch: &[(Vec<f64>, usize, f64)]) -> f64 {
    const H: f64 = 1e-3;
    let g = analytic_grad(net, batch, 0.5);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.num_params() {
        let p0 = probe.params()[i];
        let mut at = |k: f64| {
            probe.params_mut()[i] = p0 + k * H;
            reference_loss(&probe, batch, 0.5)
        };
        let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * H);
        probe.params_mut()[i] = p0;
        // absolute floor keeps exactly-zero coordinates from dividing by zero
        let rel = (g[i] - fd).abs() / (g[i].abs() + fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

/// Random net of the given shape with perturbed biases and a random batch.
pub fn random_problem(shape: NetShape, batch: usize, seed: u64) -> (PolicyNet, Vec<(Vec<f64>, usize, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PolicyNet::init(shape, seed);
    for p in net.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let data = (0..batch)
        .map(|_| {
            let x: Vec<f64> = (0..shape.input).map(|_| rng.random_range(-1.5..1.5)).collect();
            (x, rng.random_range(0..shape.actions), rng.random_range(-2.0..2.0))
        })
        .collect();
    (net, data)
}

/// Piecewise-constant trace with i.i.d. levels, one per `dwell` seconds.
pub fn random_trace(id: &str, len: usize, low_bps: f64, high_bps: f64, dwell: usize, seed: u64) -> ThroughputTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = rng.random_range(low_bps..high_bps);
    let rates = (0..len)
        .map(|i| {
            if i % dwell.max(1) == 0 {
                level = rng.random_range(low_bps..high_bps);
            }
            level
        })
        .collect();
    ThroughputTrace::new(id, 0.0, rates, vec![]).unwrap()
}

/// Mean of the `k` largest values, by full sort.
pub fn brute_worst_mean(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[..k].iter().sum::<f64>() / k as f64
}
