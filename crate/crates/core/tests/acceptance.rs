//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskabr_core::audit::{audit_action, decision_violation, feasible_set, AuditConfig, RungSet, RuntimeAuditor};
use riskabr_core::capacity::{calibrate_lower_bound, miss_rate, prediction_windows, CapacityPredictor, DecisionReport};
use riskabr_core::classic::{MpcConfig, RobustMpc};
use riskabr_core::config::{splitmix, ExperimentConfig};
use riskabr_core::metrics::{audit_rate, mean_metrics, severe_ratio, worst_tail_rebuf};
use riskabr_core::nn::{softmax, NetShape};
use riskabr_core::pipeline::{self, synthesize_set};
use riskabr_core::ppo::{clipped_surrogate, empirical_cvar, gae_advantages, shape_terminal_rewards, CvarConfig, EpisodeEnd, RolloutBatch, Transition};
use riskabr_core::sim::{
    advance_buffer, chunk_qoe, chunk_size, download_chunk, rebuffer_time, run_session, ChunkOutcome, FixedRung, PurePolicy,
};
use riskabr_core::trace::SynthConfig;
use riskabr_core::{ActionAuditor, Observation, QoeWeights, SessionEnv, SessionLog, ThroughputTrace, VideoSpec};

use common::{brute_worst_mean, gradient_check, random_problem, random_trace};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Collects named numeric checks at a shared tolerance.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn close(&mut self, name: &str, got: f64, want: f64) {
        self.count += 1;
        if !((got - want).abs() <= 1e-9 * want.abs().max(1.0)) {
            self.failed.push(format!("{name}: got {got}, want {want}"));
        }
    }

    fn truth(&mut self, name: &str, ok: bool) {
        self.count += 1;
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn flat_spec() -> VideoSpec {
    VideoSpec {
        size_jitter: vec![1.0; 48],
        ..VideoSpec::standard()
    }
}

fn constant(id: &str, bps: f64, len: usize) -> ThroughputTrace {
    ThroughputTrace::new(id, 0.0, vec![bps; len], vec![]).unwrap()
}

fn session_log(rebufs: &[f64]) -> Vec<SessionLog> {
    rebufs
        .iter()
        .map(|&r| SessionLog {
            trace_id: "x".into(),
            outcomes: vec![],
            session_qoe: 0.0,
            session_rebuf: r,
            truncated: false,
        })
        .collect()
}

fn c1_equations() -> Verdict {
    let start = Instant::now();
    let mut c = Checks::default();
    let spec = flat_spec();
    let w = QoeWeights::default();

    // chunk sizes and stepwise download time
    c.close("size 30 Mbps", chunk_size(&spec, 0, 3), 15e6);
    c.close("size 3 Mbps", chunk_size(&spec, 0, 0), 1.5e6);
    let d = download_chunk(&constant("c", 120e6, 10), 0.0, 30e6).unwrap();
    c.close("d at 120 Mbps", d.time_s, 2.0);
    c.close("c at 120 Mbps", d.throughput_bps, 120e6);
    let step = ThroughputTrace::new("s", 0.0, vec![10e6, 30e6, 30e6], vec![]).unwrap();
    let d = download_chunk(&step, 0.0, 2.5e6).unwrap();
    c.close("d stepwise", d.time_s, 1.0 + 1.0 / 3.0);
    c.close("c stepwise", d.throughput_bps, 8.0 * 2.5e6 / (4.0 / 3.0));
    c.truth("size 0 rejected", download_chunk(&step, 0.0, 0.0).is_err());

    // rebuffer and buffer recurrences
    c.close("rho(2,10)", rebuffer_time(2.0, 10.0), 0.0);
    c.close("rho(5,3)", rebuffer_time(5.0, 3.0), 2.0);
    c.close("rho(4,4)", rebuffer_time(4.0, 4.0), 0.0);
    c.close("b(3,5)", advance_buffer(3.0, 5.0, 4.0, 60.0), 4.0);
    c.close("b(59,1)", advance_buffer(59.0, 1.0, 4.0, 60.0), 60.0);
    c.close("b(10,2)", advance_buffer(10.0, 2.0, 4.0, 60.0), 12.0);

    // chunk QoE
    c.close("q switch+stall", chunk_qoe(60000.0, 30000.0, 0.5, &w), 10.0);
    c.close("q plain", chunk_qoe(3000.0, 3000.0, 0.0, &w), 3.0);
    c.close("q stall", chunk_qoe(120000.0, 120000.0, 1.0, &w), 80.0);
    let log = run_session(&constant("hi", 1e9, 2000), &spec, &w, &mut FixedRung(0), None);
    c.close("session R", log.session_rebuf, 0.0);
    c.close("session Q", log.session_qoe, 48.0 * 3.0);

    // feasible set, violation, projection
    let sizes = spec.chunk_sizes(0);
    let cfg = |m, g| AuditConfig { guard_s: g, margin: m, enabled: true };
    c.truth("F at b=10 g=2", feasible_set(10.0, &sizes, 30e6, &cfg(1.0, 2.0)) == (0..=4).collect());
    c.truth("F empty at b=g", feasible_set(2.0, &sizes, 30e6, &cfg(1.0, 2.0)).is_empty());
    c.truth("F at m=0.5", feasible_set(10.0, &sizes, 30e6, &cfg(0.5, 2.0)) == (0..=3).collect());
    c.truth("violation at 20 Mbps", decision_violation(15e6, 20e6, 7.0, 2.0));
    c.truth("no violation at 40 Mbps", !decision_violation(15e6, 40e6, 7.0, 2.0));
    c.truth("violation when b <= g", decision_violation(1.0, 1e12, 2.0, 2.0));
    let f: RungSet = (0..=4).collect();
    let p = audit_action(5, f);
    c.truth("project 5 -> 4", p.safe_rung == 4 && p.intervened);
    let p = audit_action(2, f);
    c.truth("keep 2", p.safe_rung == 2 && !p.intervened);
    let p = audit_action(3, RungSet::EMPTY);
    c.truth("fallback 3 -> 0", p.safe_rung == 0 && p.intervened && p.fallback);
    let p = audit_action(0, RungSet::EMPTY);
    c.truth("fallback 0 unmarked", p.safe_rung == 0 && !p.intervened);

    // VaR / CVaR and terminal shaping
    let mut v = vec![0.0; 8];
    v.extend([10.0, 20.0]);
    let (xi, cv) = empirical_cvar(&v, 0.9).unwrap();
    c.close("xi", xi, 10.0);
    c.close("cvar", cv, 20.0);
    let (xi, cv) = empirical_cvar(&[1.0, 2.0, 3.0, 4.0], 0.75).unwrap();
    c.close("xi 0.75", xi, 3.0);
    c.close("cvar 0.75", cv, 4.0);
    let mut batch = RolloutBatch {
        transitions: vec![Transition {
            features: vec![],
            action: 0,
            log_prob: 0.0,
            value: 0.0,
            reward: 0.0,
            reward_scale: 1.0,
            done: true,
        }],
        segments: vec![],
        episodes: vec![EpisodeEnd { terminal: 0, rebuffer_s: 20.0, qoe: 0.0, truncated: false }],
    };
    let cvar_cfg = CvarConfig { alpha: 0.9, penalty_weight: 20.0, ..CvarConfig::default() };
    shape_terminal_rewards(&mut batch, &cvar_cfg, &[10.0; 10]).unwrap();
    c.close("tail penalty", batch.transitions[0].reward, -2000.0);

    // GAE unrolled by hand: gamma 0.9, lambda 0.8
    let (adv, _) = gae_advantages(&[1.0, 2.0, 3.0], &[0.5, 1.0, 1.5], &[false, false, true], 7.0, 0.9, 0.8);
    let d2 = 3.0 - 1.5;
    let d1 = 2.0 + 0.9 * 1.5 - 1.0;
    let d0 = 1.0 + 0.9 * 1.0 - 0.5;
    c.close("gae 2", adv[2], d2);
    c.close("gae 1", adv[1], d1 + 0.72 * d2);
    c.close("gae 0", adv[0], d0 + 0.72 * (d1 + 0.72 * d2));
    c.close("clip", clipped_surrogate(1.5, 2.0, 0.2), 2.4);
    c.close("softmax", softmax(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])[0], std::f64::consts::E / (std::f64::consts::E + 5.0));

    // fleet metrics
    let mut r = vec![0.0; 19];
    r.push(30.0);
    c.close("worst5 n=20", worst_tail_rebuf(&session_log(&r), 0.05).unwrap().1, 30.0);
    let mut r = vec![1.0; 38];
    r.extend([30.0, 10.0]);
    c.close("worst5 n=40", worst_tail_rebuf(&session_log(&r), 0.05).unwrap().1, 20.0);
    c.truth("K at n=79", worst_tail_rebuf(&session_log(&[0.0; 79]), 0.05).unwrap().0 == 4);
    c.close("severe strict", severe_ratio(&session_log(&[10.0]), 10.0).unwrap(), 0.0);
    c.close("severe half", severe_ratio(&session_log(&[0.0, 5.0, 11.0, 20.0]), 10.0).unwrap(), 0.5);
    let mut two = session_log(&[0.0, 0.0]);
    two[1].session_qoe = 200.0;
    c.close("mean Q", mean_metrics(&two).unwrap().0, 100.0);
    let mut audited = session_log(&[0.0]);
    audited[0].outcomes = (0..48)
        .map(|i| ChunkOutcome {
            audited: i < 3,
            ..log.outcomes[i].clone()
        })
        .collect();
    c.close("audit rate", audit_rate(&audited), 3.0 / 48.0);

    let elapsed = start.elapsed();
    let pass = c.failed.is_empty() && elapsed < Duration::from_secs(1);
    verdict(pass, format!("{} checks, {} failed {:?}, {:.0?}", c.count, c.failed.len(), c.failed, elapsed))
}

fn c2_cvar_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 10 * rng.random_range(1..=40);
        let k = rng.random_range(1..=n / 2);
        let alpha = 1.0 - k as f64 / n as f64;
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..60.0)).collect();
        let (_, cvar) = empirical_cvar(&values, alpha).unwrap();
        let brute = brute_worst_mean(&values, k);
        worst = worst.max((cvar - brute).abs() / brute.abs().max(1.0));
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("1000 batches, max rel diff {worst:.2e}, {elapsed:.0?}"),
    )
}

fn c3_simulator_properties() -> Verdict {
    let start = Instant::now();
    let spec = VideoSpec::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0usize;
    let mut chunks = 0usize;
    for ep in 0..10_000u64 {
        let w = QoeWeights {
            rebuf_penalty: rng.random_range(0.0..80.0),
            smooth_penalty: rng.random_range(0.0..2.0),
        };
        // short traces exercise trace truncation
        let len = rng.random_range(20..400);
        let low = rng.random_range(0.5e6..30e6);
        let trace = random_trace("p", len, low, low + rng.random_range(1e6..200e6), rng.random_range(1..20), ep);
        let mut env = SessionEnv::new(&trace, &spec, w);
        while !env.is_done() {
            env.step(rng.random_range(0..spec.ladder.len()));
        }
        let log = env.into_log();
        let (mut q, mut r) = (0.0, 0.0);
        let mut prev = spec.initial_prev_rung;
        for o in &log.outcomes {
            chunks += 1;
            let ok = o.buffer_after_s >= 0.0
                && o.buffer_after_s <= spec.buffer_max_s
                && o.rebuffer_s == (o.download_time_s - o.buffer_before_s).max(0.0)
                && o.buffer_after_s
                    == ((o.buffer_before_s - o.download_time_s).max(0.0) + spec.chunk_duration_s).min(spec.buffer_max_s)
                && o.qoe == chunk_qoe(spec.ladder.kbps(o.rung), spec.ladder.kbps(prev), o.rebuffer_s, &w);
            violations += usize::from(!ok);
            prev = o.rung;
            q += o.qoe;
            r += o.rebuffer_s;
        }
        let sums_ok = (log.session_qoe - q).abs() <= 1e-9 * q.abs().max(1.0)
            && (log.session_rebuf - r).abs() <= 1e-9 * r.max(1.0);
        violations += usize::from(!sums_ok);
    }
    let elapsed = start.elapsed();
    verdict(
        violations == 0 && elapsed < Duration::from_secs(120),
        format!("10000 episodes, {chunks} chunks, {violations} violations, {elapsed:.1?}"),
    )
}

/// Uniform random rung per chunk, derived from the observation so the policy stays pure.
struct HashedRandom;

impl PurePolicy for HashedRandom {
    fn select(&self, obs: &Observation<'_>) -> usize {
        let h = splitmix(obs.state.chunk_index as u64 ^ (obs.trace.mean_bps() as u64));
        (h % obs.spec.ladder.len() as u64) as usize
    }
}

fn c4_auditor_soundness() -> Verdict {
    let spec = VideoSpec::standard();
    let w = QoeWeights::default();
    let traces = synthesize_set(&SynthConfig::default(), 0xa4, "c4", 200).unwrap();
    let auditor = RuntimeAuditor::new(CapacityPredictor::oracle(), AuditConfig { guard_s: 0.0, margin: 1.0, enabled: true });
    let policies: [(&str, &dyn PurePolicy); 3] =
        [("top", &FixedRung(5)), ("robust-mpc", &RobustMpc(MpcConfig::default())), ("random", &HashedRandom)];
    let mut admitted = 0usize;
    let mut violations = 0usize;
    let mut upgrades = 0usize;
    let mut interventions = 0usize;
    for (_, policy) in policies {
        let logs = riskabr_core::sim::run_sessions(policy, Some(&auditor as &dyn ActionAuditor), &traces, &spec, &w);
        for o in logs.iter().flat_map(|l| &l.outcomes) {
            upgrades += usize::from(o.rung > o.raw_rung);
            interventions += usize::from(o.audited);
            if !o.fallback {
                admitted += 1;
                violations += usize::from(decision_violation(o.size_bytes, o.throughput_bps, o.buffer_before_s, 0.0));
            }
        }
    }
    verdict(
        violations == 0 && upgrades == 0 && admitted > 0,
        format!("3 policies x 200 sessions, {admitted} admitted, {violations} violations, {upgrades} upgrades, {interventions} interventions"),
    )
}

fn c5_gradients() -> Verdict {
    let start = Instant::now();
    let spec = VideoSpec::standard();
    let shape = NetShape::for_spec(&spec, [64, 64]);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (net, batch) = random_problem(shape, 2, 0xc5_0000 + seed);
        worst = worst.max(gradient_check(&net, &batch));
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("100 nets x {} params, max rel err {worst:.2e}, {elapsed:.1?}", shape.num_params()),
    )
}

fn c6_coverage() -> Verdict {
    let synth = SynthConfig::default();
    let cal = synthesize_set(&synth, 0xc6_0001, "cal", 60).unwrap();
    let fresh = synthesize_set(&synth, 0xc6_0002, "fresh", 60).unwrap();
    let result = calibrate_lower_bound(&cal, 0.10, 75, 15).unwrap();
    let windows = prediction_windows(&fresh, 75, 15, 15).unwrap();
    let miss = miss_rate(&windows, result.scale);
    verdict(
        windows.len() >= 1000 && (0.05..=0.15).contains(&miss),
        format!("scale {:.4} from {} windows, miss {miss:.4} on {} fresh windows", result.scale, result.n_windows, windows.len()),
    )
}

struct SeedRun {
    seed: u64,
    elapsed: Duration,
    held_out: BTreeMap<String, riskabr_core::metrics::RiskReport>,
    predictors: Vec<DecisionReport>,
}

fn run_seed(seed: u64, dir: &Path) -> riskabr_core::Result<SeedRun> {
    let cfg = ExperimentConfig {
        seed,
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    pipeline::gen_traces(&cfg)?;
    pipeline::pretrain(&cfg)?;
    pipeline::finetune(&cfg, None, false)?;
    let (predictors, _) = pipeline::calibrate(&cfg)?;
    pipeline::evaluate(&cfg)?;
    let elapsed = start.elapsed();
    pipeline::report(&cfg)?;
    let held = synthesize_set(&cfg.traces.synth, splitmix(seed ^ 0x4e1d_0u64), "held", 210)?;
    let reports = pipeline::evaluate_methods(&cfg, &["bc-only", "bc+rl", "full"], &held)?;
    Ok(SeedRun {
        seed,
        elapsed,
        held_out: reports.into_iter().map(|r| (r.method.clone(), r)).collect(),
        predictors,
    })
}

fn c7_directional(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for run in runs {
        let bc = &run.held_out["bc-only"];
        let rl = &run.held_out["bc+rl"];
        let full = &run.held_out["full"];
        let severe_cut = 1.0 - rl.severe_ratio / bc.severe_ratio;
        let qoe_loss = 1.0 - rl.mean_qoe / bc.mean_qoe;
        let tail_cut = 1.0 - full.worst5_rebuf / bc.worst5_rebuf;
        let a = bc.severe_ratio > 0.0 && severe_cut >= 0.20 && qoe_loss <= 0.05;
        let b = bc.worst5_rebuf > 0.0 && tail_cut >= 0.30;
        wins += usize::from(a && b);
        lines.push(format!(
            "seed {}: severe {:.3}->{:.3} ({:+.0}%), qoe {:.0}->{:.0} ({:+.1}%), worst5 {:.1}->{:.1} s ({:+.0}%) [{}{}]",
            run.seed,
            bc.severe_ratio,
            rl.severe_ratio,
            -100.0 * severe_cut,
            bc.mean_qoe,
            rl.mean_qoe,
            -100.0 * qoe_loss,
            bc.worst5_rebuf,
            full.worst5_rebuf,
            -100.0 * tail_cut,
            if a { "a" } else { "-" },
            if b { "b" } else { "-" },
        ));
    }
    verdict(2 * wins > runs.len(), format!("{wins}/{} seeds pass; {}", runs.len(), lines.join("; ")))
}

fn c8_predictors(runs: &[SeedRun]) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for run in runs {
        let get = |id: &str| run.predictors.iter().find(|r| r.predictor == id).unwrap();
        let (p, lb) = (get("point"), get("lower-bound"));
        ok &= lb.v_dec < p.v_dec && lb.over_rate_hr < p.over_rate_hr;
        lines.push(format!(
            "seed {}: V_dec {:.4} vs {:.4}, OverRate_HR {:.3} vs {:.3}",
            run.seed, lb.v_dec, p.v_dec, lb.over_rate_hr, p.over_rate_hr
        ));
    }
    verdict(ok, format!("lower-bound vs point; {}", lines.join("; ")))
}

/// Relative path -> bytes for every report-like file under `root`.
fn output_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c9_determinism(first: &Path, second: &Path, seed: u64) -> Verdict {
    if let Err(e) = run_seed(seed, second) {
        return verdict(false, format!("rerun failed: {e}"));
    }
    let a = output_files(first);
    let b = output_files(second);
    let csvs = a.keys().filter(|k| k.ends_with(".csv")).count();
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let same_set = a.keys().eq(b.keys());
    verdict(
        same_set && differing.is_empty() && csvs > 0,
        format!("{} files ({csvs} CSV) compared, differing {:?}", a.len(), differing),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let report = |name: &'static str, v: Verdict, results: &mut Vec<(&str, Verdict)>| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("C1 equation exactness", c1_equations(), &mut results);
    report("C2 cvar oracle", c2_cvar_oracle(), &mut results);
    report("C3 simulator properties", c3_simulator_properties(), &mut results);
    report("C4 auditor soundness", c4_auditor_soundness(), &mut results);
    report("C5 gradient check", c5_gradients(), &mut results);
    report("C6 calibration coverage", c6_coverage(), &mut results);

    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for seed in [1u64, 2, 3] {
        match run_seed(seed, &tmp.path().join(format!("seed{seed}"))) {
            Ok(r) => runs.push(r),
            Err(e) => println!("pipeline for seed {seed} failed: {e}"),
        }
    }
    if runs.len() == 3 {
        report("C7 ablation direction", c7_directional(&runs), &mut results);
        report("C8 predictor direction", c8_predictors(&runs), &mut results);
        let v = c9_determinism(&tmp.path().join("seed1"), &tmp.path().join("seed1-rerun"), 1);
        report("C9 determinism", v, &mut results);
        let t = runs[0].elapsed;
        report(
            "C10 desk-scale budget",
            verdict(t < Duration::from_secs(30 * 60), format!("gen-traces(100) to evaluate in {t:.1?}")),
            &mut results,
        );
    } else {
        for name in ["C7 ablation direction", "C8 predictor direction", "C9 determinism", "C10 desk-scale budget"] {
            report(name, verdict(false, "pipeline did not complete"), &mut results);
        }
    }

    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
