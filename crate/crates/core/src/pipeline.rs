//! End-to-end experiment stages over an output directory.
//!
//! Each stage reads the artifacts of earlier stages from the output
//! directory, writes its own, and records their SHA-256 hashes in
//! `artifacts.json`. Derived checkpoints name the hash of their parent, and
//! evaluation refuses to mix artifacts whose recorded parents no longer match.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{AuditConfig, RuntimeAuditor};
use crate::bc;
use crate::capacity::{
    calibrate_lower_bound, decision_reports_to_csv, evaluate_predictor_decisions, select_predictor, CalibrationResult,
    CapacityPredictor, DecisionReport,
};
use crate::classic::{Bola, BolaConfig, BeamExpert, MpcConfig, RateRule, RobustMpc};
use crate::config::{splitmix, ExperimentConfig, Stage, METHODS};
use crate::error::{Error, Result};
use crate::metrics::{build_report, reports_to_csv, RiskReport};
use crate::nn::{Checkpoint, GreedyNet, PolicyNet};
use crate::ppo;
use crate::sim::{run_sessions, ActionAuditor, PurePolicy, SessionLog, VideoSpec};
use crate::trace::{
    handover_heavy_subset, load_trace_dir, split_traces, synthesize_trace, SynthConfig, ThroughputTrace, TraceSplit,
};

/// File locations inside an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.toml")
    }

    pub fn bc_checkpoint(&self) -> PathBuf {
        self.root.join("policy_bc.json")
    }

    pub fn bc_report(&self) -> PathBuf {
        self.root.join("bc_report.csv")
    }

    pub fn rl_checkpoint(&self, lambda: f64) -> PathBuf {
        self.root.join(format!("policy_rl_lambda{lambda}.json"))
    }

    pub fn rl_curve(&self, lambda: f64) -> PathBuf {
        self.root.join(format!("rl_curve_lambda{lambda}.csv"))
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.toml")
    }

    pub fn predictor_report(&self) -> PathBuf {
        self.root.join("predictors.csv")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.toml")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts.json")
    }
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            msg: other.to_string(),
        },
    })
}

fn stage_err(stage: &'static str, msg: impl Into<String>) -> Error {
    Error::Stage { stage, msg: msg.into() }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub stage: String,
}

/// Content-hash registry of everything a run has written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl ArtifactIndex {
    pub fn load(layout: &Layout) -> Result<Self> {
        let path = layout.artifacts();
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&read_file(&path)?)?)
    }

    fn record(layout: &Layout, stage: &str, paths: &[PathBuf]) -> Result<()> {
        let mut index = Self::load(layout)?;
        for p in paths {
            let rel = p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().replace('\\', "/");
            index.artifacts.insert(
                rel,
                ArtifactEntry {
                    sha256: file_sha256(p)?,
                    stage: stage.to_string(),
                },
            );
        }
        write_file(&layout.artifacts(), &serde_json::to_string_pretty(&index)?)
    }
}

fn write_split(cfg: &ExperimentConfig, layout: &Layout, traces: &[ThroughputTrace]) -> Result<TraceSplit> {
    let ids: Vec<String> = traces.iter().map(|t| t.id().to_string()).collect();
    let split = split_traces(&ids, cfg.split_fractions(), cfg.stage_seed(Stage::Split))?;
    write_file(&layout.split(), &split.to_toml()?)?;
    Ok(split)
}

/// Writes `traces.count` synthetic traces and the split manifest.
pub fn gen_traces(cfg: &ExperimentConfig) -> Result<TraceSplit> {
    staged("gen-traces", gen_traces_inner(cfg))
}

fn gen_traces_inner(cfg: &ExperimentConfig) -> Result<TraceSplit> {
    if cfg.traces.count == 0 {
        return Err(Error::validation("trace count must be positive"));
    }
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.traces_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let traces = synthesize_set(&cfg.traces.synth, cfg.stage_seed(Stage::Traces), "syn", cfg.traces.count)?;
    let mut written = Vec::new();
    for t in &traces {
        written.push(t.write_to_dir(&dir)?);
    }
    let split = write_split(cfg, &layout, &traces)?;
    written.push(layout.split());
    ArtifactIndex::record(&layout, "gen-traces", &written)?;
    Ok(split)
}

/// `count` traces named `{prefix}-00000, ...`; trace `i` is seeded by
/// `splitmix(base_seed + i)`.
pub fn synthesize_set(synth: &SynthConfig, base_seed: u64, prefix: &str, count: usize) -> Result<Vec<ThroughputTrace>> {
    (0..count)
        .map(|i| {
            let cfg = SynthConfig {
                seed: splitmix(base_seed.wrapping_add(i as u64)),
                ..synth.clone()
            };
            synthesize_trace(format!("{prefix}-{i:05}"), &cfg)
        })
        .collect()
}

/// Validates and normalizes external trace files into the run directory.
pub fn ingest(cfg: &ExperimentConfig, src: &Path) -> Result<TraceSplit> {
    staged("ingest", ingest_inner(cfg, src))
}

fn ingest_inner(cfg: &ExperimentConfig, src: &Path) -> Result<TraceSplit> {
    let traces = load_trace_dir(src)?;
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.traces_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut written = Vec::new();
    for t in &traces {
        written.push(t.write_to_dir(&dir)?);
    }
    let split = write_split(cfg, &layout, &traces)?;
    written.push(layout.split());
    ArtifactIndex::record(&layout, "ingest", &written)?;
    Ok(split)
}

/// Recomputes the split manifest over the traces already in the run directory.
pub fn split(cfg: &ExperimentConfig) -> Result<TraceSplit> {
    staged("split", (|| {
        let layout = Layout::new(&cfg.out_dir);
        let traces = load_trace_dir(&layout.traces_dir())?;
        let split = write_split(cfg, &layout, &traces)?;
        ArtifactIndex::record(&layout, "split", &[layout.split()])?;
        Ok(split)
    })())
}

/// Traces of the run, grouped as (train, calibration, test) in manifest order.
pub struct SplitTraces {
    pub train: Vec<ThroughputTrace>,
    pub calibration: Vec<ThroughputTrace>,
    pub test: Vec<ThroughputTrace>,
}

pub fn load_split(layout: &Layout) -> Result<SplitTraces> {
    let path = layout.split();
    if !path.exists() {
        return Err(Error::validation(format!(
            "split manifest {} not found; run `gen-traces`, `ingest` or `split` first",
            path.display()
        )));
    }
    let split = TraceSplit::from_toml(&read_file(&path)?)?;
    let mut by_id: BTreeMap<String, ThroughputTrace> =
        load_trace_dir(&layout.traces_dir())?.into_iter().map(|t| (t.id().to_string(), t)).collect();
    let mut take = |ids: &[String], part: &str| -> Result<Vec<ThroughputTrace>> {
        ids.iter()
            .map(|id| {
                by_id.remove(id).ok_or_else(|| {
                    Error::validation(format!("{part} trace `{id}` listed in {} has no trace file", path.display()))
                })
            })
            .collect()
    };
    let out = SplitTraces {
        train: take(&split.train, "train")?,
        calibration: take(&split.calibration, "calibration")?,
        test: take(&split.test, "test")?,
    };
    if out.train.is_empty() {
        return Err(Error::validation(format!("train split in {} is empty", path.display())));
    }
    Ok(out)
}

fn load_policy(path: &Path, make: &str) -> Result<(PolicyNet, Checkpoint, String)> {
    if !path.exists() {
        return Err(Error::validation(format!("checkpoint {} not found; run `{make}` first", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    Ok((ck.net()?, ck, file_sha256(path)?))
}

/// Behavior-cloning pretraining on the train split.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<bc::BcReport> {
    staged("pretrain", (|| {
        let layout = Layout::new(&cfg.out_dir);
        let spec = cfg.spec()?;
        let split = load_split(&layout)?;
        let bc_cfg = bc::BcConfig {
            seed: cfg.stage_seed(Stage::Pretrain),
            ..cfg.bc.clone()
        };
        let expert = BeamExpert {
            horizon: bc_cfg.expert_horizon,
        };
        let (net, report) = bc::pretrain(&bc_cfg, &expert, &split.train, &spec, &cfg.qoe)?;
        let mut ck = Checkpoint::new(&net, "pretrain");
        ck.parent_sha256 = Some(file_sha256(&layout.split())?);
        ck.save(&layout.bc_checkpoint())?;
        write_file(&layout.bc_report(), &report.to_csv())?;
        ArtifactIndex::record(&layout, "pretrain", &[layout.bc_checkpoint(), layout.bc_report()])?;
        Ok(report)
    })())
}

/// Tail-penalized fine-tuning of the pretrained policy. `lambda` overrides
/// the configured penalty weight; `resume` continues an existing checkpoint
/// for the same weight.
pub fn finetune(cfg: &ExperimentConfig, lambda: Option<f64>, resume: bool) -> Result<ppo::FinetuneReport> {
    staged("finetune", (|| {
        let layout = Layout::new(&cfg.out_dir);
        let spec = cfg.spec()?;
        let split = load_split(&layout)?;
        let cvar = ppo::CvarConfig {
            penalty_weight: lambda.unwrap_or(cfg.cvar.penalty_weight),
            ..cfg.cvar.clone()
        };
        cvar.validate()?;
        let ppo_cfg = ppo::PpoConfig {
            seed: cfg.stage_seed(Stage::Finetune),
            ..cfg.ppo.clone()
        };
        let (bc_net, _, bc_hash) = load_policy(&layout.bc_checkpoint(), "pretrain")?;
        let out = layout.rl_checkpoint(cvar.penalty_weight);
        let (start, state) = if resume && out.exists() {
            let ck = Checkpoint::load(&out)?;
            if ck.parent_sha256.as_deref() != Some(bc_hash.as_str()) {
                return Err(Error::validation(format!(
                    "{} was fine-tuned from a different pretrained policy; rerun without --resume",
                    out.display()
                )));
            }
            let state = ck
                .trainer
                .clone()
                .ok_or_else(|| Error::validation(format!("{} carries no trainer state", out.display())))?;
            (ck.net()?, Some(state))
        } else {
            (bc_net, None)
        };
        let (net, state, report) = ppo::finetune(start, &split.train, &spec, &cfg.qoe, &ppo_cfg, &cvar, state)?;
        let mut ck = Checkpoint::new(&net, "finetune");
        ck.steps_done = state.steps_done;
        ck.parent_sha256 = Some(bc_hash);
        ck.trainer = Some(state);
        ck.save(&out)?;
        let curve = layout.rl_curve(cvar.penalty_weight);
        let mut csv = report.to_csv();
        if resume && curve.exists() {
            let old = read_file(&curve)?;
            csv = old + csv.split_once('\n').map_or("", |(_, rows)| rows);
        }
        write_file(&curve, &csv)?;
        ArtifactIndex::record(&layout, "finetune", &[out, curve])?;
        Ok(report)
    })())
}

/// Choice of the calibration stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: String,
    /// Hash of the frozen policy the candidates were evaluated under.
    pub policy_sha256: String,
    pub calibration_sha256: String,
}

fn candidate_predictor(id: &str, cfg: &ExperimentConfig, cal: &CalibrationResult) -> Result<CapacityPredictor> {
    match id {
        "point" => Ok(CapacityPredictor::Point {
            input_len_s: cfg.capacity.input_len_s,
            horizon_s: cfg.capacity.horizon_s,
        }),
        "lower-bound" => Ok(cal.predictor()),
        "oracle" => Ok(CapacityPredictor::oracle()),
        other => Err(Error::validation(format!("unknown predictor `{other}`"))),
    }
}

/// Calibrates the lower bound, evaluates every candidate under the frozen
/// fine-tuned policy on the calibration split, and records the selection.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<(Vec<DecisionReport>, String)> {
    staged("calibrate", (|| {
        let layout = Layout::new(&cfg.out_dir);
        let spec = cfg.spec()?;
        let split = load_split(&layout)?;
        let cal = calibrate_lower_bound(&split.calibration, cfg.capacity.delta, cfg.capacity.input_len_s, cfg.capacity.horizon_s)?;
        write_file(&layout.calibration(), &cal.to_toml()?)?;
        let (net, _, policy_hash) = load_policy(&layout.rl_checkpoint(cfg.cvar.penalty_weight), "finetune")?;
        let policy = GreedyNet(&net);
        let mut rows = Vec::new();
        for id in &cfg.capacity.candidates {
            let pred = candidate_predictor(id, cfg, &cal)?;
            rows.push(evaluate_predictor_decisions(&pred, &policy, &split.calibration, &spec, &cfg.qoe, &cfg.audit)?);
        }
        let chosen = rows[select_predictor(&rows, cfg.capacity.eps_qoe)?].predictor.clone();
        write_file(&layout.predictor_report(), &decision_reports_to_csv(&rows))?;
        let sel = Selection {
            selected: chosen.clone(),
            policy_sha256: policy_hash,
            calibration_sha256: file_sha256(&layout.calibration())?,
        };
        write_file(&layout.selection(), &toml::to_string(&sel)?)?;
        ArtifactIndex::record(
            &layout,
            "calibrate",
            &[layout.calibration(), layout.predictor_report(), layout.selection()],
        )?;
        Ok((rows, chosen))
    })())
}

/// Policies and auditor shared by the evaluation grids.
struct EvalContext {
    spec: VideoSpec,
    bc_net: Option<PolicyNet>,
    rl_net: Option<PolicyNet>,
    predictor: Option<CapacityPredictor>,
}

impl EvalContext {
    fn load(cfg: &ExperimentConfig, layout: &Layout, methods: &[String]) -> Result<Self> {
        let needs = |ms: &[&str]| methods.iter().any(|m| ms.contains(&m.as_str()));
        let mut ctx = Self {
            spec: cfg.spec()?,
            bc_net: None,
            rl_net: None,
            predictor: None,
        };
        let mut bc_hash = None;
        if needs(&["bc-only", "bc+audit", "bc+rl", "full"]) {
            let (net, _, hash) = load_policy(&layout.bc_checkpoint(), "pretrain")?;
            ctx.bc_net = Some(net);
            bc_hash = Some(hash);
        }
        if needs(&["bc+rl", "full"]) {
            let (net, ck, hash) = load_policy(&layout.rl_checkpoint(cfg.cvar.penalty_weight), "finetune")?;
            if ck.parent_sha256 != bc_hash {
                return Err(Error::validation(format!(
                    "{} is stale: it was fine-tuned from a different pretrained policy; rerun `finetune`",
                    layout.rl_checkpoint(cfg.cvar.penalty_weight).display()
                )));
            }
            ctx.rl_net = Some(net);
            if needs(&["full", "bc+audit"]) {
                ctx.predictor = Some(load_selected_predictor(cfg, layout, Some(&hash))?);
            }
        } else if needs(&["bc+audit"]) {
            ctx.predictor = Some(load_selected_predictor(cfg, layout, None)?);
        }
        Ok(ctx)
    }

    fn auditor(&self, audit: AuditConfig) -> RuntimeAuditor {
        RuntimeAuditor::new(self.predictor.clone().expect("predictor loaded for audited methods"), audit)
    }
}

fn load_selected_predictor(cfg: &ExperimentConfig, layout: &Layout, policy_hash: Option<&str>) -> Result<CapacityPredictor> {
    let path = layout.selection();
    if !path.exists() {
        return Err(Error::validation(format!("{} not found; run `calibrate` first", path.display())));
    }
    let sel: Selection = toml::from_str(&read_file(&path)?)?;
    let cal = CalibrationResult::from_toml(&read_file(&layout.calibration())?)?;
    if file_sha256(&layout.calibration())? != sel.calibration_sha256 {
        return Err(Error::validation("calibration.toml changed after selection; rerun `calibrate`"));
    }
    if let Some(h) = policy_hash {
        if h != sel.policy_sha256 {
            return Err(Error::validation(
                "predictor selection was made under a different fine-tuned policy; rerun `calibrate`",
            ));
        }
    }
    candidate_predictor(&sel.selected, cfg, &cal)
}

/// Runs one registered method on `traces`.
fn run_method(
    method: &str,
    ctx: &EvalContext,
    audit: AuditConfig,
    cfg: &ExperimentConfig,
    traces: &[ThroughputTrace],
) -> Result<Vec<SessionLog>> {
    let spec = &ctx.spec;
    let run = |policy: &dyn PurePolicy, auditor: Option<&dyn ActionAuditor>| run_sessions(policy, auditor, traces, spec, &cfg.qoe);
    let bc = || ctx.bc_net.as_ref().expect("bc policy loaded");
    let rl = || ctx.rl_net.as_ref().expect("rl policy loaded");
    Ok(match method {
        "rate-rule" => run(&RateRule, None),
        "bola" => run(&Bola(BolaConfig::for_spec(spec)), None),
        "robust-mpc" => run(&RobustMpc(MpcConfig::default()), None),
        "bc-only" => run(&GreedyNet(bc()), None),
        "bc+rl" => run(&GreedyNet(rl()), None),
        "bc+audit" => run(&GreedyNet(bc()), Some(&ctx.auditor(audit))),
        "full" => run(&GreedyNet(rl()), Some(&ctx.auditor(audit))),
        other => return Err(Error::validation(format!("unknown method `{other}`"))),
    })
}

/// Reports for `methods` on arbitrary traces, using the run's current
/// checkpoints and predictor selection.
pub fn evaluate_methods(cfg: &ExperimentConfig, methods: &[&str], traces: &[ThroughputTrace]) -> Result<Vec<RiskReport>> {
    staged("evaluate", (|| {
        let layout = Layout::new(&cfg.out_dir);
        let names: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
        let ctx = EvalContext::load(cfg, &layout, &names)?;
        methods
            .iter()
            .map(|m| build_report(m, &run_method(m, &ctx, cfg.audit, cfg, traces)?, None))
            .collect()
    })())
}

fn sessions_csv(logs: &[SessionLog]) -> String {
    let mut out = format!("trace_id,{}\n", SessionLog::CSV_HEADER);
    for log in logs {
        for row in log.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{},{row}", log.trace_id);
        }
    }
    out
}

/// Output of the evaluation stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub methods: Vec<RiskReport>,
    pub ablation: Vec<RiskReport>,
    pub margin_grid: Vec<RiskReport>,
    pub handover: Vec<RiskReport>,
    pub lambda_grid: Vec<RiskReport>,
}

const ABLATION: [(&str, [bool; 3]); 4] = [
    ("bc-only", [true, false, false]),
    ("bc+rl", [true, true, false]),
    ("bc+audit", [true, false, true]),
    ("full", [true, true, true]),
];

fn ablation_csv(rows: &[RiskReport]) -> String {
    let mut out = format!("bc,cvar_rl,audit,{}\n", RiskReport::CSV_HEADER);
    for r in rows {
        let flags = ABLATION.iter().find(|(m, _)| *m == r.method).map_or([false; 3], |(_, f)| *f);
        let _ = writeln!(out, "{},{},{},{}", u8::from(flags[0]), u8::from(flags[1]), u8::from(flags[2]), r.csv_row());
    }
    out
}

/// Runs the configured methods and grids on the test split and writes the
/// report CSVs (plus JSON twins).
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Evaluation> {
    staged("evaluate", evaluate_inner(cfg))
}

fn evaluate_inner(cfg: &ExperimentConfig) -> Result<Evaluation> {
    let layout = Layout::new(&cfg.out_dir);
    let split = load_split(&layout)?;
    let test = &split.test;
    let ev = &cfg.evaluate;
    let mut wanted: Vec<String> = ev.methods.clone();
    if ev.ablation {
        wanted.extend(ABLATION.iter().map(|(m, _)| m.to_string()));
    }
    if !ev.margin_grid.is_empty() {
        wanted.extend(["bc+rl".to_string(), "full".to_string()]);
    }
    let ctx = EvalContext::load(cfg, &layout, &wanted)?;
    let mut out = Evaluation::default();
    let mut written = Vec::new();
    let reports = layout.reports_dir();

    let mut cache: BTreeMap<String, Vec<SessionLog>> = BTreeMap::new();
    let mut logs_for = |m: &str| -> Result<Vec<SessionLog>> {
        if let Some(l) = cache.get(m) {
            return Ok(l.clone());
        }
        let l = run_method(m, &ctx, cfg.audit, cfg, test)?;
        cache.insert(m.to_string(), l.clone());
        Ok(l)
    };

    for m in &ev.methods {
        let logs = logs_for(m)?;
        if ev.session_logs {
            let p = layout.sessions_dir().join(format!("{}.csv", m.replace('+', "_")));
            write_file(&p, &sessions_csv(&logs))?;
            written.push(p);
        }
        out.methods.push(build_report(m, &logs, None)?);
    }
    let mut emit = |name: &str, csv: String, rows: &[RiskReport]| -> Result<()> {
        let p = reports.join(format!("{name}.csv"));
        write_file(&p, &csv)?;
        let j = reports.join(format!("{name}.json"));
        write_file(&j, &serde_json::to_string_pretty(rows)?)?;
        written.push(p);
        written.push(j);
        Ok(())
    };
    emit("methods", reports_to_csv(&out.methods), &out.methods)?;

    if ev.ablation {
        for (m, _) in ABLATION {
            out.ablation.push(build_report(m, &logs_for(m)?, None)?);
        }
        emit("ablation", ablation_csv(&out.ablation), &out.ablation)?;
    }

    if !ev.margin_grid.is_empty() {
        out.margin_grid.push(build_report("no-audit", &logs_for("bc+rl")?, None)?);
        for &m in &ev.margin_grid {
            let audit = AuditConfig { margin: m, ..cfg.audit };
            let logs = run_method("full", &ctx, audit, cfg, test)?;
            out.margin_grid.push(build_report(&format!("m={m:.2}"), &logs, None)?);
        }
        emit("margin_grid", reports_to_csv(&out.margin_grid), &out.margin_grid)?;
    }

    let heavy_ids = handover_heavy_subset(test, ev.handover_window_s, ev.handover_fraction)?;
    if !heavy_ids.is_empty() {
        let heavy: Vec<ThroughputTrace> = test.iter().filter(|t| heavy_ids.iter().any(|h| h == t.id())).cloned().collect();
        for m in &ev.methods {
            let logs = run_method(m, &ctx, cfg.audit, cfg, &heavy)?;
            out.handover.push(build_report(m, &logs, None)?);
        }
        emit("handover", reports_to_csv(&out.handover), &out.handover)?;
    }

    if !ev.lambda_grid.is_empty() {
        let bc_hash = file_sha256(&layout.bc_checkpoint())?;
        for &lambda in &ev.lambda_grid {
            let path = layout.rl_checkpoint(lambda);
            let (net, ck, _) = load_policy(&path, &format!("finetune --lambda {lambda}"))?;
            if ck.parent_sha256.as_deref() != Some(bc_hash.as_str()) {
                return Err(Error::validation(format!("{} is stale; rerun `finetune --lambda {lambda}`", path.display())));
            }
            let lctx = EvalContext {
                spec: ctx.spec.clone(),
                bc_net: None,
                rl_net: Some(net),
                predictor: ctx.predictor.clone(),
            };
            let logs = run_method("bc+rl", &lctx, cfg.audit, cfg, test)?;
            out.lambda_grid.push(build_report(&format!("bc+rl lambda={lambda}"), &logs, None)?);
            if lctx.predictor.is_some() {
                let logs = run_method("full", &lctx, cfg.audit, cfg, test)?;
                out.lambda_grid.push(build_report(&format!("full lambda={lambda}"), &logs, None)?);
            }
        }
        emit("lambda_grid", reports_to_csv(&out.lambda_grid), &out.lambda_grid)?;
    }
    ArtifactIndex::record(&layout, "evaluate", &written)?;
    Ok(out)
}

/// Collects the report CSVs into one markdown summary.
pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    staged("report", (|| {
        let layout = Layout::new(&cfg.out_dir);
        let dir = layout.reports_dir();
        let mut md = String::from("# Experiment report\n");
        let mut found = false;
        for (name, title) in [
            ("methods", "Methods on the test split"),
            ("ablation", "Ablation"),
            ("margin_grid", "Auditor margin grid"),
            ("handover", "Handover-heavy test subset"),
            ("lambda_grid", "Tail-penalty weight grid"),
        ] {
            let p = dir.join(format!("{name}.csv"));
            if !p.exists() {
                continue;
            }
            found = true;
            let _ = write!(md, "\n## {title}\n\n{}", markdown_table(&read_file(&p)?));
        }
        let pr = layout.predictor_report();
        if pr.exists() {
            found = true;
            let _ = write!(md, "\n## Capacity predictors (calibration split)\n\n{}", markdown_table(&read_file(&pr)?));
        }
        if !found {
            return Err(Error::validation(format!("no reports under {}; run `evaluate` first", dir.display())));
        }
        let p = dir.join("summary.md");
        write_file(&p, &md)?;
        ArtifactIndex::record(&layout, "report", &[p])?;
        Ok(md)
    })())
}

fn markdown_table(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let mut out = format!("| {} |\n|{}\n", header.replace(',', " | "), " --- |".repeat(cols));
    for l in lines {
        let cells: Vec<String> = l
            .split(',')
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') => format!("{v:.4}"),
                _ => c.to_string(),
            })
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

/// All stages in order: traces, pretrain, fine-tune (configured weight and
/// any grid weights), calibrate, evaluate, report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Evaluation> {
    match &cfg.traces.ingest_dir {
        Some(dir) => ingest(cfg, dir)?,
        None => gen_traces(cfg)?,
    };
    pretrain(cfg)?;
    finetune(cfg, None, false)?;
    for &lambda in &cfg.evaluate.lambda_grid {
        if lambda != cfg.cvar.penalty_weight {
            finetune(cfg, Some(lambda), false)?;
        }
    }
    calibrate(cfg)?;
    let ev = evaluate(cfg)?;
    report(cfg)?;
    Ok(ev)
}

/// Checks that every method name is registered.
pub fn parse_methods(list: &str) -> Result<Vec<String>> {
    let ms: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    for m in &ms {
        if !METHODS.contains(&m.as_str()) {
            return Err(stage_err("config", format!("unknown method `{m}`; registered: {}", METHODS.join(", "))));
        }
    }
    if ms.is_empty() {
        return Err(stage_err("config", "method list is empty"));
    }
    Ok(ms)
}
