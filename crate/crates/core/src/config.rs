//! Experiment configuration as a single TOML document.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! Stage seeds are derived from the one global `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::AuditConfig;
use crate::bc::BcConfig;
use crate::error::{Error, Result};
use crate::ppo::{CvarConfig, PpoConfig};
use crate::sim::{size_jitter_table, BitrateLadder, QoeWeights, VideoSpec, DEFAULT_JITTER_SEED};
use crate::trace::SynthConfig;

/// Registered method names, the public contract of comparison tables.
pub const METHODS: [&str; 7] = ["rate-rule", "bola", "robust-mpc", "bc-only", "bc+rl", "bc+audit", "full"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSource {
    /// Directory of `time_s,throughput_bps` files; synthetic traces when unset.
    pub ingest_dir: Option<PathBuf>,
    pub count: usize,
    pub synth: SynthConfig,
}

impl Default for TraceSource {
    fn default() -> Self {
        Self {
            ingest_dir: None,
            count: 100,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.7,
            calibration: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub num_chunks: usize,
    pub chunk_duration_s: f64,
    pub ladder_kbps: Vec<f64>,
    pub jitter_low: f64,
    pub jitter_high: f64,
    pub jitter_seed: u64,
    pub buffer_max_s: f64,
    pub initial_buffer_s: f64,
    pub initial_prev_rung: usize,
    pub history_len: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        let s = VideoSpec::standard();
        Self {
            num_chunks: s.num_chunks,
            chunk_duration_s: s.chunk_duration_s,
            ladder_kbps: s.ladder.as_slice().to_vec(),
            jitter_low: 0.9,
            jitter_high: 1.1,
            jitter_seed: DEFAULT_JITTER_SEED,
            buffer_max_s: s.buffer_max_s,
            initial_buffer_s: s.initial_buffer_s,
            initial_prev_rung: s.initial_prev_rung,
            history_len: s.history_len,
        }
    }
}

impl VideoConfig {
    pub fn spec(&self) -> Result<VideoSpec> {
        if !(self.jitter_low > 0.0 && self.jitter_low <= self.jitter_high) {
            return Err(Error::validation("jitter bounds must satisfy 0 < low <= high"));
        }
        let spec = VideoSpec {
            num_chunks: self.num_chunks,
            chunk_duration_s: self.chunk_duration_s,
            ladder: BitrateLadder::new(self.ladder_kbps.clone())?,
            size_jitter: size_jitter_table(self.num_chunks, self.jitter_low, self.jitter_high, self.jitter_seed),
            buffer_max_s: self.buffer_max_s,
            initial_buffer_s: self.initial_buffer_s,
            initial_prev_rung: self.initial_prev_rung,
            history_len: self.history_len,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    /// Candidate predictor ids: `point`, `lower-bound`, `oracle`.
    pub candidates: Vec<String>,
    pub delta: f64,
    pub input_len_s: usize,
    pub horizon_s: usize,
    /// Relative QoE slack of the selection rule.
    pub eps_qoe: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            candidates: vec!["point".into(), "lower-bound".into()],
            delta: 0.10,
            input_len_s: 75,
            horizon_s: 15,
            eps_qoe: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<String>,
    pub ablation: bool,
    pub margin_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub handover_window_s: f64,
    pub handover_fraction: f64,
    /// Also write per-chunk session logs.
    pub session_logs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: METHODS.iter().map(|m| m.to_string()).collect(),
            ablation: true,
            margin_grid: vec![0.90, 0.95, 1.00],
            lambda_grid: vec![],
            handover_window_s: 300.0,
            handover_fraction: 0.3,
            session_logs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub traces: TraceSource,
    pub split: SplitConfig,
    pub video: VideoConfig,
    pub qoe: QoeWeights,
    pub bc: BcConfig,
    pub ppo: PpoConfig,
    pub cvar: CvarConfig,
    pub capacity: CapacityConfig,
    pub audit: AuditConfig,
    pub evaluate: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            traces: TraceSource::default(),
            split: SplitConfig::default(),
            video: VideoConfig::default(),
            qoe: QoeWeights::default(),
            bc: BcConfig::default(),
            ppo: PpoConfig::default(),
            cvar: CvarConfig::default(),
            capacity: CapacityConfig::default(),
            audit: AuditConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

/// Stage tags mixed into the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Traces,
    Split,
    Pretrain,
    Finetune,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Serde(msg) => Error::Serde(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.video.spec()?;
        self.traces.synth.validate()?;
        if self.traces.ingest_dir.is_none() && self.traces.count == 0 {
            return Err(Error::validation("traces.count must be positive"));
        }
        self.bc.validate()?;
        self.ppo.validate()?;
        self.cvar.validate()?;
        self.audit.validate()?;
        if !(self.capacity.delta > 0.0 && self.capacity.delta < 1.0) {
            return Err(Error::validation("capacity.delta must lie in (0, 1)"));
        }
        if self.capacity.input_len_s == 0 || self.capacity.horizon_s == 0 {
            return Err(Error::validation("capacity input_len_s and horizon_s must be positive"));
        }
        for c in &self.capacity.candidates {
            if !["point", "lower-bound", "oracle"].contains(&c.as_str()) {
                return Err(Error::validation(format!("unknown predictor candidate `{c}`")));
            }
        }
        if self.capacity.candidates.is_empty() {
            return Err(Error::validation("capacity.candidates must not be empty"));
        }
        for m in &self.evaluate.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(Error::validation(format!(
                    "unknown method `{m}`; registered: {}",
                    METHODS.join(", ")
                )));
            }
        }
        for &m in &self.evaluate.margin_grid {
            AuditConfig {
                margin: m,
                ..self.audit
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<VideoSpec> {
        self.video.spec()
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        (self.split.train, self.split.calibration, self.split.test)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let tag: u64 = match stage {
            Stage::Traces => 0x7472_6163,
            Stage::Split => 0x7370_6c74,
            Stage::Pretrain => 0x6263_7072,
            Stage::Finetune => 0x7070_6f66,
        };
        splitmix(self.seed ^ tag)
    }
}

/// One round of the splitmix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
