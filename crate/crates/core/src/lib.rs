//! Risk-aware adaptive bitrate streaming: trace handling, a chunk-level
//! player simulator, classic and learned bitrate policies, tail-risk
//! fine-tuning, conservative capacity prediction, a runtime action auditor
//! and session-level risk metrics.

pub mod audit;
pub mod bc;
pub mod capacity;
pub mod classic;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod ppo;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
pub use sim::{
    run_session, AbrPolicy, ActionAuditor, AuditRecord, BitrateLadder, ChunkOutcome, Observation,
    PlayerState, PurePolicy, QoeWeights, SessionEnv, SessionLog, VideoSpec,
};
pub use trace::{ThroughputTrace, TraceSplit};
