//! Runtime safety layer: feasible-rung construction from a conservative
//! capacity estimate and downward projection of unsafe requests.

use serde::{Deserialize, Serialize};

use crate::capacity::CapacityPredictor;
use crate::error::{Error, Result};
use crate::sim::{ActionAuditor, AuditRecord, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Buffer seconds held back from the download-time budget.
    pub guard_s: f64,
    /// Multiplier on the capacity estimate.
    pub margin: f64,
    pub enabled: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            guard_s: 0.0,
            margin: 0.90,
            enabled: true,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guard_s >= 0.0 && self.guard_s.is_finite()) {
            return Err(Error::validation("audit guard must be finite and non-negative"));
        }
        if !(self.margin > 0.0 && self.margin <= 1.5) {
            return Err(Error::validation("audit margin must lie in (0, 1.5]"));
        }
        Ok(())
    }
}

/// Set of ladder indices (at most 64 rungs).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RungSet(u64);

impl RungSet {
    pub const EMPTY: Self = Self(0);

    pub fn insert(&mut self, rung: usize) {
        assert!(rung < 64, "rung {rung} beyond set capacity");
        self.0 |= 1 << rung;
    }

    pub fn contains(&self, rung: usize) -> bool {
        rung < 64 && self.0 & (1 << rung) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.0 & !other.0 == 0
    }

    /// Largest member not above `rung`.
    pub fn max_at_most(&self, rung: usize) -> Option<usize> {
        let mask = if rung >= 63 { u64::MAX } else { (1u64 << (rung + 1)) - 1 };
        let bits = self.0 & mask;
        (bits != 0).then(|| 63 - bits.leading_zeros() as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(|&r| self.contains(r))
    }
}

impl FromIterator<usize> for RungSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = Self::EMPTY;
        for r in iter {
            s.insert(r);
        }
        s
    }
}

/// Rungs whose estimated download time `8 S / (m c)` fits in `b - g`, with a
/// capacity estimate per rung.
pub fn feasible_set_with<F>(buffer_s: f64, sizes: &[f64], capacity_of: F, cfg: &AuditConfig) -> RungSet
where
    F: Fn(usize) -> f64,
{
    let budget = buffer_s - cfg.guard_s;
    if budget <= 0.0 {
        return RungSet::EMPTY;
    }
    sizes
        .iter()
        .enumerate()
        .filter(|&(a, s)| 8.0 * s / (cfg.margin * capacity_of(a)) <= budget)
        .map(|(a, _)| a)
        .collect()
}

/// Feasible rungs under one capacity estimate `c_hat` (bps).
pub fn feasible_set(buffer_s: f64, sizes: &[f64], c_hat: f64, cfg: &AuditConfig) -> RungSet {
    feasible_set_with(buffer_s, sizes, |_| c_hat, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditDecision {
    pub raw_rung: usize,
    pub safe_rung: usize,
    pub intervened: bool,
    pub fallback: bool,
    pub feasible: RungSet,
}

/// Highest feasible rung at or below `raw`, else the lowest rung.
pub fn audit_action(raw: usize, feasible: RungSet) -> AuditDecision {
    let (safe_rung, fallback) = match feasible.max_at_most(raw) {
        Some(a) => (a, false),
        None => (0, true),
    };
    AuditDecision {
        raw_rung: raw,
        safe_rung,
        intervened: safe_rung != raw,
        fallback,
        feasible,
    }
}

/// Whether the realized download time `8 size / c` exceeded `buffer - g`.
pub fn decision_violation(size_bytes: f64, realized_bps: f64, buffer_s: f64, guard_s: f64) -> bool {
    8.0 * size_bytes / realized_bps > buffer_s - guard_s
}

/// Auditor driven by a capacity predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeAuditor {
    pub predictor: CapacityPredictor,
    pub cfg: AuditConfig,
}

impl RuntimeAuditor {
    pub fn new(predictor: CapacityPredictor, cfg: AuditConfig) -> Self {
        Self { predictor, cfg }
    }

    pub fn decide(&self, obs: &Observation<'_>, raw: usize) -> (AuditDecision, Option<f64>) {
        let passthrough = |raw| AuditDecision {
            raw_rung: raw,
            safe_rung: raw,
            intervened: false,
            fallback: false,
            feasible: (0..obs.spec.ladder.len()).collect(),
        };
        if !self.cfg.enabled {
            return (passthrough(raw), None);
        }
        let sizes = &obs.state.next_chunk_sizes;
        let caps: Option<Vec<f64>> = (0..sizes.len()).map(|a| self.predictor.predict(obs, a)).collect();
        // no estimate yet: the link is treated as unbounded
        let Some(caps) = caps else {
            return (passthrough(raw), None);
        };
        let feasible = feasible_set_with(obs.state.buffer_s, sizes, |a| caps[a], &self.cfg);
        let d = audit_action(raw, feasible);
        (d, Some(caps[d.safe_rung]))
    }
}

impl ActionAuditor for RuntimeAuditor {
    fn audit(&self, obs: &Observation<'_>, raw_rung: usize) -> AuditRecord {
        let (d, cap) = self.decide(obs, raw_rung);
        AuditRecord {
            safe_rung: d.safe_rung,
            intervened: d.intervened,
            fallback: d.fallback,
            capacity_bps: cap,
            effective_capacity_bps: cap.map(|c| c * self.cfg.margin),
        }
    }
}
