//! JSON snapshots of trained policies and discriminators.
//!
//! A snapshot embeds the experiment config it came from and a hash of the
//! noise schedule, so a policy is never silently loaded against a different
//! set of noise levels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mdp::StrategyKind;
use crate::policy::{PolicyFamily, SamplingPolicy};
use crate::ratio::Discriminator;

pub const SNAPSHOT_FORMAT: u32 = 1;

/// Hex SHA-256 of the little-endian bit patterns of the noise levels.
pub fn schedule_hash(sigmas: &[f64]) -> String {
    let mut h = Sha256::new();
    for s in sigmas {
        h.update(s.to_bits().to_le_bytes());
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        write!(out, "{b:02x}").expect("writing to a String");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyRole {
    Policy,
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySnapshot {
    pub format: u32,
    pub role: PolicyRole,
    pub family: PolicyFamily,
    pub strategy: StrategyKind,
    pub action_grid: Vec<f64>,
    pub schedule_hash: String,
    pub config: ExperimentConfig,
    pub policy: SamplingPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSnapshot {
    pub format: u32,
    pub schedule_hash: String,
    pub config: ExperimentConfig,
    pub discriminator: Discriminator,
}

fn snapshot_error(msg: impl Into<String>) -> Error {
    Error::Snapshot(msg.into())
}

fn check_header(format: u32, hash: &str, cfg: &ExperimentConfig) -> Result<()> {
    if format != SNAPSHOT_FORMAT {
        return Err(snapshot_error(format!("unsupported snapshot format {format}")));
    }
    let expected = schedule_hash(cfg.noise_schedule()?.sigmas());
    if hash != expected {
        return Err(snapshot_error("schedule hash does not match the embedded config"));
    }
    Ok(())
}

impl PolicySnapshot {
    pub fn new(policy: &SamplingPolicy, role: PolicyRole, config: &ExperimentConfig) -> Result<Self> {
        let hash = schedule_hash(policy.sigmas());
        if hash != schedule_hash(config.noise_schedule()?.sigmas()) {
            return Err(snapshot_error("policy and config use different noise schedules"));
        }
        Ok(Self {
            format: SNAPSHOT_FORMAT,
            role,
            family: policy.family(),
            strategy: policy.rules().strategy,
            action_grid: config.strategy.action_grid(),
            schedule_hash: hash,
            config: config.clone(),
            policy: policy.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| snapshot_error(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Self = serde_json::from_str(text).map_err(|e| snapshot_error(e.to_string()))?;
        check_header(snap.format, &snap.schedule_hash, &snap.config)?;
        if schedule_hash(snap.policy.sigmas()) != snap.schedule_hash {
            return Err(snapshot_error("policy noise levels do not match the schedule hash"));
        }
        if snap.family != snap.policy.family() || snap.strategy != snap.policy.rules().strategy {
            return Err(snapshot_error("snapshot metadata disagrees with the stored policy"));
        }
        if snap.action_grid.len() != snap.policy.action_count() {
            return Err(snapshot_error("action grid length disagrees with the policy"));
        }
        snap.policy.check_finite()?;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| snapshot_error(format!("{}: {e}", path.display())))
    }
}

impl DiscriminatorSnapshot {
    pub fn new(discriminator: &Discriminator, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            format: SNAPSHOT_FORMAT,
            schedule_hash: schedule_hash(config.noise_schedule()?.sigmas()),
            config: config.clone(),
            discriminator: discriminator.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| snapshot_error(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Self = serde_json::from_str(text).map_err(|e| snapshot_error(e.to_string()))?;
        check_header(snap.format, &snap.schedule_hash, &snap.config)?;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| snapshot_error(format!("{}: {e}", path.display())))
    }
}
