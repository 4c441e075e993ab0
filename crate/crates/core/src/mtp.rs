//! Multi-token prediction: weighted future-target label sets and their loss.
//!
//! Each target `y_i` observed at `t_i` gets weight
//! `w_i = r_i · exp(−ln 2 · (t_i − t_context) / β)` and the loss is
//! `−Σ w_i log p(y_i | x)` over one shared candidate scoring. Weights are not
//! normalized per context.

use serde::{Deserialize, Serialize};

use crate::cold_start::Candidate;
use crate::decoder::{weighted_candidate_loss, ItemVectorTable, XentGrad};
use crate::error::{config_err, Error, Result};
use crate::world::{Event, HOUR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardWeighting {
    Unit,
    Reward,
}

impl std::str::FromStr for RewardWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(RewardWeighting::Unit),
            "reward" => Ok(RewardWeighting::Reward),
            _ => config_err(format!("unknown reward weighting '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtpConfig {
    /// Maximum number of targets `K`.
    pub window: usize,
    /// Half-life `β` in seconds.
    pub half_life: f64,
    /// Look-ahead horizon in seconds.
    pub horizon: i64,
    pub reward_weighting: RewardWeighting,
}

impl Default for MtpConfig {
    fn default() -> Self {
        Self { window: 5, half_life: HOUR as f64, horizon: 48 * HOUR, reward_weighting: RewardWeighting::Unit }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.window) {
            return config_err(format!("MTP window must be in 1..=5, got {}", self.window));
        }
        if !(self.half_life > 0.0 && self.half_life.is_finite()) {
            return config_err(format!("half-life must be positive, got {}", self.half_life));
        }
        if self.horizon < 0 {
            return config_err("MTP horizon must be nonnegative");
        }
        Ok(())
    }
}

/// Time-decay weight of a target observed `t - t_context` seconds after the context.
pub fn decay_weight(reward: f64, t: i64, t_context: i64, half_life: f64) -> f64 {
    reward * (-((t - t_context) as f64) / half_life).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtpEntry {
    pub item: u32,
    pub time: i64,
    pub reward: f64,
    pub weight: f64,
    /// Score this target through the OOV path (masked or out-of-vocabulary).
    pub oov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtpLabelSet {
    pub t_context: i64,
    pub entries: Vec<MtpEntry>,
}

impl MtpLabelSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn targets(&self) -> Vec<(Candidate, f64)> {
        self.entries.iter().map(|e| (Candidate { item: e.item, oov: e.oov }, e.weight)).collect()
    }
}

/// First `K` high-value events in `[t_context, t_context + horizon]`.
pub fn build_label_set<'a>(
    future: impl IntoIterator<Item = &'a Event>,
    t_context: i64,
    config: &MtpConfig,
) -> MtpLabelSet {
    let mut entries = Vec::with_capacity(config.window);
    for ev in future {
        if ev.timestamp < t_context || !ev.high_value {
            continue;
        }
        if ev.timestamp > t_context + config.horizon || entries.len() == config.window {
            break;
        }
        let r = match config.reward_weighting {
            RewardWeighting::Unit => 1.0,
            RewardWeighting::Reward => ev.reward,
        };
        entries.push(MtpEntry {
            item: ev.item,
            time: ev.timestamp,
            reward: r,
            weight: decay_weight(r, ev.timestamp, t_context, config.half_life),
            oov: false,
        });
    }
    MtpLabelSet { t_context, entries }
}

/// `−Σ w_i log softmax(s)[y_i]` from a single scoring of `candidates`.
pub fn mtp_loss<T: ItemVectorTable + ?Sized>(
    user: &[f64],
    labels: &MtpLabelSet,
    candidates: &[Candidate],
    table: &T,
) -> Result<XentGrad> {
    weighted_candidate_loss(user, &labels.targets(), candidates, table)
}
