//! Synthetic behavior worlds.
//!
//! A world is a title catalog plus per-user event streams produced by three
//! generator families whose predictability ceilings are set by construction:
//!
//! * Task A: long-horizon taste. Items are drawn from the user's latent taste
//!   mixed with heavy uniform noise.
//! * Task B: short-horizon engagement. A Markov chain that usually follows the
//!   "next episode" successor of the user's last B item.
//! * Task C: time/availability driven. A global schedule exposes a small
//!   window of titles per wall-clock bucket and almost every C event picks
//!   from it.
//!
//! Every event is either *engaged* (task-driven item, reward at or above the
//! high-value threshold) or a *browse* event (popularity-driven item, reward
//! below the threshold). Cold-start titles launch after the training cutoff
//! and are outside the model vocabulary.

mod generate;
pub mod io;
pub mod oracle;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub use generate::{
    generate_catalog, generate_dataset, generate_history, sample_engaged_item, DatasetPair,
    UserProfile,
};

pub const HOUR: i64 = 3600;
pub const DAY: i64 = 24 * HOUR;

/// Number of raw context fields stored on every event: `[slot, country]`.
pub const EVENT_CONTEXT_FIELDS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskCategory {
    A,
    B,
    C,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 3] = [TaskCategory::A, TaskCategory::B, TaskCategory::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::A => "A",
            TaskCategory::B => "B",
            TaskCategory::C => "C",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(TaskCategory::A),
            "B" | "b" => Ok(TaskCategory::B),
            "C" | "c" => Ok(TaskCategory::C),
            other => Err(Error::Input(format!("unknown task category {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Title {
    pub id: u32,
    pub launch_time: i64,
    pub in_vocab: bool,
    pub graph_vec: Vec<f64>,
    pub lang_vec: Vec<f64>,
    pub ann_vec: Vec<f64>,
    /// Hidden generator state. Empty when the catalog was loaded from disk.
    #[serde(skip)]
    pub latent_taste: Vec<f64>,
}

impl Title {
    /// The three semantic vectors concatenated in graph, language,
    /// annotation order.
    pub fn features(&self) -> impl Iterator<Item = f64> + '_ {
        self.graph_vec
            .iter()
            .chain(&self.lang_vec)
            .chain(&self.ann_vec)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticDims {
    pub graph: usize,
    pub lang: usize,
    pub ann: usize,
}

impl SemanticDims {
    pub fn total(&self) -> usize {
        self.graph + self.lang + self.ann
    }
}

/// Global generator internals shared by all users. Never visible to models.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldTruth {
    /// "Next episode" successor for every title.
    pub successor: Vec<u32>,
    /// Task-C availability schedule, consumed `window` titles per bucket.
    pub schedule: Vec<u32>,
    /// In-vocabulary titles ordered by popularity rank (most popular first).
    pub popularity_order: Vec<u32>,
    /// Cumulative browse probabilities aligned with `popularity_order`.
    pub popularity_cdf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TitleCatalog {
    pub titles: Vec<Title>,
    pub dims: SemanticDims,
    pub truth: Option<WorldTruth>,
}

impl TitleCatalog {
    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn in_vocab_ids(&self) -> Vec<u32> {
        self.titles.iter().filter(|t| t.in_vocab).map(|t| t.id).collect()
    }

    pub fn cold_ids(&self) -> Vec<u32> {
        self.titles.iter().filter(|t| !t.in_vocab).map(|t| t.id).collect()
    }

    pub fn side_info(&self) -> TitleSideInfo {
        TitleSideInfo::from_catalog(self)
    }
}

/// Model-visible view of a catalog: concatenated semantic features and the
/// vocabulary membership flag of every title.
#[derive(Debug, Clone, PartialEq)]
pub struct TitleSideInfo {
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub in_vocab: Vec<bool>,
}

impl TitleSideInfo {
    pub fn from_catalog(catalog: &TitleCatalog) -> Self {
        let feature_dim = catalog.dims.total();
        let mut features = Vec::with_capacity(catalog.len() * feature_dim);
        for t in &catalog.titles {
            features.extend(t.features());
        }
        Self {
            feature_dim,
            features,
            in_vocab: catalog.titles.iter().map(|t| t.in_vocab).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.in_vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_vocab.is_empty()
    }

    pub fn features_of(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: u32,
    pub item: u32,
    pub timestamp: i64,
    pub reward: f64,
    pub high_value: bool,
    /// `[slot, country]`.
    pub context: Vec<u16>,
    pub task: TaskCategory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user_id: u32,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: Arc<TitleCatalog>,
    pub histories: Vec<UserHistory>,
    pub cutoff_time: i64,
    pub split: Split,
}

impl Dataset {
    pub fn n_events(&self) -> usize {
        self.histories.iter().map(|h| h.events.len()).sum()
    }
}

/// Knobs of the synthetic world. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub n_users: usize,
    pub latent_dim: usize,
    pub graph_dim: usize,
    pub lang_dim: usize,
    pub ann_dim: usize,
    pub semantic_noise_std: f64,
    pub cold_start_fraction: f64,
    pub horizon: i64,
    pub cutoff: i64,
    pub mean_gap: f64,
    /// Probability of each task category for a new event (A, B, C).
    pub task_mix: [f64; 3],
    /// Probability that an event keeps the task of the previous event.
    pub task_persistence: f64,
    /// Probability that an event is a low-value popularity-driven browse.
    pub browse_prob: f64,
    pub popularity_exponent: f64,
    pub high_value_threshold: f64,
    /// Inverse temperature of the taste softmax (cosine affinity).
    pub taste_sharpness: f64,
    /// Task A mixing weight of the uniform noise component.
    pub task_a_noise: f64,
    pub task_b_chain_prob: f64,
    pub task_b_skip_prob: f64,
    pub task_c_bucket: i64,
    /// Emission weights over the sliding schedule window: entry `j` is the
    /// weight of the title scheduled `j` buckets ahead.
    pub task_c_weights: Vec<f64>,
    /// Number of buckets after which the Task-C schedule repeats.
    pub task_c_period: usize,
    pub task_c_follow_prob: f64,
    /// Taste-weight multiplier for titles launched within `new_release_period`.
    pub new_release_boost: f64,
    pub new_release_period: i64,
    pub slots: u16,
    pub countries: u16,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            n_users: 1000,
            latent_dim: 4,
            graph_dim: 8,
            lang_dim: 8,
            ann_dim: 8,
            semantic_noise_std: 0.3,
            cold_start_fraction: 0.05,
            horizon: 16 * DAY,
            cutoff: 12 * DAY + 12 * HOUR,
            mean_gap: 1.5 * HOUR as f64,
            task_mix: [0.35, 0.35, 0.30],
            task_persistence: 0.75,
            browse_prob: 0.2,
            popularity_exponent: 1.0,
            high_value_threshold: 0.5,
            taste_sharpness: 8.0,
            task_a_noise: 0.2,
            task_b_chain_prob: 0.65,
            task_b_skip_prob: 0.1,
            task_c_bucket: DAY,
            task_c_weights: vec![0.8, 0.15, 0.05],
            task_c_period: 7,
            task_c_follow_prob: 0.95,
            new_release_boost: 6.0,
            new_release_period: 3 * DAY,
            slots: 4,
            countries: 3,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return config_err(format!("{name} must lie in [0, 1], got {p}"));
    }
    Ok(())
}

impl WorldConfig {
    /// The default world with a 200-title catalog, sized for CPU experiments.
    pub fn compact() -> Self {
        Self { vocab_size: 200, ..Self::default() }
    }

    pub fn semantic_dims(&self) -> SemanticDims {
        SemanticDims {
            graph: self.graph_dim,
            lang: self.lang_dim,
            ann: self.ann_dim,
        }
    }

    /// Number of titles launched after the cutoff (outside the vocabulary).
    pub fn n_cold(&self) -> usize {
        (self.cold_start_fraction * self.vocab_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return config_err("vocab_size must be at least 2");
        }
        if self.latent_dim == 0 || self.graph_dim == 0 || self.lang_dim == 0 || self.ann_dim == 0 {
            return config_err("latent and semantic dimensions must be at least 1");
        }
        if !(0.0..1.0).contains(&self.cold_start_fraction) {
            return config_err(format!(
                "cold_start_fraction must lie in [0, 1), got {}",
                self.cold_start_fraction
            ));
        }
        if self.vocab_size - self.n_cold() < 1 {
            return config_err("vocabulary would be empty after removing cold-start titles");
        }
        if self.horizon <= 0 {
            return config_err("horizon must be positive");
        }
        if self.cutoff <= 0 || self.cutoff > self.horizon {
            return config_err(format!(
                "cutoff {} outside horizon (0, {}]",
                self.cutoff, self.horizon
            ));
        }
        if self.mean_gap.is_nan() || self.mean_gap <= 0.0 {
            return config_err("mean_gap must be positive");
        }
        if self.task_mix.iter().any(|&p| p.is_nan() || p < 0.0) || self.task_mix.iter().sum::<f64>() <= 0.0
        {
            return config_err("task_mix must be non-negative with a positive sum");
        }
        for (name, p) in [
            ("browse_prob", self.browse_prob),
            ("task_persistence", self.task_persistence),
            ("high_value_threshold", self.high_value_threshold),
            ("task_a_noise", self.task_a_noise),
            ("task_b_chain_prob", self.task_b_chain_prob),
            ("task_b_skip_prob", self.task_b_skip_prob),
            ("task_c_follow_prob", self.task_c_follow_prob),
        ] {
            check_prob(name, p)?;
        }
        if self.task_b_chain_prob + self.task_b_skip_prob > 1.0 {
            return config_err("task_b_chain_prob + task_b_skip_prob must not exceed 1");
        }
        if self.task_c_bucket <= 0 || self.task_c_period == 0 {
            return config_err("task_c_bucket and task_c_period must be positive");
        }
        if self.task_c_weights.is_empty()
            || self.task_c_weights.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.task_c_weights.iter().sum::<f64>() <= 0.0
        {
            return config_err("task_c_weights must be non-negative with a positive sum");
        }
        if self.semantic_noise_std < 0.0 || self.taste_sharpness < 0.0 {
            return config_err("noise std and taste sharpness must be non-negative");
        }
        if self.new_release_boost < 1.0 || self.new_release_period < 0 {
            return config_err("new_release_boost must be >= 1 and the period non-negative");
        }
        if self.slots == 0 || self.countries == 0 {
            return config_err("slots and countries must be positive");
        }
        Ok(())
    }
}

/// Shannon entropy (nats) of the empirical item distribution of `items`.
pub fn empirical_entropy(items: impl IntoIterator<Item = u32>) -> f64 {
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    let mut n = 0usize;
    for it in items {
        *counts.entry(it).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}
