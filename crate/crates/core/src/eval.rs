//! Time-split ranking evaluation and staleness replay.
//!
//! Context is the history up to the cutoff; the target of a task slice is
//! the first high-value in-vocabulary event of that task after
//! `cutoff + δ`, ranked among all in-vocabulary titles. The cold-start slice
//! targets the first high-value event on an out-of-vocabulary title and ranks
//! all titles, scoring the cold ones through the OOV path. Ties are broken by
//! ascending item id. Consumed titles stay in the candidate set.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelConfig, ParamSet};
use crate::cold_start::{Candidate, ItemVectors};
use crate::decoder::score_candidates;
use crate::error::{config_err, input_err, Result};
use crate::model::{history_tokens, query_user_vectors, query_token};
use crate::world::{DatasetPair, TaskCategory, TitleSideInfo, HOUR};

/// Cutoff for Hit Rate and NDCG.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub rank: usize,
    pub mrr: f64,
    pub hit_rate: f64,
    pub ndcg: f64,
}

/// Rank of `target` (1-based) with ties broken by ascending id, and the
/// derived reciprocal rank, Hit@k and NDCG@k (log₂ discount).
pub fn rank_metrics(scores: &[f64], ids: &[u32], target: u32, k: usize) -> Result<RankMetrics> {
    if scores.len() != ids.len() {
        return input_err("scores and ids differ in length");
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if !ids.iter().all(|i| seen.insert(*i)) {
        return input_err("duplicate candidate ids");
    }
    if k == 0 || k > ids.len() {
        return input_err(format!("k = {k} outside 1..={}", ids.len()));
    }
    let Some(pos) = ids.iter().position(|&i| i == target) else {
        return input_err(format!("target {target} not among candidates"));
    };
    Ok(rank_unchecked(scores, ids, pos, k))
}

fn rank_unchecked(scores: &[f64], ids: &[u32], pos: usize, k: usize) -> RankMetrics {
    let (st, it) = (scores[pos], ids[pos]);
    let ahead = scores
        .iter()
        .zip(ids)
        .filter(|&(&s, &i)| s > st || (s == st && i < it))
        .count();
    let rank = ahead + 1;
    let hit = rank <= k;
    RankMetrics {
        rank,
        mrr: 1.0 / rank as f64,
        hit_rate: if hit { 1.0 } else { 0.0 },
        ndcg: if hit { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slice {
    Task(TaskCategory),
    ColdStart,
}

impl Slice {
    pub const ALL: [Slice; 4] = [
        Slice::Task(TaskCategory::A),
        Slice::Task(TaskCategory::B),
        Slice::Task(TaskCategory::C),
        Slice::ColdStart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Task(t) => t.as_str(),
            Slice::ColdStart => "cold_start",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "cold_start" {
            return Ok(Slice::ColdStart);
        }
        Ok(Slice::Task(s.parse()?))
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serving delays to replay, in seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessConfig {
    pub delays: Vec<i64>,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self { delays: vec![0, 24 * HOUR, 48 * HOUR] }
    }
}

impl StalenessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delays.first() != Some(&0) {
            return config_err("delay list must start at 0");
        }
        if self.delays.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("delays must be strictly increasing");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub slice: Slice,
    pub delay: i64,
    pub count: usize,
    pub mrr: f64,
    pub hit_rate: f64,
    pub ndcg: f64,
    /// `mrr / mrr(δ = 0) − 1` within the same slice.
    pub relative_mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    /// Contexts without a target at every delay, per slice.
    pub skipped: Vec<(Slice, usize)>,
    pub k: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn row(&self, slice: Slice, delay: i64) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.slice == slice && r.delay == delay)
    }

    pub fn mrr(&self, slice: Slice, delay: i64) -> Option<f64> {
        self.row(slice, delay).map(|r| r.mrr)
    }

    pub const CSV_HEADER: &'static str = "slice,delay_seconds,count,mrr,hit_rate,ndcg,relative_mrr";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.slice, r.delay, r.count, r.mrr, r.hit_rate, r.ndcg, r.relative_mrr
            )?;
        }
        Ok(())
    }
}

/// Digest of the model configuration plus any extra settings, for reports.
pub fn config_digest(config: &ModelConfig, extra: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).unwrap_or_default());
    h.update(serde_json::to_vec(extra).unwrap_or_default());
    hex::encode(&h.finalize()[..8])
}

/// One context to score: a user, a slice, the query task and one target per delay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub user: usize,
    pub slice: Slice,
    pub query_task: TaskCategory,
    pub targets: Vec<u32>,
}

/// Examples holding a target at every delay; the rest are counted as skipped.
pub fn build_examples(pair: &DatasetPair, delays: &[i64]) -> (Vec<EvalExample>, Vec<(Slice, usize)>) {
    let cutoff = pair.train.cutoff_time;
    let side_vocab: Vec<bool> = pair.catalog.titles.iter().map(|t| t.in_vocab).collect();
    let mut skipped = [0usize; 4];
    let mut out = Vec::new();
    for (u, hist) in pair.validation.histories.iter().enumerate() {
        for (si, slice) in Slice::ALL.iter().enumerate() {
            let matches = |e: &&crate::world::Event| {
                e.high_value
                    && match slice {
                        Slice::Task(t) => e.task == *t && side_vocab[e.item as usize],
                        Slice::ColdStart => !side_vocab[e.item as usize],
                    }
            };
            let mut targets = Vec::with_capacity(delays.len());
            let mut query_task = None;
            for &d in delays {
                match hist.events.iter().filter(|e| e.timestamp > cutoff + d).find(matches) {
                    Some(e) => {
                        query_task.get_or_insert(e.task);
                        targets.push(e.item);
                    }
                    None => break,
                }
            }
            if targets.len() == delays.len() && !delays.is_empty() {
                out.push(EvalExample { user: u, slice: *slice, query_task: query_task.unwrap(), targets });
            } else {
                skipped[si] += 1;
            }
        }
    }
    (out, Slice::ALL.iter().copied().zip(skipped).collect())
}

/// Per-example metrics at each delay, in example order.
pub fn score_examples(
    params: &ParamSet,
    config: &ModelConfig,
    pair: &DatasetPair,
    examples: &[EvalExample],
    k: usize,
) -> Result<Vec<Vec<RankMetrics>>> {
    let side = TitleSideInfo::from_catalog(&pair.catalog);
    let vectors = ItemVectors::build(params, &side)?;
    let cutoff = pair.train.cutoff_time;
    let in_vocab: Vec<Candidate> =
        (0..side.len() as u32).filter(|&i| side.in_vocab[i as usize]).map(|item| Candidate { item, oov: false }).collect();
    let all: Vec<Candidate> = (0..side.len() as u32).map(|i| Candidate::routed(i, false, &side)).collect();
    let in_vocab_ids: Vec<u32> = in_vocab.iter().map(|c| c.item).collect();
    let all_ids: Vec<u32> = all.iter().map(|c| c.item).collect();
    if k == 0 || k > in_vocab.len() {
        return config_err(format!("k = {k} exceeds the {} in-vocabulary candidates", in_vocab.len()));
    }

    // Group examples by user so the history prefix is encoded once.
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match groups.last_mut() {
            Some((u, idx)) if *u == ex.user => idx.push(i),
            _ => groups.push((ex.user, vec![i])),
        }
    }
    type Scored = Vec<(usize, Vec<RankMetrics>)>;
    let per_group: Vec<Result<Scored>> = groups
        .par_iter()
        .map(|(user, idx)| {
            let events = &pair.train.histories[*user].events;
            let keep = config.seq_len - 1;
            let start = events.len().saturating_sub(keep);
            let prefix = history_tokens(events, start, events.len(), None);
            let tasks: Vec<TaskCategory> = idx.iter().map(|&i| examples[i].query_task).collect();
            let queries: Vec<_> = tasks.iter().map(|&t| query_token(events, t, cutoff)).collect();
            let users = query_user_vectors(params, config, &side, &prefix, &queries)?;
            let mut out = Vec::with_capacity(idx.len());
            for (&i, u) in idx.iter().zip(&users) {
                let ex = &examples[i];
                let (cands, ids) = match ex.slice {
                    Slice::Task(_) => (&in_vocab, &in_vocab_ids),
                    Slice::ColdStart => (&all, &all_ids),
                };
                let scores = score_candidates(u, cands, &vectors);
                let metrics = ex
                    .targets
                    .iter()
                    .map(|&t| {
                        let pos = ids.binary_search(&t).map_err(|_| {
                            crate::Error::Input(format!("target {t} not among candidates"))
                        })?;
                        Ok(rank_unchecked(&scores, ids, pos, k))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push((i, metrics));
            }
            Ok(out)
        })
        .collect();
    let mut result = vec![Vec::new(); examples.len()];
    for g in per_group {
        for (i, m) in g? {
            result[i] = m;
        }
    }
    Ok(result)
}

/// Aggregates per-example metrics into report rows, in slice then delay order.
pub fn aggregate(examples: &[EvalExample], metrics: &[Vec<RankMetrics>], delays: &[i64]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for slice in Slice::ALL {
        let members: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].slice == slice).collect();
        if members.is_empty() {
            continue;
        }
        let mut base = f64::NAN;
        for (di, &delay) in delays.iter().enumerate() {
            let n = members.len() as f64;
            let mut sums = [0.0; 3];
            for &i in &members {
                let m = &metrics[i][di];
                sums[0] += m.mrr;
                sums[1] += m.hit_rate;
                sums[2] += m.ndcg;
            }
            let mrr = sums[0] / n;
            if di == 0 {
                base = mrr;
            }
            rows.push(MetricRow {
                slice,
                delay,
                count: members.len(),
                mrr,
                hit_rate: sums[1] / n,
                ndcg: sums[2] / n,
                relative_mrr: mrr / base - 1.0,
            });
        }
    }
    rows
}

/// Evaluates at the cutoff without staleness (delay 0 only).
pub fn evaluate(params: &ParamSet, config: &ModelConfig, pair: &DatasetPair, seed: u64) -> Result<EvalReport> {
    replay_staleness(params, config, pair, &StalenessConfig { delays: vec![0] }, seed)
}

/// Replays evaluation at each serving delay over one fixed population: the
/// contexts that have a target at every delay.
pub fn replay_staleness(
    params: &ParamSet,
    config: &ModelConfig,
    pair: &DatasetPair,
    staleness: &StalenessConfig,
    seed: u64,
) -> Result<EvalReport> {
    staleness.validate()?;
    let max_delay = *staleness.delays.last().unwrap();
    let horizon_end = pair
        .validation
        .histories
        .iter()
        .filter_map(|h| h.events.last().map(|e| e.timestamp))
        .max()
        .unwrap_or(pair.train.cutoff_time);
    if horizon_end <= pair.train.cutoff_time + max_delay {
        return config_err(format!("no events after cutoff + {max_delay} s; the dataset horizon is too short"));
    }
    let (examples, skipped) = build_examples(pair, &staleness.delays);
    let metrics = score_examples(params, config, pair, &examples, DEFAULT_K)?;
    Ok(EvalReport {
        rows: aggregate(&examples, &metrics, &staleness.delays),
        skipped,
        k: DEFAULT_K,
        seed,
        config_digest: config_digest(config, &serde_json::json!({ "delays": staleness.delays })),
    })
}
