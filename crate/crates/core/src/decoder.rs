//! Item scoring and next-item cross-entropy.
//!
//! Supports the full softmax over every candidate title and a uniformly
//! sampled softmax that draws a fixed fraction of the catalog as negatives
//! (without replacement, rejecting positives). No LogQ correction is applied:
//! sampled logits are used as-is. In projected mode a single linear head maps
//! the hidden state from `embed_dim` to `embed_dim / 8` for every task.

use std::cell::Cell;
use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Linear, ParamSet};
use crate::cold_start::Candidate;
use crate::error::{config_err, Error, Result};
use crate::linalg::{axpy, dot, log_sum_exp};
use crate::rng::{stream, stream_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Full,
    Projected,
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DecoderMode::Full),
            "projected" => Ok(DecoderMode::Projected),
            _ => config_err(format!("unknown decoder mode '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "fraction")]
pub enum Sampling {
    None,
    UniformFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    pub sampling: Sampling,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { mode: DecoderMode::Projected, sampling: Sampling::UniformFraction(0.01) }
    }
}

impl DecoderConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Sampling::UniformFraction(f) = self.sampling {
            negative_count(vocab, f)?;
        }
        Ok(())
    }
}

/// `⌈fraction · vocab⌉`, rejecting fractions outside `(0, 1]` or below one draw.
pub fn negative_count(vocab: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config_err(format!("sampling fraction {fraction} outside (0, 1]"));
    }
    let expected = fraction * vocab as f64;
    if expected < 1.0 - 1e-12 {
        return config_err(format!("fraction {fraction} of vocabulary {vocab} draws fewer than one negative"));
    }
    Ok((expected - 1e-9).ceil() as usize)
}

/// The shared projected head `g_θ`: `h · W + b`, width `embed_dim / 8`.
pub fn project_head(h: &[f64], head: &Linear) -> Vec<f64> {
    head.apply(h)
}

/// User vector in scoring space: projected head output, or `h` itself in full mode.
pub fn user_vector(h: &[f64], params: &ParamSet) -> Vec<f64> {
    match &params.head {
        Some(head) => project_head(h, head),
        None => h.to_vec(),
    }
}

/// Backpropagates `d_user` through [`user_vector`], returning `dL/dh`.
pub fn user_vector_backward(h: &[f64], d_user: &[f64], params: &ParamSet, grads: &mut ParamSet) -> Vec<f64> {
    match (&params.head, &mut grads.head) {
        (Some(head), Some(ghead)) => {
            let k = head.fan_out();
            for (i, &hi) in h.iter().enumerate() {
                if hi != 0.0 {
                    axpy(hi, d_user, &mut ghead.w.data[i * k..(i + 1) * k]);
                }
            }
            axpy(1.0, d_user, &mut ghead.b.data);
            (0..head.fan_in()).map(|i| dot(&head.w.data[i * k..(i + 1) * k], d_user)).collect()
        }
        _ => d_user.to_vec(),
    }
}

/// Draws `count` distinct ids uniformly from `{0..vocab-1} \ excluded`.
///
/// Virtual Fisher–Yates over the allowed ids: swaps are recorded in a map so
/// memory is proportional to `count`, not `vocab`.
pub fn sample_without_replacement(vocab: usize, count: usize, excluded: &[u32], rng: &mut Rng) -> Vec<u32> {
    let mut excl: Vec<u32> = excluded.iter().copied().filter(|&x| (x as usize) < vocab).collect();
    excl.sort_unstable();
    excl.dedup();
    let pool = vocab - excl.len();
    let count = count.min(pool);
    // k-th allowed id, skipping the sorted exclusions.
    let allowed = |mut k: usize| -> u32 {
        for &x in &excl {
            if (x as usize) <= k {
                k += 1;
            } else {
                break;
            }
        }
        k as u32
    };
    let mut swaps: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let j = rng.random_range(i..pool);
        let vj = *swaps.get(&j).unwrap_or(&j);
        let vi = *swaps.get(&i).unwrap_or(&i);
        swaps.insert(j, vi);
        out.push(allowed(vj));
    }
    out
}

/// `⌈fraction·vocab⌉` negatives drawn without replacement, never equal to `target`.
pub fn sample_negatives(vocab: usize, fraction: f64, target: u32, seed: u64) -> Result<Vec<u32>> {
    if vocab < 2 {
        return config_err("negative sampling needs at least two titles");
    }
    let n = negative_count(vocab, fraction)?;
    let mut rng = stream_rng(seed, &[stream::NEGATIVES]);
    Ok(sample_without_replacement(vocab, n, &[target], &mut rng))
}

/// Source of scoring-space item vectors.
pub trait ItemVectorTable {
    fn dim(&self) -> usize;
    fn vector(&self, candidate: Candidate) -> &[f64];
}

/// Plain dense table addressed by item id, ignoring the route.
#[derive(Debug, Clone)]
pub struct DenseTable {
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl ItemVectorTable for DenseTable {
    fn dim(&self) -> usize {
        self.dim
    }
    fn vector(&self, c: Candidate) -> &[f64] {
        let i = c.item as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

thread_local! {
    static SCORE_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of candidate-set scoring passes run on this thread so far.
pub fn score_passes() -> u64 {
    SCORE_PASSES.with(|c| c.get())
}

/// Logits `s(u, c) = uᵀ v_c` for every candidate. One call is one decoding pass.
pub fn score_candidates<T: ItemVectorTable + ?Sized>(user: &[f64], candidates: &[Candidate], table: &T) -> Vec<f64> {
    SCORE_PASSES.with(|c| c.set(c.get() + 1));
    candidates.iter().map(|&c| dot(user, table.vector(c))).collect()
}

/// Loss and gradients with respect to the user vector and the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct XentGrad {
    pub loss: f64,
    pub d_user: Vec<f64>,
    pub d_logits: Vec<f64>,
}

/// `−Σ w_i log softmax(logits)[idx_i]` and its gradient w.r.t. the logits.
pub fn weighted_xent(logits: &[f64], targets: &[(usize, f64)]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let total_w: f64 = targets.iter().map(|&(_, w)| w).sum();
    let mut loss = 0.0;
    for &(i, w) in targets {
        loss -= w * (logits[i] - lse);
    }
    let mut d: Vec<f64> = logits.iter().map(|&l| total_w * (l - lse).exp()).collect();
    for &(i, w) in targets {
        d[i] -= w;
    }
    (loss, d)
}

/// Cross-entropy of a single target index.
pub fn softmax_xent(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    weighted_xent(logits, &[(target, 1.0)])
}

pub(crate) fn position_of(candidates: &[Candidate], target: Candidate) -> Result<usize> {
    candidates
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::Internal(format!("target {} missing from candidate set", target.item)))
}

/// Weighted multi-target cross-entropy over one shared candidate scoring.
pub fn weighted_candidate_loss<T: ItemVectorTable + ?Sized>(
    user: &[f64],
    targets: &[(Candidate, f64)],
    candidates: &[Candidate],
    table: &T,
) -> Result<XentGrad> {
    let idx = targets
        .iter()
        .map(|&(y, w)| position_of(candidates, y).map(|i| (i, w)))
        .collect::<Result<Vec<_>>>()?;
    let logits = score_candidates(user, candidates, table);
    let (loss, d_logits) = weighted_xent(&logits, &idx);
    let mut d_user = vec![0.0; user.len()];
    for (&c, &g) in candidates.iter().zip(&d_logits) {
        if g != 0.0 {
            axpy(g, table.vector(c), &mut d_user);
        }
    }
    Ok(XentGrad { loss, d_user, d_logits })
}

/// Next-item cross-entropy of `target` against `candidates`.
pub fn ntp_loss<T: ItemVectorTable + ?Sized>(
    user: &[f64],
    target: Candidate,
    candidates: &[Candidate],
    table: &T,
) -> Result<XentGrad> {
    weighted_candidate_loss(user, &[(target, 1.0)], candidates, table)
}

/// Adds `d_logit_c · u` into each candidate's vector gradient via `sink`.
pub fn item_vector_grads(user: &[f64], candidates: &[Candidate], d_logits: &[f64], mut sink: impl FnMut(Candidate, &[f64])) {
    let mut buf = vec![0.0; user.len()];
    for (&c, &g) in candidates.iter().zip(d_logits) {
        if g != 0.0 {
            for (b, &u) in buf.iter_mut().zip(user) {
                *b = g * u;
            }
            sink(c, &buf);
        }
    }
}

/// Candidate policy for one training position: the distinct positives first,
/// then either every other title of `pool` (the model vocabulary) or a
/// uniform sample of it excluding every positive title. Negatives are routed
/// by `route`.
pub fn training_candidates(
    pool: &[u32],
    positives: &[Candidate],
    sampling: Sampling,
    rng: &mut Rng,
    route: impl Fn(u32) -> Candidate,
) -> Result<Vec<Candidate>> {
    let mut out: Vec<Candidate> = Vec::with_capacity(positives.len());
    for &p in positives {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    let is_positive = |i: u32| positives.iter().any(|c| c.item == i);
    match sampling {
        Sampling::None => {
            out.extend(pool.iter().copied().filter(|&i| !is_positive(i)).map(&route));
        }
        Sampling::UniformFraction(f) => {
            let n = negative_count(pool.len(), f)?;
            let excluded: Vec<u32> = (0..pool.len() as u32).filter(|&j| is_positive(pool[j as usize])).collect();
            out.extend(
                sample_without_replacement(pool.len(), n, &excluded, rng)
                    .into_iter()
                    .map(|j| route(pool[j as usize])),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn cands(ids: &[u32]) -> Vec<Candidate> {
        ids.iter().map(|&item| Candidate { item, oov: false }).collect()
    }

    fn table(v: usize, k: usize, seed: u64) -> DenseTable {
        let mut rng = stream_rng(seed, &[]);
        DenseTable { dim: k, rows: (0..v * k).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn equal_logits_give_ln2() {
        let (loss, _) = softmax_xent(&[0.3, 0.3], 0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn exhaustive_fraction_returns_all_non_targets() {
        let mut got = sample_negatives(100, 0.99, 5, 1).unwrap();
        got.sort_unstable();
        let expected: Vec<u32> = (0..100).filter(|&i| i != 5).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn target_is_never_sampled() {
        for seed in 0..10_000u64 {
            let target = (seed % 50) as u32;
            let got = sample_negatives(50, 0.1, target, seed).unwrap();
            assert_eq!(got.len(), 5);
            assert!(!got.contains(&target));
            let mut d = got.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 5);
        }
    }

    #[test]
    fn too_small_fraction_is_config_error() {
        assert!(matches!(sample_negatives(50, 0.01, 0, 1), Err(Error::Config(_))));
        assert!(sample_negatives(50, 0.0, 0, 1).is_err());
        assert!(sample_negatives(50, 1.5, 0, 1).is_err());
    }

    #[test]
    fn full_candidate_set_matches_dense_softmax() {
        let t = table(50, 4, 3);
        let u = [0.4, -0.2, 1.1, 0.05];
        let all = cands(&(0..50).collect::<Vec<_>>());
        let got = ntp_loss(&u, Candidate { item: 17, oov: false }, &all, &t).unwrap();
        let logits: Vec<f64> = (0..50).map(|i| (0..4).map(|j| u[j] * t.rows[i * 4 + j]).sum()).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let expected = -(logits[17] - max - z.ln());
        assert!((got.loss - expected).abs() < 1e-6);
    }

    #[test]
    fn shift_invariance() {
        let logits = [0.1, 2.0, -1.0, 0.7];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 13.0).collect();
        assert!((softmax_xent(&logits, 2).0 - softmax_xent(&shifted, 2).0).abs() < 1e-12);
    }

    #[test]
    fn target_missing_is_internal_error() {
        let t = table(5, 2, 1);
        assert!(matches!(ntp_loss(&[1.0, 0.0], Candidate { item: 4, oov: false }, &cands(&[0, 1]), &t), Err(Error::Internal(_))));
    }

    #[test]
    fn projected_width_is_one_eighth() {
        use crate::backbone::{ModelConfig, ParamSet};
        let cfg = ModelConfig::desk(20, 6, vec![2]);
        let p = ParamSet::init(&cfg, 1);
        assert_eq!(user_vector(&vec![0.5; 32], &p).len(), 4);
        let mut head = p.head.clone().unwrap();
        head.b.data.iter_mut().for_each(|b| *b = 0.0);
        assert!(project_head(&[0.0; 32], &head).iter().all(|&v| v == 0.0));
        assert_eq!(4096 / crate::backbone::PROJ_FACTOR, 512);
    }

    #[test]
    fn score_counter_counts_passes() {
        let t = table(5, 2, 1);
        let before = score_passes();
        score_candidates(&[1.0, 1.0], &cands(&[0, 1, 2]), &t);
        assert_eq!(score_passes(), before + 1);
    }
}
