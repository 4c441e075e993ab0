//! Event-sequence encoding and the batched training loss.
//!
//! The token at position `t` carries the previous event (its item, task and
//! whether it was high-value; none at the start of a history) and the
//! request context of event `t`: task, slot, country, a log-scale bucket
//! of the time since the previous event and the weekday. The hidden state at `t` therefore
//! predicts what the user does at event `t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward, embed_backward, embed_events, forward_extend, forward_with_cache, EventToken, GradSet, ModelConfig,
    ParamSet,
};
use crate::cold_start::{Candidate, ItemVectorGrads, ItemVectors, MaskFlags};
use crate::decoder::{item_vector_grads, training_candidates, user_vector, user_vector_backward, weighted_candidate_loss, Sampling};
use crate::error::{config_err, Error, Result};
use crate::rng::{stream_rng, stream};
use crate::world::{Event, TaskCategory, TitleSideInfo, DAY, HOUR};

/// Upper edges of the inter-event gap buckets; one more bucket holds longer
/// gaps and the start of a history.
pub const GAP_EDGES: [i64; 5] = [HOUR, 3 * HOUR, 8 * HOUR, DAY, 3 * DAY];
pub const GAP_BUCKETS: usize = GAP_EDGES.len() + 1;

pub fn gap_bucket(gap: Option<i64>) -> u16 {
    match gap {
        Some(g) => GAP_EDGES.iter().position(|&edge| g < edge).unwrap_or(GAP_EDGES.len()) as u16,
        None => GAP_EDGES.len() as u16,
    }
}

pub fn weekday(t: i64) -> u16 {
    t.div_euclid(DAY).rem_euclid(7) as u16
}

/// Cardinalities of the token context fields
/// `[task, slot, country, gap, previous task, previous value, weekday]`.
pub fn context_cards(slots: u16, countries: u16) -> Vec<usize> {
    let tasks = TaskCategory::ALL.len();
    vec![tasks, slots as usize, countries as usize, GAP_BUCKETS, tasks + 1, 3, 7]
}

fn previous_fields(prev: Option<&Event>) -> [u16; 2] {
    match prev {
        Some(p) => [p.task.index() as u16, p.high_value as u16],
        None => [TaskCategory::ALL.len() as u16, 2],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ntp,
    Mtp,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntp" => Ok(Objective::Ntp),
            "mtp" => Ok(Objective::Mtp),
            _ => config_err(format!("unknown objective '{s}'")),
        }
    }
}

/// Tokens for `events[start..end]`; `input_masks[i]` applies to `events[start + i]`'s
/// role as the previous item of the next token.
pub fn history_tokens(events: &[Event], start: usize, end: usize, input_masks: Option<&[MaskFlags]>) -> Vec<EventToken> {
    (start..end)
        .map(|t| {
            let ev = &events[t];
            let prev = t.checked_sub(1).map(|p| &events[p]);
            let masked = match (prev, input_masks) {
                (Some(_), Some(m)) if t > start => m[t - 1 - start].input,
                _ => false,
            };
            let [prev_task, prev_value] = previous_fields(prev);
            EventToken {
                item: prev.map(|p| p.item),
                masked,
                context: vec![
                    ev.task.index() as u16,
                    ev.context[0],
                    ev.context[1],
                    gap_bucket(prev.map(|p| ev.timestamp - p.timestamp)),
                    prev_task,
                    prev_value,
                    weekday(ev.timestamp),
                ],
            }
        })
        .collect()
}

/// The request token issued at `t_query` for task `task` after `history`.
pub fn query_token(history: &[Event], task: TaskCategory, t_query: i64) -> EventToken {
    let last = history.last();
    let [prev_task, prev_value] = previous_fields(last);
    EventToken {
        item: last.map(|e| e.item),
        masked: false,
        context: vec![
            task.index() as u16,
            0,
            last.map(|e| e.context[1]).unwrap_or(0),
            gap_bucket(last.map(|e| t_query - e.timestamp)),
            prev_task,
            prev_value,
            weekday(t_query),
        ],
    }
}

/// One training window: tokens plus weighted targets per position (empty
/// positions are not supervised).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub tokens: Vec<EventToken>,
    pub targets: Vec<Vec<(Candidate, f64)>>,
}

impl SequenceExample {
    pub fn supervised_positions(&self) -> usize {
        self.targets.iter().filter(|t| !t.is_empty()).count()
    }
}

struct ExampleGrads {
    loss_sum: f64,
    positions: usize,
    grads: GradSet,
    item_grads: ItemVectorGrads,
}

#[allow(clippy::too_many_arguments)]
fn example_loss_and_grads(
    params: &ParamSet,
    config: &ModelConfig,
    side: &TitleSideInfo,
    vectors: &ItemVectors,
    pool: &[u32],
    ex: &SequenceExample,
    sampling: Sampling,
    negative_mask: f64,
    neg_seed: u64,
) -> Result<ExampleGrads> {
    let e = config.embed_dim;
    let x = embed_events(&ex.tokens, params, config, side)?;
    let (hidden, cache) = forward_with_cache(params, config, &x)?;
    let mut grads = params.zeros_like();
    let mut item_grads = vectors.grad_buffer();
    let mut d_hidden = vec![0.0; hidden.data.len()];
    let mut loss_sum = 0.0;
    let mut positions = 0;
    for (t, targets) in ex.targets.iter().enumerate() {
        if targets.is_empty() {
            continue;
        }
        let h = hidden.row(t);
        let u = user_vector(h, params);
        let positives: Vec<Candidate> = targets.iter().map(|&(c, _)| c).collect();
        let mut rng = stream_rng(neg_seed, &[t as u64]);
        let candidates = training_candidates(pool, &positives, sampling, &mut rng, |i| {
            let masked = negative_mask > 0.0 && unit_draw(neg_seed, t, i) < negative_mask;
            Candidate::routed(i, masked, side)
        })?;
        let g = weighted_candidate_loss(&u, targets, &candidates, vectors)?;
        if !g.loss.is_finite() {
            return Err(Error::Numeric { layer: config.layers, detail: "non-finite loss".into() });
        }
        loss_sum += g.loss;
        positions += 1;
        item_vector_grads(&u, &candidates, &g.d_logits, |c, gv| item_grads.add(c, gv));
        let dh = user_vector_backward(h, &g.d_user, params, &mut grads);
        d_hidden[t * e..(t + 1) * e].copy_from_slice(&dh);
    }
    if positions > 0 {
        let d_tokens = backward(params, config, &cache, &d_hidden, &mut grads);
        embed_backward(&ex.tokens, &d_tokens, side, &mut grads);
    }
    Ok(ExampleGrads { loss_sum, positions, grads, item_grads })
}

/// Uniform `[0, 1)` draw keyed by (example stream, position, title).
fn unit_draw(neg_seed: u64, t: usize, item: u32) -> f64 {
    let bits = crate::rng::derive_seed(neg_seed, &[stream::MASK, t as u64, item as u64]);
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Mean loss over supervised positions and its gradient.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub positions: usize,
    pub grads: GradSet,
}

/// Loss and gradients of a batch of windows. Examples are processed in
/// parallel and their gradients merged in example order, so results do not
/// depend on the thread count. Negatives for example `b`, position `t` come
/// from the stream `(seed, b, t)`; each negative is scored through the OOV
/// route with probability `negative_mask`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grads(
    params: &ParamSet,
    config: &ModelConfig,
    side: &TitleSideInfo,
    examples: &[SequenceExample],
    sampling: Sampling,
    negative_mask: f64,
    seed: u64,
) -> Result<BatchLoss> {
    let vectors = ItemVectors::build(params, side)?;
    let pool: Vec<u32> = (0..side.len() as u32).filter(|&i| side.in_vocab[i as usize]).collect();
    let parts: Vec<Result<ExampleGrads>> = examples
        .par_iter()
        .enumerate()
        .map(|(b, ex)| {
            let neg_seed = crate::rng::derive_seed(seed, &[stream::NEGATIVES, b as u64]);
            example_loss_and_grads(params, config, side, &vectors, &pool, ex, sampling, negative_mask, neg_seed)
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut item_grads = vectors.grad_buffer();
    let mut loss_sum = 0.0;
    let mut positions = 0;
    for part in parts {
        let part = part?;
        loss_sum += part.loss_sum;
        positions += part.positions;
        grads.add_assign(&part.grads);
        item_grads.merge(&part.item_grads);
    }
    if positions == 0 {
        return Ok(BatchLoss { loss: 0.0, positions, grads });
    }
    let inv = 1.0 / positions as f64;
    grads.scale(inv);
    item_grads.scale(inv);
    vectors.backward(&item_grads, params, side, &mut grads);
    Ok(BatchLoss { loss: loss_sum * inv, positions, grads })
}

/// Scoring-space user vectors for several alternative final tokens appended
/// to a shared prefix. An empty prefix is allowed.
pub fn query_user_vectors(
    params: &ParamSet,
    config: &ModelConfig,
    side: &TitleSideInfo,
    prefix: &[EventToken],
    queries: &[EventToken],
) -> Result<Vec<Vec<f64>>> {
    let q = embed_events(queries, params, config, side)?;
    let e = config.embed_dim;
    if prefix.is_empty() {
        return q
            .chunks(e)
            .map(|row| {
                let (h, _) = forward_with_cache(params, config, row)?;
                Ok(user_vector(h.row(0), params))
            })
            .collect();
    }
    let x = embed_events(prefix, params, config, side)?;
    let (_, cache) = forward_with_cache(params, config, &x)?;
    q.chunks(e)
        .map(|row| Ok(user_vector(&forward_extend(params, config, &cache, row)?, params)))
        .collect()
}

/// Negative-sampling stream for a training step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    crate::rng::derive_seed(seed, &[stream::NEGATIVES, step])
}
