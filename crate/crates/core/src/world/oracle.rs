//! Bayes oracles computed from generator internals.
//!
//! These read hidden state (latent tastes, the successor map, the schedule)
//! and so are only usable on freshly generated worlds.

use super::generate::{is_available, schedule_window, user_seed};
use super::{DatasetPair, TaskCategory, TitleCatalog, UserProfile, WorldConfig};
use crate::error::{input_err, Result};

/// True distribution over all titles of the item of an engaged `task` event
/// at time `t`.
pub fn engaged_distribution(
    task: TaskCategory,
    t: i64,
    last_b: Option<u32>,
    profile: &UserProfile,
    catalog: &TitleCatalog,
    config: &WorldConfig,
) -> Result<Vec<f64>> {
    let Some(truth) = catalog.truth.as_ref() else {
        return input_err("catalog lacks generator internals");
    };
    let v = catalog.len();
    let taste: Vec<f64> = (0..v as u32)
        .map(|i| profile.taste_weight_at(catalog, i, t, config))
        .collect();
    let taste_total: f64 = taste.iter().sum();
    let available: Vec<bool> = (0..v as u32).map(|i| is_available(catalog, i, t)).collect();
    let n_avail = available.iter().filter(|&&a| a).count() as f64;

    let mut p = vec![0.0; v];
    let add_taste = |p: &mut [f64], mass: f64| {
        for (pi, w) in p.iter_mut().zip(&taste) {
            *pi += mass * w / taste_total;
        }
    };
    let add_uniform = |p: &mut [f64], mass: f64| {
        for (pi, &a) in p.iter_mut().zip(&available) {
            if a {
                *pi += mass / n_avail;
            }
        }
    };
    match task {
        TaskCategory::A => {
            add_uniform(&mut p, config.task_a_noise);
            add_taste(&mut p, 1.0 - config.task_a_noise);
        }
        TaskCategory::B => {
            let mut rest = 1.0;
            if let Some(prev) = last_b {
                let next = truth.successor[prev as usize];
                let skip = truth.successor[next as usize];
                if available[next as usize] {
                    p[next as usize] += config.task_b_chain_prob;
                    rest -= config.task_b_chain_prob;
                }
                if available[skip as usize] {
                    p[skip as usize] += config.task_b_skip_prob;
                    rest -= config.task_b_skip_prob;
                }
            }
            add_taste(&mut p, rest);
        }
        TaskCategory::C => {
            let window = schedule_window(truth, t, config);
            for &(id, w) in &window {
                p[id as usize] += config.task_c_follow_prob * w;
            }
            add_uniform(&mut p, 1.0 - config.task_c_follow_prob);
        }
    }
    Ok(p)
}

/// Reciprocal rank of `target` among `candidates` under `scores` (indexed by
/// title id), ties broken by ascending id.
pub(crate) fn reciprocal_rank_by_id(scores: &[f64], candidates: &[u32], target: u32) -> f64 {
    let st = scores[target as usize];
    let ahead = candidates
        .iter()
        .filter(|&&c| c != target)
        .filter(|&&c| {
            let sc = scores[c as usize];
            sc > st || (sc == st && c < target)
        })
        .count();
    1.0 / (ahead + 1) as f64
}

/// Bayes-oracle MRR per task (A, B, C) on the validation split: the target
/// is each user's first high-value in-vocabulary event of that task after
/// the cutoff, ranked among in-vocabulary titles by its true probability.
pub fn bayes_mrr(pair: &DatasetPair, config: &WorldConfig, seed: u64) -> Result<[f64; 3]> {
    let catalog = &pair.catalog;
    let candidates = catalog.in_vocab_ids();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (past, future) in pair.train.histories.iter().zip(&pair.validation.histories) {
        let profile = UserProfile::for_seed(user_seed(seed, past.user_id), catalog, config)?;
        for task in TaskCategory::ALL {
            let Some(pos) = future.events.iter().position(|e| {
                e.task == task && e.high_value && catalog.titles[e.item as usize].in_vocab
            }) else {
                continue;
            };
            let target = &future.events[pos];
            let last_b = past
                .events
                .iter()
                .chain(&future.events[..pos]).rfind(|e| e.task == TaskCategory::B && e.high_value)
                .map(|e| e.item);
            let p = engaged_distribution(task, target.timestamp, last_b, &profile, catalog, config)?;
            sums[task.index()] += reciprocal_rank_by_id(&p, &candidates, target.item);
            counts[task.index()] += 1;
        }
    }
    Ok(std::array::from_fn(|i| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::world::{generate_catalog, generate_dataset, sample_engaged_item, DAY};

    #[test]
    fn distribution_normalizes_and_matches_sampler() {
        let cfg = WorldConfig { vocab_size: 60, ..Default::default() };
        let cat = generate_catalog(&cfg, 9).unwrap();
        let profile = UserProfile::for_seed(17, &cat, &cfg).unwrap();
        let t = 13 * DAY;
        for task in TaskCategory::ALL {
            let p = engaged_distribution(task, t, Some(3), &profile, &cat, &cfg).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut rng = stream_rng(5, &[task.index() as u64]);
            let n = 40_000;
            let mut counts = vec![0usize; cat.len()];
            for _ in 0..n {
                counts[sample_engaged_item(task, t, Some(3), &profile, &cat, &cfg, &mut rng) as usize] += 1;
            }
            let tv: f64 = counts
                .iter()
                .zip(&p)
                .map(|(&c, &pi)| (c as f64 / n as f64 - pi).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.03, "task {task}: total variation {tv}");
        }
    }

    #[test]
    fn pure_noise_task_a_hits_harmonic_baseline() {
        // Monte Carlo oracle: uniform targets ranked under all-equal scores
        // with id tie-break give the harmonic baseline H_V / V.
        let cfg = WorldConfig {
            vocab_size: 100,
            cold_start_fraction: 0.0,
            task_a_noise: 1.0,
            ..Default::default()
        };
        let cat = generate_catalog(&cfg, 3).unwrap();
        let profile = UserProfile::for_seed(1, &cat, &cfg).unwrap();
        let candidates = cat.in_vocab_ids();
        let p = engaged_distribution(TaskCategory::A, DAY, None, &profile, &cat, &cfg).unwrap();
        let mut rng = stream_rng(77, &[]);
        let draws = 20_000;
        let mc: f64 = (0..draws)
            .map(|_| {
                let y = sample_engaged_item(TaskCategory::A, DAY, None, &profile, &cat, &cfg, &mut rng);
                reciprocal_rank_by_id(&p, &candidates, y)
            })
            .sum::<f64>()
            / draws as f64;
        let harmonic: f64 = (1..=100).map(|r| 1.0 / r as f64).sum::<f64>() / 100.0;
        assert!((mc - harmonic).abs() < 0.005, "mc {mc} vs harmonic {harmonic}");
    }

    #[test]
    fn bayes_ceilings_are_ordered() {
        let cfg = WorldConfig { vocab_size: 400, n_users: 150, ..Default::default() };
        for seed in [1, 2, 3] {
            let pair = generate_dataset(&cfg, seed).unwrap();
            let [a, b, c] = bayes_mrr(&pair, &cfg, seed).unwrap();
            assert!(a < b && b < c, "seed {seed}: A={a} B={b} C={c}");
        }
    }
}
