use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use super::{
    Dataset, Event, Split, TaskCategory, Title, TitleCatalog, UserHistory,
    WorldConfig, WorldTruth, DAY,
};
use crate::error::{config_err, input_err, Result};
use crate::rng::{derive_seed, stream, stream_rng, Rng};

const FEATURE_SCALE: f64 = 1e6;

fn quantize(x: f64) -> f64 {
    (x * FEATURE_SCALE).round() / FEATURE_SCALE
}

fn unit_normal(rng: &mut Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()
}

fn noisy_projection(rng: &mut Rng, m: &[f64], rows: usize, taste: &[f64], std: f64) -> Vec<f64> {
    let k = taste.len();
    (0..rows)
        .map(|r| {
            let signal: f64 = (0..k).map(|c| m[r * k + c] * taste[c]).sum();
            let noise: f64 = rng.sample(StandardNormal);
            quantize(signal + std * noise)
        })
        .collect()
}

/// Builds the title universe and the global generator internals.
pub fn generate_catalog(config: &WorldConfig, seed: u64) -> Result<TitleCatalog> {
    config.validate()?;
    let mut rng = stream_rng(seed, &[stream::CATALOG]);
    let v = config.vocab_size;
    let k = config.latent_dim;
    let dims = config.semantic_dims();

    let graph_m = gaussian_matrix(&mut rng, dims.graph, k);
    let lang_m = gaussian_matrix(&mut rng, dims.lang, k);
    let ann_m = gaussian_matrix(&mut rng, dims.ann, k);

    let mut cold = vec![false; v];
    for i in rand::seq::index::sample(&mut rng, v, config.n_cold()) {
        cold[i] = true;
    }

    let mut titles = Vec::with_capacity(v);
    for (id, &is_cold) in cold.iter().enumerate() {
        let taste = unit_normal(&mut rng, k);
        let launch_time = if is_cold {
            config.cutoff + 1 + rng.random_range(0..2 * DAY)
        } else {
            -rng.random_range(0..365 * DAY)
        };
        titles.push(Title {
            id: id as u32,
            launch_time,
            in_vocab: !is_cold,
            graph_vec: noisy_projection(&mut rng, &graph_m, dims.graph, &taste, config.semantic_noise_std),
            lang_vec: noisy_projection(&mut rng, &lang_m, dims.lang, &taste, config.semantic_noise_std),
            ann_vec: noisy_projection(&mut rng, &ann_m, dims.ann, &taste, config.semantic_noise_std),
            latent_taste: taste,
        });
    }

    let truth = generate_truth(&titles, config, seed);
    Ok(TitleCatalog { titles, dims, truth: Some(truth) })
}

fn generate_truth(titles: &[Title], config: &WorldConfig, seed: u64) -> WorldTruth {
    let mut rng = stream_rng(seed, &[stream::SCHEDULE]);
    let v = titles.len();

    let mut cycle: Vec<u32> = (0..v as u32).collect();
    cycle.shuffle(&mut rng);
    let mut successor = vec![0u32; v];
    for i in 0..v {
        successor[cycle[i] as usize] = cycle[(i + 1) % v];
    }

    let in_vocab: Vec<u32> = titles.iter().filter(|t| t.in_vocab).map(|t| t.id).collect();
    let mut schedule = in_vocab.clone();
    schedule.shuffle(&mut rng);
    let mut popularity_order = in_vocab;
    popularity_order.shuffle(&mut rng);

    let weights: Vec<f64> = (0..popularity_order.len())
        .map(|r| 1.0 / ((r + 1) as f64).powf(config.popularity_exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let popularity_cdf = weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect();

    WorldTruth { successor, schedule, popularity_order, popularity_cdf }
}

/// Per-user hidden state: latent taste, home country and the taste weight of
/// every title.
#[derive(Debug, Clone)]
pub struct UserProfile {
    pub taste: Vec<f64>,
    pub country: u16,
    /// `exp(sharpness · cos(user, title))` for every title id.
    pub taste_weight: Vec<f64>,
    in_vocab: Vec<u32>,
    in_vocab_cdf: Vec<f64>,
    cold: Vec<(u32, i64)>,
}

impl UserProfile {
    fn draw(rng: &mut Rng, catalog: &TitleCatalog, config: &WorldConfig) -> Result<Self> {
        let k = config.latent_dim;
        if catalog.titles.iter().any(|t| t.latent_taste.len() != k) {
            return input_err("catalog lacks generator internals (latent taste)");
        }
        let taste = unit_normal(rng, k);
        let country = (rng.next_u32() % config.countries as u32) as u16;
        let taste_weight: Vec<f64> = catalog
            .titles
            .iter()
            .map(|t| {
                let cos: f64 = t.latent_taste.iter().zip(&taste).map(|(a, b)| a * b).sum();
                (config.taste_sharpness * cos).exp()
            })
            .collect();
        let mut in_vocab = Vec::new();
        let mut in_vocab_cdf = Vec::new();
        let mut cold = Vec::new();
        let mut acc = 0.0;
        for t in &catalog.titles {
            if t.in_vocab {
                acc += taste_weight[t.id as usize];
                in_vocab.push(t.id);
                in_vocab_cdf.push(acc);
            } else {
                cold.push((t.id, t.launch_time));
            }
        }
        Ok(Self { taste, country, taste_weight, in_vocab, in_vocab_cdf, cold })
    }

    /// Recomputes the profile of a user from its seed (oracle access).
    pub fn for_seed(user_seed: u64, catalog: &TitleCatalog, config: &WorldConfig) -> Result<Self> {
        let mut rng = Rng::from_seed_u64(user_seed);
        Self::draw(&mut rng, catalog, config)
    }

    fn boost(&self, launch: i64, t: i64, config: &WorldConfig) -> f64 {
        if t - launch < config.new_release_period {
            config.new_release_boost
        } else {
            1.0
        }
    }

    /// Unnormalized taste weight of title `id` at time `t` (zero if the
    /// title has not launched yet).
    pub fn taste_weight_at(&self, catalog: &TitleCatalog, id: u32, t: i64, config: &WorldConfig) -> f64 {
        let title = &catalog.titles[id as usize];
        if title.launch_time > t {
            0.0
        } else if title.in_vocab {
            self.taste_weight[id as usize]
        } else {
            self.taste_weight[id as usize] * self.boost(title.launch_time, t, config)
        }
    }

    fn taste_draw(&self, rng: &mut Rng, t: i64, config: &WorldConfig) -> u32 {
        let in_total = *self.in_vocab_cdf.last().unwrap_or(&0.0);
        let cold_total: f64 = self
            .cold
            .iter()
            .filter(|(_, launch)| *launch <= t)
            .map(|&(id, launch)| self.taste_weight[id as usize] * self.boost(launch, t, config))
            .sum();
        let u = rng.random::<f64>() * (in_total + cold_total);
        if u < in_total || cold_total == 0.0 {
            let idx = self.in_vocab_cdf.partition_point(|&c| c <= u).min(self.in_vocab.len() - 1);
            return self.in_vocab[idx];
        }
        let mut rest = u - in_total;
        let mut last = self.in_vocab[0];
        for &(id, launch) in self.cold.iter().filter(|(_, l)| *l <= t) {
            let w = self.taste_weight[id as usize] * self.boost(launch, t, config);
            last = id;
            if rest < w {
                return id;
            }
            rest -= w;
        }
        last
    }

    fn uniform_available(&self, rng: &mut Rng, t: i64) -> u32 {
        let launched_cold = self.cold.iter().filter(|(_, l)| *l <= t).count();
        let n = self.in_vocab.len() + launched_cold;
        let idx = rng.random_range(0..n);
        if idx < self.in_vocab.len() {
            self.in_vocab[idx]
        } else {
            self.cold
                .iter()
                .filter(|(_, l)| *l <= t)
                .nth(idx - self.in_vocab.len())
                .map(|&(id, _)| id)
                .unwrap_or(self.in_vocab[0])
        }
    }
}

trait SeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedU64 for Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}

/// Task-C availability window at time `t` with normalized emission weights.
pub(crate) fn schedule_window(truth: &WorldTruth, t: i64, config: &WorldConfig) -> Vec<(u32, f64)> {
    let bucket = t.div_euclid(config.task_c_bucket) as usize;
    let len = truth.schedule.len().min(config.task_c_period);
    let total: f64 = config.task_c_weights.iter().sum();
    config
        .task_c_weights
        .iter()
        .enumerate()
        .map(|(j, w)| (truth.schedule[(bucket + j) % len], w / total))
        .collect()
}

pub(crate) fn is_available(catalog: &TitleCatalog, id: u32, t: i64) -> bool {
    catalog.titles[id as usize].launch_time <= t
}

/// Draws the item of an engaged (high-value) event of `task` at time `t`.
/// `last_b` is the item of the user's previous engaged Task-B event.
pub fn sample_engaged_item(
    task: TaskCategory,
    t: i64,
    last_b: Option<u32>,
    profile: &UserProfile,
    catalog: &TitleCatalog,
    config: &WorldConfig,
    rng: &mut Rng,
) -> u32 {
    let truth = catalog.truth.as_ref().expect("generator internals present");
    match task {
        TaskCategory::A => {
            if rng.random::<f64>() < config.task_a_noise {
                profile.uniform_available(rng, t)
            } else {
                profile.taste_draw(rng, t, config)
            }
        }
        TaskCategory::B => {
            let u = rng.random::<f64>();
            if let Some(prev) = last_b {
                let next = truth.successor[prev as usize];
                let skip = truth.successor[next as usize];
                if u < config.task_b_chain_prob && is_available(catalog, next, t) {
                    return next;
                }
                if u >= config.task_b_chain_prob
                    && u < config.task_b_chain_prob + config.task_b_skip_prob
                    && is_available(catalog, skip, t)
                {
                    return skip;
                }
            }
            profile.taste_draw(rng, t, config)
        }
        TaskCategory::C => {
            if rng.random::<f64>() < config.task_c_follow_prob {
                let window = schedule_window(truth, t, config);
                let mut u = rng.random::<f64>();
                let mut pick = window[window.len() - 1].0;
                for &(id, w) in &window {
                    if u < w {
                        pick = id;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                profile.uniform_available(rng, t)
            }
        }
    }
}

fn sample_task(rng: &mut Rng, mix: &[f64; 3]) -> TaskCategory {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in mix.iter().enumerate() {
        if u < p {
            return TaskCategory::ALL[i];
        }
        u -= p;
    }
    TaskCategory::C
}

fn popularity_draw(rng: &mut Rng, truth: &WorldTruth) -> u32 {
    let u = rng.random::<f64>();
    let idx = truth
        .popularity_cdf
        .partition_point(|&c| c <= u)
        .min(truth.popularity_order.len() - 1);
    truth.popularity_order[idx]
}

/// Generates one user's event stream over `(0, horizon]`.
pub fn generate_history(
    user_id: u32,
    user_seed: u64,
    catalog: &TitleCatalog,
    horizon: i64,
    config: &WorldConfig,
) -> Result<Vec<Event>> {
    if horizon <= 0 {
        return config_err("horizon must be positive");
    }
    let Some(truth) = catalog.truth.as_ref() else {
        return input_err("catalog lacks generator internals");
    };
    let mut rng = Rng::from_seed_u64(user_seed);
    let profile = UserProfile::draw(&mut rng, catalog, config)?;
    let gaps = Exp::new(1.0 / config.mean_gap).map_err(|e| crate::Error::Config(e.to_string()))?;
    let thr = config.high_value_threshold;

    let mut events = Vec::new();
    let mut t = 0i64;
    let mut last_b = None;
    let mut last_task = None;
    loop {
        let gap: f64 = gaps.sample(&mut rng);
        t += (gap.round() as i64).max(1);
        if t > horizon {
            break;
        }
        let task = match last_task {
            Some(prev) if rng.random::<f64>() < config.task_persistence => prev,
            _ => sample_task(&mut rng, &config.task_mix),
        };
        last_task = Some(task);
        let slot = (rng.next_u32() % config.slots as u32) as u16;
        let browse = rng.random::<f64>() < config.browse_prob;
        let (item, reward) = if browse {
            (popularity_draw(&mut rng, truth), rng.random::<f64>() * thr)
        } else {
            let item = sample_engaged_item(task, t, last_b, &profile, catalog, config, &mut rng);
            (item, thr + rng.random::<f64>() * (1.0 - thr))
        };
        if !browse && task == TaskCategory::B {
            last_b = Some(item);
        }
        events.push(Event {
            user_id,
            item,
            timestamp: t,
            reward,
            high_value: reward >= thr,
            context: vec![slot, profile.country],
            task,
        });
    }
    Ok(events)
}

pub fn user_seed(seed: u64, user_id: u32) -> u64 {
    derive_seed(seed, &[stream::USER, user_id as u64])
}

/// Catalog plus the train/validation split of one generated world.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub catalog: Arc<TitleCatalog>,
    pub train: Dataset,
    pub validation: Dataset,
    pub warnings: Vec<String>,
}

/// Generates a full world: catalog, every user's stream, and the time split
/// at `config.cutoff`.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<DatasetPair> {
    config.validate()?;
    if config.n_users == 0 {
        return config_err("n_users must be at least 1");
    }
    let catalog = Arc::new(generate_catalog(config, seed)?);
    let streams: Vec<Vec<Event>> = (0..config.n_users as u32)
        .into_par_iter()
        .map(|uid| generate_history(uid, user_seed(seed, uid), &catalog, config.horizon, config))
        .collect::<Result<_>>()?;

    let mut train = Vec::with_capacity(streams.len());
    let mut validation = Vec::with_capacity(streams.len());
    for (uid, events) in streams.into_iter().enumerate() {
        let split = events.partition_point(|e| e.timestamp <= config.cutoff);
        let mut events = events;
        let future = events.split_off(split);
        train.push(UserHistory { user_id: uid as u32, events });
        validation.push(UserHistory { user_id: uid as u32, events: future });
    }

    let mut warnings = Vec::new();
    if validation.iter().all(|h| h.events.is_empty()) {
        warnings.push("validation split is empty: cutoff leaves no future events".to_string());
    }
    if train.iter().all(|h| h.events.is_empty()) {
        warnings.push("training split is empty".to_string());
    }

    Ok(DatasetPair {
        train: Dataset {
            catalog: Arc::clone(&catalog),
            histories: train,
            cutoff_time: config.cutoff,
            split: Split::Train,
        },
        validation: Dataset {
            catalog: Arc::clone(&catalog),
            histories: validation,
            cutoff_time: config.cutoff,
            split: Split::Validation,
        },
        catalog,
        warnings,
    })
}
