#![allow(dead_code)]

use genrec_core::backbone::{ModelConfig, ParamSet, Precision};
use genrec_core::cold_start::Candidate;
use genrec_core::decoder::{DecoderMode, Sampling};
use genrec_core::model::{batch_loss_and_grads, SequenceExample};
use genrec_core::backbone::EventToken;
use genrec_core::world::TitleSideInfo;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(mode: DecoderMode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 8,
        heads: 2,
        seq_len: 6,
        vocab: 12,
        embed_dim: 16,
        ffn_mult: 2,
        context_cards: vec![3, 2],
        feature_dim: 6,
        z_dim: 4,
        decoder_mode: mode,
        precision: Precision::F64,
    }
}

pub fn tiny_side(cold: &[usize], seed: u64) -> TitleSideInfo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TitleSideInfo {
        feature_dim: 6,
        features: (0..12 * 6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        in_vocab: (0..12).map(|i| !cold.contains(&i)).collect(),
    }
}

pub fn token(item: Option<u32>, masked: bool, a: u16, b: u16) -> EventToken {
    EventToken { item, masked, context: vec![a, b] }
}

pub fn cand(item: u32, oov: bool) -> Candidate {
    Candidate { item, oov }
}

/// Perturbs params so that layer-norm gains and biases are not at their
/// symmetric initial values.
pub fn jittered_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    p.for_each_mut(|_, _, t| {
        for v in &mut t.data {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    });
    p
}

fn get_mut(p: &mut ParamSet, tensor: usize) -> &mut Vec<f64> {
    let mut out = None;
    let mut i = 0;
    p.for_each_mut(|_, _, t| {
        if i == tensor {
            out = Some(&mut t.data);
        }
        i += 1;
    });
    out.unwrap()
}

/// Central finite differences on up to `per_tensor` entries of every tensor.
/// Returns the largest relative error `|fd − an| / max(|fd|, |an|, 1e-6)` and
/// the tensor name where it occurred.
pub fn max_relative_error(
    params: &ParamSet,
    analytic: &ParamSet,
    loss: impl Fn(&ParamSet) -> f64,
    per_tensor: usize,
    seed: u64,
) -> (f64, String) {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, usize)> = params.named().into_iter().map(|(n, _, t)| (n, t.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.named().into_iter().map(|(_, _, t)| t.data.clone()).collect();
    let mut worst = (0.0f64, String::new());
    for (ti, (name, len)) in names.iter().enumerate() {
        let picks: Vec<usize> = if *len <= per_tensor {
            (0..*len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..*len)).collect()
        };
        for idx in picks {
            let mut plus = params.clone();
            get_mut(&mut plus, ti)[idx] += h;
            let mut minus = params.clone();
            get_mut(&mut minus, ti)[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads[ti][idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{idx}] fd={fd:.3e} an={an:.3e}"));
            }
        }
    }
    worst
}

/// Finite-difference check of [`batch_loss_and_grads`] on fixed examples.
pub fn check_batch(
    config: &ModelConfig,
    side: &TitleSideInfo,
    examples: &[SequenceExample],
    sampling: Sampling,
    negative_mask: f64,
    seed: u64,
) -> (f64, String) {
    let params = jittered_params(config, seed);
    let analytic = batch_loss_and_grads(&params, config, side, examples, sampling, negative_mask, 99).unwrap();
    assert!(analytic.positions > 0);
    let loss = |p: &ParamSet| {
        batch_loss_and_grads(p, config, side, examples, sampling, negative_mask, 99).unwrap().loss
    };
    max_relative_error(&params, &analytic.grads, loss, 6, seed)
}

pub fn ntp_examples() -> Vec<SequenceExample> {
    vec![
        SequenceExample {
            tokens: vec![token(None, false, 0, 1), token(Some(3), false, 1, 0), token(Some(5), false, 2, 1), token(Some(1), false, 0, 0)],
            targets: vec![vec![(cand(3, false), 1.0)], vec![(cand(5, false), 1.0)], vec![], vec![(cand(7, false), 1.0)]],
        },
        SequenceExample {
            tokens: vec![token(Some(2), false, 1, 1), token(Some(8), false, 2, 0), token(Some(4), false, 0, 1)],
            targets: vec![vec![(cand(8, false), 1.0)], vec![(cand(4, false), 1.0)], vec![(cand(0, false), 1.0)]],
        },
    ]
}

pub fn mtp_examples() -> Vec<SequenceExample> {
    vec![SequenceExample {
        tokens: vec![token(None, false, 0, 1), token(Some(3), false, 1, 0), token(Some(5), false, 2, 1)],
        targets: vec![
            vec![(cand(3, false), 1.0), (cand(5, false), 0.5), (cand(9, false), 0.25)],
            vec![(cand(5, false), 1.0), (cand(5, false), 0.125)],
            vec![(cand(2, false), 0.7)],
        ],
    }]
}

/// Masked inputs, OOV-routed targets and cold titles (10, 11).
pub fn cold_examples() -> Vec<SequenceExample> {
    vec![SequenceExample {
        tokens: vec![token(Some(10), false, 0, 1), token(Some(3), true, 1, 0), token(Some(5), false, 2, 1), token(Some(11), false, 1, 1)],
        targets: vec![
            vec![(cand(3, true), 1.0)],
            vec![(cand(5, false), 1.0), (cand(11, true), 0.5)],
            vec![(cand(10, true), 1.0)],
            vec![(cand(6, true), 1.0)],
        ],
    }]
}
