mod common;

use common::*;
use genrec_core::decoder::{DecoderMode, Sampling};

const TOL: f64 = 1e-4;

#[test]
fn ntp_full_softmax_gradients() {
    for mode in [DecoderMode::Projected, DecoderMode::Full] {
        let (err, at) = check_batch(&tiny_config(mode), &tiny_side(&[10, 11], 1), &ntp_examples(), Sampling::None, 0.0, 3);
        assert!(err < TOL, "{mode:?}: {err:.3e} at {at}");
    }
}

#[test]
fn sampled_softmax_gradients() {
    let (err, at) = check_batch(
        &tiny_config(DecoderMode::Projected),
        &tiny_side(&[10, 11], 1),
        &ntp_examples(),
        Sampling::UniformFraction(0.4),
        0.0,
        4,
    );
    assert!(err < TOL, "{err:.3e} at {at}");
}

#[test]
fn mtp_gradients() {
    let (err, at) = check_batch(&tiny_config(DecoderMode::Projected), &tiny_side(&[10, 11], 1), &mtp_examples(), Sampling::None, 0.0, 5);
    assert!(err < TOL, "{err:.3e} at {at}");
}

#[test]
fn cold_start_gradients() {
    let (err, at) = check_batch(
        &tiny_config(DecoderMode::Projected),
        &tiny_side(&[10, 11], 1),
        &cold_examples(),
        Sampling::UniformFraction(0.5),
        0.3,
        6,
    );
    assert!(err < TOL, "{err:.3e} at {at}");
}

#[test]
fn backbone_without_adapters_gradients() {
    let mut cfg = tiny_config(DecoderMode::Projected);
    cfg.width = 16;
    let (err, at) = check_batch(&cfg, &tiny_side(&[10, 11], 1), &ntp_examples(), Sampling::None, 0.0, 7);
    assert!(err < TOL, "{err:.3e} at {at}");
}
