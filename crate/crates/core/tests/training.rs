use genrec_core::backbone::{load_checkpoint, save_checkpoint};
use genrec_core::decoder::{DecoderMode, Sampling};
use genrec_core::eval::evaluate;
use genrec_core::model::{batch_loss_and_grads, context_cards, step_seed, Objective};
use genrec_core::mtp::RewardWeighting;
use genrec_core::train::{sweep, train, Corpus, LadderSpec, TrainConfig};
use genrec_core::world::generate_dataset;
use genrec_core::{DatasetPair, Error, ModelConfig, ParamSet, TaskCategory, WorldConfig};

fn small_world(seed: u64) -> (WorldConfig, DatasetPair) {
    let wc = WorldConfig { vocab_size: 100, n_users: 150, ..WorldConfig::compact() };
    let pair = generate_dataset(&wc, seed).unwrap();
    (wc, pair)
}

fn small_model(wc: &WorldConfig) -> ModelConfig {
    ModelConfig {
        width: 16,
        layers: 1,
        seq_len: 16,
        decoder_mode: DecoderMode::Full,
        ..ModelConfig::desk(wc.vocab_size, wc.semantic_dims().total(), context_cards(wc.slots, wc.countries))
    }
}

fn cfg(steps: usize, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig { steps, eval_every: 0, seed, ..TrainConfig::default() };
    tc.set("decoder.mode", "full").unwrap();
    tc.set("decoder.sampling", "0.2").unwrap();
    tc
}

fn bits(p: &ParamSet) -> Vec<u64> {
    p.named().into_iter().flat_map(|(_, _, t)| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn zero_steps_returns_initialization() {
    let (wc, pair) = small_world(1);
    let model = small_model(&wc);
    let out = train(&model, &cfg(0, 7), &pair).unwrap();
    let mut init = ParamSet::init(&model, 7);
    model.precision.round_params(&mut init);
    assert_eq!(bits(&out.checkpoint.params), bits(&init));
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn five_hundred_steps_cut_loss_by_a_fifth() {
    let (wc, pair) = small_world(2);
    let model = small_model(&wc);
    let out = train(&model, &cfg(500, 3), &pair).unwrap();
    let losses: Vec<f64> = out.log.values("train", "all", "loss").into_iter().map(|(_, v)| v).collect();
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail <= 0.8 * head, "loss {head:.3} -> {tail:.3}");
}

#[test]
fn same_seed_same_log_and_checkpoint_roundtrip() {
    let (wc, pair) = small_world(3);
    let model = small_model(&wc);
    let tc = TrainConfig { eval_every: 10, ..cfg(30, 4) };
    let a = train(&model, &tc, &pair).unwrap();
    let b = train(&model, &tc, &pair).unwrap();
    assert_eq!(a.log, b.log);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(std::fs::File::create(&path).unwrap(), &a.checkpoint).unwrap();
    let loaded = load_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(loaded, a.checkpoint);
    assert_eq!(loaded.train, serde_json::to_value(&tc).unwrap());
    let r1 = evaluate(&a.checkpoint.params, &model, &pair, tc.seed).unwrap();
    let r2 = evaluate(&loaded.params, &loaded.model, &pair, tc.seed).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(a.final_report.unwrap(), r1);
}

#[test]
fn different_seed_changes_the_run() {
    let (wc, pair) = small_world(3);
    let model = small_model(&wc);
    let a = train(&model, &cfg(5, 1), &pair).unwrap();
    let b = train(&model, &cfg(5, 2), &pair).unwrap();
    assert_ne!(a.log, b.log);
}

#[test]
fn thread_count_does_not_change_gradients() {
    let (wc, pair) = small_world(4);
    let model = small_model(&wc);
    let tc = cfg(1, 5);
    let corpus = Corpus::new(&pair).unwrap();
    let batch = corpus.batch(&model, &tc, 0);
    let params = ParamSet::init(&model, 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            batch_loss_and_grads(&params, &model, corpus.side(), &batch, Sampling::UniformFraction(0.2), 0.0, step_seed(5, 0))
                .unwrap()
        })
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.loss.to_bits(), three.loss.to_bits());
    assert_eq!(bits(&one.grads), bits(&three.grads));
}

/// With every event high-value, a one-target window with unit rewards picks
/// the next event itself at zero delay, so MTP and NTP batches coincide.
#[test]
fn single_target_mtp_matches_ntp_first_step() {
    let wc = WorldConfig { vocab_size: 100, n_users: 150, high_value_threshold: 0.0, ..WorldConfig::compact() };
    let pair = generate_dataset(&wc, 6).unwrap();
    let model = small_model(&wc);
    let ntp = cfg(1, 8);
    let mut mtp = TrainConfig { objective: Objective::Mtp, ..ntp.clone() };
    mtp.mtp.window = 1;
    mtp.mtp.reward_weighting = RewardWeighting::Unit;
    let corpus = Corpus::new(&pair).unwrap();
    let params = ParamSet::init(&model, 8);
    let grads = |tc: &TrainConfig| {
        let batch = corpus.batch(&model, tc, 0);
        batch_loss_and_grads(&params, &model, corpus.side(), &batch, tc.decoder.sampling, 0.0, step_seed(8, 0)).unwrap()
    };
    let (a, b) = (grads(&ntp), grads(&mtp));
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(bits(&a.grads), bits(&b.grads));
}

#[test]
fn exploding_learning_rate_aborts_with_last_good_reference() {
    let (wc, pair) = small_world(5);
    let model = small_model(&wc);
    let tc = TrainConfig { lr: 1e300, grad_clip: 1e300, warmup_steps: 0, ..cfg(40, 1) };
    let mut saved = 0;
    match genrec_core::train::train_with_checkpoints(&model, &tc, &pair, 1, |_| {
        saved += 1;
        Ok(())
    }) {
        Err(Error::NonFiniteLoss { step, last_good }) => {
            let want = if step == 0 { "initialization".to_string() } else { format!("step {step}") };
            assert_eq!(last_good, want);
            assert_eq!(saved, step);
        }
        other => panic!("expected a non-finite loss abort, got {:?}", other.map(|o| o.checkpoint.step)),
    }
}

#[test]
fn sweep_reports_backbone_sizes_and_records_failures() {
    let (wc, pair) = small_world(7);
    let mut ladder = LadderSpec::desk(
        wc.vocab_size,
        wc.semantic_dims().total(),
        context_cards(wc.slots, wc.countries),
        TrainConfig { eval_every: 2, ..cfg(4, 1) },
    );
    ladder.rungs.truncate(3);
    let ok = sweep(&ladder, &pair).unwrap();
    let sizes: Vec<usize> = ok.rungs.iter().map(|r| r.backbone_params).collect();
    for (r, m) in ok.rungs.iter().zip(&ladder.rungs) {
        assert_eq!(r.backbone_params, genrec_core::backbone::param_count(m, genrec_core::backbone::CountScope::BackboneOnly));
    }
    assert!(sizes.windows(2).all(|w| w[1] > w[0]));
    for task in TaskCategory::ALL {
        assert_eq!(ok.points(task).len(), 3);
    }

    let mut exploding = ladder.clone();
    exploding.train.lr = 1e300;
    exploding.train.grad_clip = 1e300;
    exploding.train.warmup_steps = 0;
    exploding.train.steps = 30;
    let failed = sweep(&exploding, &pair).unwrap();
    assert_eq!(failed.rungs.len(), 3);
    assert!(failed.rungs.iter().all(|r| r.error.is_some()));
    assert!(failed.points(TaskCategory::A).is_empty());

    let mut short = ladder;
    short.rungs.truncate(2);
    assert!(sweep(&short, &pair).is_err());
}
