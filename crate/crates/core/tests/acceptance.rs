//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary: `cargo test --release --test acceptance -- 4 7`
//! runs only criteria 4 and 7.

mod common;

use std::time::{Duration, Instant};

use common::*;
use genrec_core::backbone::{load_checkpoint, save_checkpoint, ModelConfig, ParamSet};
use genrec_core::cold_start::MaskSide;
use genrec_core::cost::{reduction_ratio, total_flops_per_token, CostMode, CostQuery};
use genrec_core::decoder::{
    ntp_loss, sample_negatives, sample_without_replacement, weighted_candidate_loss, DecoderMode, DenseTable,
    Sampling,
};
use genrec_core::eval::{aggregate, build_examples, evaluate, replay_staleness, score_examples, Slice, StalenessConfig};
use genrec_core::model::{batch_loss_and_grads, context_cards, Objective, SequenceExample};
use genrec_core::mtp::{build_label_set, decay_weight, mtp_loss, MtpConfig, MtpLabelSet};
use genrec_core::rng::{stream, stream_rng};
use genrec_core::scaling::{compare_fits, fit_offset, ScalingPoint};
use genrec_core::train::{sweep, train, LadderSpec, TrainConfig};
use genrec_core::world::{generate_dataset, DatasetPair, Event, TaskCategory, WorldConfig, HOUR};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

fn within(x: f64, want: f64, tol: f64) -> bool {
    (x / want - 1.0).abs() <= tol
}

// ---------------------------------------------------------------- cost model

fn cost_model() -> Outcome {
    let q = |v, mode| total_flops_per_token(&CostQuery::reference(v, mode)).unwrap();
    let full = q(1_000_000, CostMode::Full);
    let sp = q(1_000_000, CostMode::SampledProjected);
    let r6 = full / sp;
    let r7 = reduction_ratio(&CostQuery::reference(10_000_000, CostMode::Full)).unwrap();
    let pass = within(full, 1.26e10, 0.10) && within(sp, 3.56e8, 0.10) && within(r6, 35.5, 0.10) && within(r7, 249.0, 0.10);
    check(pass, format!("full {full:.3e}, sampled+projected {sp:.3e}, ratio {r6:.1}x at 1e6, {r7:.1}x at 1e7"))
}

// ---------------------------------------------------------------- scaling fit

fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp()).collect()
}

fn law(p0: f64, n0: f64, a: f64, ns: &[f64]) -> Vec<ScalingPoint> {
    ns.iter().map(|&n| ScalingPoint { n, p: p0 - (n / n0).powf(-a) }).collect()
}

fn noisy(points: Vec<ScalingPoint>, sigma: f64, seed: u64) -> Vec<ScalingPoint> {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rng = stream_rng(seed, &[]);
    points.into_iter().map(|q| ScalingPoint { n: q.n, p: q.p + noise.sample(&mut rng) }).collect()
}

fn scaling_fit() -> Outcome {
    let exact = fit_offset(&law(0.45, 2e4, 0.35, &log_grid(1e3, 1e8, 10))).unwrap();
    let dparam = (exact.p0 - 0.45).abs().max((exact.n0.ln() - 2e4f64.ln()).abs()).max((exact.a - 0.35).abs());

    let ns = log_grid(1e3, 1e8, 30);
    let errs: Vec<f64> =
        (0..20).map(|s| (fit_offset(&noisy(law(0.5, 1e3, 0.3, &ns), 5e-3, s)).unwrap().p0 - 0.5).abs()).collect();
    let med = median(errs);

    // Three saturating tasks with different ceilings and rates.
    let tasks = [(0.15, 2e3, 0.6), (0.35, 5e3, 0.5), (0.7, 1e3, 0.8)];
    let wins = tasks
        .iter()
        .enumerate()
        .filter(|(i, &(p0, n0, a))| {
            let pts = noisy(law(p0, n0, a, &log_grid(2e3, 2e5, 8)), 5e-3, 100 + *i as u64);
            let c = compare_fits(&pts).unwrap();
            c.offset.rmse < c.log.rmse
        })
        .count();
    check(
        dparam < 1e-6 && med < 0.02 && wins >= 2,
        format!("noiseless max |dparam| {dparam:.1e}, noisy median |dP0| {med:.4}, offset beats log on {wins}/3 tasks"),
    )
}

// ---------------------------------------------------------------- gradients

fn gradients() -> Outcome {
    let side = tiny_side(&[10, 11], 1);
    let runs = [
        ("ntp", check_batch(&tiny_config(DecoderMode::Full), &side, &ntp_examples(), Sampling::None, 0.0, 3)),
        (
            "sampled",
            check_batch(&tiny_config(DecoderMode::Projected), &side, &ntp_examples(), Sampling::UniformFraction(0.4), 0.0, 4),
        ),
        ("mtp", check_batch(&tiny_config(DecoderMode::Projected), &side, &mtp_examples(), Sampling::None, 0.0, 5)),
        (
            "cold-start",
            check_batch(&tiny_config(DecoderMode::Projected), &side, &cold_examples(), Sampling::UniformFraction(0.5), 0.3, 6),
        ),
    ];
    let worst = runs.iter().map(|(_, (e, _))| *e).fold(0.0, f64::max);
    let detail = runs.iter().map(|(n, (e, _))| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst < 1e-4, format!("max relative error: {detail}"))
}

// ---------------------------------------------------------------- sampled softmax

/// Explicit Fisher–Yates over the materialized list of allowed ids, drawing
/// from the same generator.
fn reference_sampler(vocab: usize, count: usize, excluded: &[u32], rng: &mut genrec_core::rng::Rng) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..vocab as u32).filter(|x| !excluded.contains(x)).collect();
    let count = count.min(pool.len());
    for i in 0..count {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn sampled_softmax() -> Outcome {
    // Full coverage: every non-target sampled equals the dense softmax.
    let (v, k) = (40usize, 6usize);
    let mut rng = stream_rng(7, &[]);
    let table = DenseTable { dim: k, rows: (0..v * k).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let user: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = 13u32;
    let mut cands: Vec<_> = sample_negatives(v, 1.0, target, 3).unwrap().into_iter().map(|i| cand(i, false)).collect();
    cands.push(cand(target, false));
    let sampled = ntp_loss(&user, cand(target, false), &cands, &table).unwrap().loss;
    let logits: Vec<f64> = (0..v).map(|i| (0..k).map(|j| user[j] * table.rows[i * k + j]).sum()).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dense = -(logits[target as usize] - m - logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln());
    let coverage_err = (sampled - dense).abs();

    // Target rejection over 10^4 draws.
    let hits = (0..10_000u64)
        .filter(|&s| sample_negatives(1000, 0.01, (s % 1000) as u32, s).unwrap().contains(&((s % 1000) as u32)))
        .count();

    // Reference oracle at V = 10, f = 0.3: identical sequences and uniform marginals.
    let n = genrec_core::decoder::negative_count(10, 0.3).unwrap();
    let mut identical = true;
    let mut counts = [0usize; 10];
    let trials = 20_000u64;
    for s in 0..trials {
        let got = sample_without_replacement(10, n, &[4], &mut stream_rng(s, &[stream::NEGATIVES]));
        let want = reference_sampler(10, n, &[4], &mut stream_rng(s, &[stream::NEGATIVES]));
        identical &= got == want;
        for x in got {
            counts[x as usize] += 1;
        }
    }
    let expect = trials as f64 * n as f64 / 9.0;
    let chi2: f64 = counts.iter().enumerate().filter(|&(i, _)| i != 4).map(|(_, &c)| (c as f64 - expect).powi(2) / expect).sum();
    // 8 degrees of freedom, 0.999 quantile.
    let pass = coverage_err < 1e-6 && hits == 0 && identical && counts[4] == 0 && chi2 < 26.12;
    check(
        pass,
        format!(
            "full-coverage |diff| {coverage_err:.1e}, target drawn {hits}/10000, oracle identical {identical}, chi2 {chi2:.2} (8 dof)"
        ),
    )
}

// ---------------------------------------------------------------- MTP weights

fn event(item: u32, t: i64, high_value: bool) -> Event {
    Event { user_id: 0, item, timestamp: t, reward: 0.8, high_value, context: vec![0, 0], task: TaskCategory::A }
}

fn bits(p: &ParamSet) -> Vec<u64> {
    p.named().into_iter().flat_map(|(_, _, t)| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn mtp_weights() -> Outcome {
    let beta = HOUR as f64;
    let r = 0.8;
    let t0 = 1_000_000;
    let exact = decay_weight(r, t0, t0, beta) == r
        && decay_weight(r, t0 + HOUR, t0, beta) == r / 2.0
        && decay_weight(r, t0 + 2 * HOUR, t0, beta) == r / 4.0;

    // K = 1 with the first high-value event at the context time reduces to NTP.
    let future = [event(3, 500, false), event(7, 1000, true), event(9, 1500, true)];
    let one = MtpConfig { window: 1, ..MtpConfig::default() };
    let labels = build_label_set(future.iter(), 1000, &one);
    let config = tiny_config(DecoderMode::Projected);
    let side = tiny_side(&[10, 11], 1);
    let params = jittered_params(&config, 11);
    let tokens = vec![token(None, false, 0, 1), token(Some(3), false, 1, 0)];
    let mtp_ex = SequenceExample { tokens: tokens.clone(), targets: vec![vec![], labels.targets()] };
    let ntp_ex = SequenceExample { tokens, targets: vec![vec![], vec![(cand(7, false), 1.0)]] };
    let a = batch_loss_and_grads(&params, &config, &side, &[mtp_ex], Sampling::None, 0.0, 5).unwrap();
    let b = batch_loss_and_grads(&params, &config, &side, &[ntp_ex], Sampling::None, 0.0, 5).unwrap();
    let k1 = a.loss.to_bits() == b.loss.to_bits() && bits(&a.grads) == bits(&b.grads);

    // Permutation invariance over in-window targets.
    let five = MtpConfig::default();
    let fut: Vec<Event> = (0..6).map(|i| event(i as u32 * 2 + 1, t0 + i * 900, true)).collect();
    let set = build_label_set(fut.iter(), t0, &five);
    let mut rng = stream_rng(2, &[]);
    let table = DenseTable { dim: 4, rows: (0..12 * 4).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let user = [0.3, -0.2, 0.5, 0.1];
    let cands: Vec<_> = (0..12).map(|i| cand(i, false)).collect();
    let base = mtp_loss(&user, &set, &cands, &table).unwrap();
    let mut worst = 0.0f64;
    for rot in 1..set.entries.len() {
        let mut entries = set.entries.clone();
        entries.rotate_left(rot);
        entries.swap(0, 1);
        let perm = MtpLabelSet { t_context: set.t_context, entries };
        let g = mtp_loss(&user, &perm, &cands, &table).unwrap();
        worst = worst.max((g.loss - base.loss).abs());
        for (x, y) in g.d_user.iter().zip(&base.d_user) {
            worst = worst.max((x - y).abs());
        }
    }
    let direct = weighted_candidate_loss(&user, &set.targets(), &cands, &table).unwrap();
    let perm_ok = worst < 1e-12 && (direct.loss - base.loss).abs() < 1e-15;
    check(
        exact && k1 && perm_ok,
        format!("exact halving {exact}, K=1 equals NTP bitwise {k1}, permutation max |diff| {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- experiments

fn desk_train(seed: u64) -> TrainConfig {
    let mut tc = TrainConfig { steps: 1000, eval_every: 0, seed, lr: 0.01, ..TrainConfig::default() };
    tc.set("decoder.mode", "full").unwrap();
    tc.set("decoder.sampling", "none").unwrap();
    tc
}

fn desk_model(world: &WorldConfig) -> ModelConfig {
    ModelConfig {
        seq_len: 32,
        decoder_mode: DecoderMode::Full,
        ..ModelConfig::desk(world.vocab_size, world.semantic_dims().total(), context_cards(world.slots, world.countries))
    }
}

fn world(seed: u64) -> (WorldConfig, DatasetPair) {
    let wc = WorldConfig::compact();
    let pair = generate_dataset(&wc, seed).unwrap();
    (wc, pair)
}

fn scaling_sweep() -> Outcome {
    let (wc, pair) = world(1);
    let tc = TrainConfig { eval_every: 250, ..desk_train(1) };
    let ladder = LadderSpec::desk(wc.vocab_size, wc.semantic_dims().total(), context_cards(wc.slots, wc.countries), tc);
    let result = sweep(&ladder, &pair).unwrap();
    let sizes: Vec<usize> = result.rungs.iter().map(|r| r.backbone_params).collect();
    let p0: Vec<f64> = TaskCategory::ALL
        .iter()
        .map(|&t| fit_offset(&result.points(t)).map(|f| f.p0).unwrap_or(f64::NAN))
        .collect();
    let pass = sizes.len() >= 5
        && sizes[0] >= 1_000
        && *sizes.last().unwrap() <= 250_000
        && result.rungs.iter().all(|r| r.error.is_none())
        && p0[0] < p0[1]
        && p0[1] < p0[2];
    let c: Vec<f64> = result.points(TaskCategory::C).iter().map(|q| q.p).collect();
    let c_monotone = c.windows(2).all(|w| w[1] >= w[0] - 0.01);
    check(
        pass,
        format!(
            "backbone sizes {sizes:?}, fitted P0 A {:.3} B {:.3} C {:.3}, Task C non-decreasing within 0.01: {c_monotone}",
            p0[0], p0[1], p0[2]
        ),
    )
}

fn staleness_and_mtp() -> Outcome {
    let delays = StalenessConfig::default();
    let d48 = 48 * HOUR;
    let mut bitwise = true;
    let mut deg_a = Vec::new();
    let mut deg_b = Vec::new();
    let mut gains: [Vec<f64>; 3] = Default::default();
    for seed in 1..=3 {
        let (wc, pair) = world(seed);
        let model = desk_model(&wc);
        let ntp = train(&model, &desk_train(seed), &pair).unwrap().checkpoint.params;
        let mtp_cfg = TrainConfig { objective: Objective::Mtp, ..desk_train(seed) };
        let mtp = train(&model, &mtp_cfg, &pair).unwrap().checkpoint.params;

        let rep = replay_staleness(&ntp, &model, &pair, &delays, seed).unwrap();
        // δ = 0 column against a standard evaluation of the same population.
        let (mut examples, _) = build_examples(&pair, &delays.delays);
        examples.iter_mut().for_each(|e| e.targets.truncate(1));
        let metrics = score_examples(&ntp, &model, &pair, &examples, rep.k).unwrap();
        let standard = aggregate(&examples, &metrics, &[0]);
        for row in &standard {
            let r = rep.row(row.slice, 0).unwrap();
            bitwise &= r.count == row.count
                && r.mrr.to_bits() == row.mrr.to_bits()
                && r.hit_rate.to_bits() == row.hit_rate.to_bits()
                && r.ndcg.to_bits() == row.ndcg.to_bits();
        }
        let plain = evaluate(&ntp, &model, &pair, seed).unwrap();
        let again = replay_staleness(&ntp, &model, &pair, &StalenessConfig { delays: vec![0] }, seed).unwrap();
        bitwise &= plain == again;

        deg_a.push(-rep.row(Slice::Task(TaskCategory::A), d48).unwrap().relative_mrr);
        deg_b.push(-rep.row(Slice::Task(TaskCategory::B), d48).unwrap().relative_mrr);
        let rep_mtp = replay_staleness(&mtp, &model, &pair, &delays, seed).unwrap();
        for (i, t) in TaskCategory::ALL.iter().enumerate() {
            let s = Slice::Task(*t);
            gains[i].push(rep_mtp.mrr(s, d48).unwrap() / rep.mrr(s, d48).unwrap() - 1.0);
        }
    }
    let (da, db) = (median(deg_a), median(deg_b));
    let g: Vec<f64> = gains.iter().map(|v| median(v.clone())).collect();
    let pass = bitwise && db > da && g.iter().all(|&x| x > 0.0);
    check(
        pass,
        format!(
            "δ=0 bitwise {bitwise}; 48h degradation A {:.1}% B {:.1}%; MTP gain at 48h A {:+.1}% B {:+.1}% C {:+.1}%",
            100.0 * da,
            100.0 * db,
            100.0 * g[0],
            100.0 * g[1],
            100.0 * g[2]
        ),
    )
}

fn cold_start() -> Outcome {
    let mut base = Vec::new();
    let mut masked = Vec::new();
    for seed in 1..=3 {
        let (wc, pair) = world(seed);
        let model = desk_model(&wc);
        let run = |p: f64| {
            let mut tc = desk_train(seed);
            tc.masking.p_mask = p;
            tc.masking.side = MaskSide::Output;
            let out = train(&model, &tc, &pair).unwrap();
            out.final_report.unwrap().mrr(Slice::ColdStart, 0).unwrap()
        };
        base.push(run(0.0));
        masked.push(run(0.05));
    }
    let gains: Vec<f64> = base.iter().zip(&masked).map(|(b, m)| m / b - 1.0).collect();
    let g = median(gains);
    check(
        g >= 0.20,
        format!("cold-start MRR p=0 {:?}, p=0.05 {:?}, median gain {:+.1}%", rounded(&base), rounded(&masked), 100.0 * g),
    )
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn determinism() -> Outcome {
    let wc = WorldConfig { vocab_size: 120, n_users: 150, ..WorldConfig::compact() };
    let pair = generate_dataset(&wc, 5).unwrap();
    let model = ModelConfig { width: 16, layers: 1, ..desk_model(&wc) };
    let tc = TrainConfig { steps: 60, eval_every: 20, ..desk_train(5) };
    let a = train(&model, &tc, &pair).unwrap();
    let b = train(&model, &tc, &pair).unwrap();
    let csv = |o: &genrec_core::train::TrainOutcome| {
        let mut buf = Vec::new();
        o.log.write_csv(&mut buf).unwrap();
        buf
    };
    let logs_equal = csv(&a) == csv(&b);

    let mut bytes = Vec::new();
    save_checkpoint(&mut bytes, &a.checkpoint).unwrap();
    let loaded = load_checkpoint(&bytes[..]).unwrap();
    let delays = StalenessConfig::default();
    let before = replay_staleness(&a.checkpoint.params, &model, &pair, &delays, 0).unwrap();
    let after = replay_staleness(&loaded.params, &loaded.model, &pair, &delays, 0).unwrap();
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    before.write_csv(&mut e1).unwrap();
    after.write_csv(&mut e2).unwrap();
    let roundtrip = loaded == a.checkpoint && e1 == e2;
    check(logs_equal && roundtrip, format!("metric logs identical {logs_equal}, checkpoint evaluation identical {roundtrip}"))
}

type Criterion = (u32, &'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "cost model", cost_model, Duration::from_secs(1)),
        (2, "scaling fit", scaling_fit, Duration::from_secs(10)),
        (3, "gradients", gradients, Duration::from_secs(60)),
        (4, "sampled softmax", sampled_softmax, Duration::from_secs(60)),
        (5, "MTP weights", mtp_weights, Duration::from_secs(60)),
        (6, "desk scaling sweep", scaling_sweep, Duration::from_secs(30 * 60)),
        (7, "staleness and MTP", staleness_and_mtp, Duration::from_secs(20 * 60)),
        (8, "cold start", cold_start, Duration::from_secs(15 * 60)),
        (9, "determinism", determinism, Duration::from_secs(10 * 60)),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let out = run();
        let took = t.elapsed();
        let pass = out.pass && took < budget;
        failed += usize::from(!pass);
        println!(
            "criterion {id} ({name}): {} [{:.1}s, budget {}s] {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            out.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
