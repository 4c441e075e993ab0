//! Deterministic mini-batch training and model-size sweeps.

mod config;

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{param_count, Checkpoint, CountScope, GradSet, ModelConfig, ParamSet, Tensor};
use crate::cold_start::{apply_masking, Candidate};
use crate::error::{config_err, Error, Result};
use crate::eval::{evaluate, EvalReport, Slice};
use crate::model::{batch_loss_and_grads, history_tokens, step_seed, Objective, SequenceExample};
use crate::mtp::build_label_set;
use crate::rng::{stream, stream_rng};
pub use crate::scaling::ScalingPoint;
use crate::world::{DatasetPair, Event, TaskCategory, TitleSideInfo};

pub use config::{apply_kv, parse_kv, render_kv, set_model_key, TrainConfig};

/// Decoupled-weight-decay Adam. Decay applies to rank-2 tensors only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let g: Vec<&Tensor> = grads.named().into_iter().map(|(_, _, t)| t).collect();
        let mut ms: Vec<&mut Tensor> = Vec::new();
        self.m.for_each_mut(|_, _, t| ms.push(t));
        let mut vs: Vec<&mut Tensor> = Vec::new();
        self.v.for_each_mut(|_, _, t| vs.push(t));
        let mut i = 0;
        params.for_each_mut(|_, _, p| {
            let decay = if p.shape.len() == 2 { cfg.weight_decay } else { 0.0 };
            let (gt, mt, vt) = (&g[i].data, &mut ms[i].data, &mut vs[i].data);
            for j in 0..p.data.len() {
                let gj = gt[j];
                mt[j] = cfg.beta1 * mt[j] + (1.0 - cfg.beta1) * gj;
                vt[j] = cfg.beta2 * vt[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (mt[j] / bc1) / ((vt[j] / bc2).sqrt() + cfg.eps);
                p.data[j] -= lr * (update + decay * p.data[j]);
            }
            i += 1;
        });
    }
}

/// Global-norm clipping; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.for_each(|_, _, t| sq += t.data.iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Training windows drawn from the pre-cutoff histories.
pub struct Corpus<'a> {
    histories: Vec<&'a [Event]>,
    /// `(history, event index)` of every event, the sampling frame for window ends.
    frame: Vec<(u32, u32)>,
    side: TitleSideInfo,
}

impl<'a> Corpus<'a> {
    pub fn new(pair: &'a DatasetPair) -> Result<Self> {
        let histories: Vec<&[Event]> =
            pair.train.histories.iter().map(|h| h.events.as_slice()).filter(|e| !e.is_empty()).collect();
        let frame: Vec<(u32, u32)> = histories
            .iter()
            .enumerate()
            .flat_map(|(h, ev)| (0..ev.len() as u32).map(move |i| (h as u32, i)))
            .collect();
        if frame.is_empty() {
            return Err(Error::Input("training split has no events".into()));
        }
        Ok(Self { histories, frame, side: TitleSideInfo::from_catalog(&pair.catalog) })
    }

    pub fn side(&self) -> &TitleSideInfo {
        &self.side
    }

    /// The batch for `step`: window ends drawn uniformly over all training events.
    pub fn batch(&self, model: &ModelConfig, cfg: &TrainConfig, step: usize) -> Vec<SequenceExample> {
        let mut rng = stream_rng(cfg.seed, &[stream::BATCH, step as u64]);
        (0..cfg.batch_size)
            .map(|b| {
                let (h, i) = self.frame[rng.random_range(0..self.frame.len())];
                let events = self.histories[h as usize];
                let end = i as usize + 1;
                let start = end.saturating_sub(model.seq_len);
                let mut mask_rng = stream_rng(cfg.seed, &[stream::MASK, step as u64, b as u64]);
                self.example(events, start, end, cfg, &mut mask_rng)
            })
            .collect()
    }

    fn example(&self, events: &[Event], start: usize, end: usize, cfg: &TrainConfig, rng: &mut crate::rng::Rng) -> SequenceExample {
        let masks = apply_masking(events.len() - start, &cfg.masking, rng);
        let tokens = history_tokens(events, start, end, Some(&masks));
        let targets = (start..end)
            .map(|j| {
                let ev = &events[j];
                match cfg.objective {
                    Objective::Ntp => {
                        vec![(Candidate::routed(ev.item, masks[j - start].output, &self.side), 1.0)]
                    }
                    Objective::Mtp => {
                        let same_task = (j..events.len()).filter(|&k| events[k].task == ev.task);
                        let mut ls = build_label_set(same_task.clone().map(|k| &events[k]), ev.timestamp, &cfg.mtp);
                        // Attach the output-side route of each selected instance.
                        let chosen: Vec<usize> = same_task
                            .filter(|&k| events[k].high_value)
                            .take(ls.entries.len())
                            .collect();
                        for (entry, &k) in ls.entries.iter_mut().zip(&chosen) {
                            entry.oov = Candidate::routed(entry.item, masks[k - start].output, &self.side).oov;
                        }
                        ls.targets()
                    }
                }
            })
            .collect();
        SequenceExample { tokens, targets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Metric log with columns `step, split, task, metric, value`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub const CSV_HEADER: &'static str = "step,split,task,metric,value";

    pub fn push(&mut self, step: usize, split: &str, task: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            step,
            split: split.into(),
            task: task.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.step, r.split, r.task, r.metric, r.value)?;
        }
        Ok(())
    }

    pub fn values(&self, split: &str, task: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.task == task && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricLog,
    /// Best validation MRR per slice over all evaluations.
    pub best_mrr: Vec<(Slice, f64)>,
    pub final_report: Option<EvalReport>,
}

impl TrainOutcome {
    pub fn best(&self, slice: Slice) -> Option<f64> {
        self.best_mrr.iter().find(|(s, _)| *s == slice).map(|&(_, v)| v)
    }
}

fn log_report(log: &mut MetricLog, step: usize, report: &EvalReport, best: &mut Vec<(Slice, f64)>) {
    for row in report.rows.iter().filter(|r| r.delay == 0) {
        let task = row.slice.name();
        log.push(step, "validation", task, "mrr", row.mrr);
        log.push(step, "validation", task, "hit_rate", row.hit_rate);
        log.push(step, "validation", task, "ndcg", row.ndcg);
        match best.iter_mut().find(|(s, _)| *s == row.slice) {
            Some((_, v)) => *v = v.max(row.mrr),
            None => best.push((row.slice, row.mrr)),
        }
    }
}

/// Trains from scratch; see [`train_with_checkpoints`].
pub fn train(model: &ModelConfig, cfg: &TrainConfig, pair: &DatasetPair) -> Result<TrainOutcome> {
    train_with_checkpoints(model, cfg, pair, 0, |_| Ok(()))
}

/// Runs the training loop. Every `checkpoint_every` steps (if nonzero) the
/// current state is handed to `sink`; a non-finite loss aborts with a
/// reference to the last state handed over.
pub fn train_with_checkpoints(
    model: &ModelConfig,
    cfg: &TrainConfig,
    pair: &DatasetPair,
    checkpoint_every: usize,
    mut sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate(model)?;
    let side = TitleSideInfo::from_catalog(&pair.catalog);
    if side.len() != model.vocab || side.feature_dim != model.feature_dim {
        return config_err(format!(
            "model expects {} titles with {} features, catalog has {} with {}",
            model.vocab,
            model.feature_dim,
            side.len(),
            side.feature_dim
        ));
    }
    let corpus = Corpus::new(pair)?;
    let train_json = serde_json::to_value(cfg)?;
    let mut params = ParamSet::init(model, cfg.seed);
    let mut opt = AdamW::new(&params);
    let mut log = MetricLog::default();
    let mut best = Vec::new();
    let mut last_good = "initialization".to_string();
    let mut final_report = None;

    for step in 0..cfg.steps {
        let batch = corpus.batch(model, cfg, step);
        let mut out = batch_loss_and_grads(
            &params,
            model,
            corpus.side(),
            &batch,
            cfg.decoder.sampling,
            cfg.masking.output_rate(),
            step_seed(cfg.seed, step as u64),
        )
            .map_err(|e| match e {
                Error::Numeric { .. } => Error::NonFiniteLoss { step, last_good: last_good.clone() },
                other => other,
            })?;
        if !out.loss.is_finite() || !out.grads.all_finite() {
            return Err(Error::NonFiniteLoss { step, last_good });
        }
        let norm = clip_grad_norm(&mut out.grads, cfg.grad_clip);
        log.push(step, "train", "all", "loss", out.loss);
        log.push(step, "train", "all", "grad_norm", norm);
        opt.step(&mut params, &out.grads, cfg.lr_at(step), cfg);
        model.precision.round_params(&mut params);
        if !params.all_finite() {
            return Err(Error::NonFiniteLoss { step, last_good });
        }

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            let report = evaluate(&params, model, pair, cfg.seed)?;
            log_report(&mut log, done, &report, &mut best);
        }
        if checkpoint_every > 0 && done % checkpoint_every == 0 {
            sink(&Checkpoint { model: model.clone(), train: train_json.clone(), step: done as u64, params: params.clone() })?;
            last_good = format!("step {done}");
        }
    }
    if cfg.steps > 0 || cfg.eval_every > 0 {
        let report = evaluate(&params, model, pair, cfg.seed)?;
        log_report(&mut log, cfg.steps, &report, &mut best);
        final_report = Some(report);
    }
    let checkpoint = Checkpoint { model: model.clone(), train: train_json, step: cfg.steps as u64, params };
    Ok(TrainOutcome { checkpoint, log, best_mrr: best, final_report })
}

/// Model configurations of increasing backbone size sharing everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub rungs: Vec<ModelConfig>,
    pub train: TrainConfig,
}

impl LadderSpec {
    /// Five rungs from about 2k to 200k backbone parameters with a fixed
    /// 32-wide embedding and decoding setup.
    pub fn desk(vocab: usize, feature_dim: usize, context_cards: Vec<usize>, train: TrainConfig) -> Self {
        let base = ModelConfig {
            seq_len: 32,
            decoder_mode: train.decoder.mode,
            ..ModelConfig::desk(vocab, feature_dim, context_cards)
        };
        let rungs = [(8, 1, 1), (16, 1, 2), (32, 2, 2), (48, 3, 4), (64, 4, 4)]
            .into_iter()
            .map(|(width, layers, heads)| ModelConfig { width, layers, heads, ..base.clone() })
            .collect();
        Self { rungs, train }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rungs.len() < 3 {
            return config_err("a ladder needs at least 3 rungs");
        }
        let first = &self.rungs[0];
        for r in &self.rungs {
            r.validate()?;
            if r.vocab != first.vocab
                || r.embed_dim != first.embed_dim
                || r.decoder_mode != first.decoder_mode
                || r.seq_len != first.seq_len
                || r.context_cards != first.context_cards
                || r.feature_dim != first.feature_dim
                || r.z_dim != first.z_dim
            {
                return config_err("rungs must share vocabulary, embedding, sequence and decoding setup");
            }
        }
        let sizes: Vec<usize> = self.rungs.iter().map(|r| param_count(r, CountScope::BackboneOnly)).collect();
        if sizes.windows(2).any(|w| w[1] <= w[0]) {
            return config_err(format!("backbone sizes must strictly increase, got {sizes:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub backbone_params: usize,
    pub best_mrr: Vec<(Slice, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rungs: Vec<RungResult>,
}

impl SweepResult {
    /// Best-MRR points of one task over the rungs that trained successfully.
    pub fn points(&self, task: TaskCategory) -> Vec<ScalingPoint> {
        self.rungs
            .iter()
            .filter(|r| r.error.is_none())
            .filter_map(|r| {
                r.best_mrr
                    .iter()
                    .find(|(s, _)| *s == Slice::Task(task))
                    .map(|&(_, p)| ScalingPoint { n: r.backbone_params as f64, p })
            })
            .collect()
    }

    pub const CSV_HEADER: &'static str = "task,n,p";

    /// `(task, N, P)` rows for the scaling fitter.
    pub fn write_points_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for task in TaskCategory::ALL {
            for p in self.points(task) {
                writeln!(w, "{},{},{}", task, p.n, p.p)?;
            }
        }
        Ok(())
    }
}

/// Trains every rung with the shared settings; a failing rung is recorded
/// and the sweep continues.
pub fn sweep(ladder: &LadderSpec, pair: &DatasetPair) -> Result<SweepResult> {
    ladder.validate()?;
    let mut rungs = Vec::with_capacity(ladder.rungs.len());
    for model in &ladder.rungs {
        let n = param_count(model, CountScope::BackboneOnly);
        match train(model, &ladder.train, pair) {
            Ok(out) => rungs.push(RungResult { backbone_params: n, best_mrr: out.best_mrr, error: None }),
            Err(e) => rungs.push(RungResult { backbone_params: n, best_mrr: Vec::new(), error: Some(e.to_string()) }),
        }
    }
    Ok(SweepResult { rungs })
}
