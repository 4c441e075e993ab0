//! `genrec`: the full workflow from synthetic data to reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod data;
mod error;
mod manifest;
mod report;
mod units;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genrec_core::backbone::{load_checkpoint, save_checkpoint};
use genrec_core::cost::{emit_sweep, sweep as cost_sweep};
use genrec_core::eval::{evaluate, replay_staleness};
use genrec_core::model::context_cards;
use genrec_core::scaling::{compare_fits, read_points_csv, write_curves_csv, write_fits_csv, FitComparison};
use genrec_core::train::{apply_kv, parse_kv, render_kv, sweep, train_with_checkpoints, SweepResult};
use genrec_core::world::generate_dataset;
use genrec_core::{
    Checkpoint, CostMode, CostQuery, DatasetPair, EvalReport, LadderSpec, ModelConfig, StalenessConfig, TrainConfig,
    WorldConfig,
};

use crate::error::{usage, CliError, CliResult};
use crate::manifest::{create_dir, read_file, sidecar, write_file, Recorder, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "genrec", version, about = "Generative sequential recommendation experiments")]
struct Cli {
    /// Worker threads (default: GENREC_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world into a dataset directory.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train the desk-scale ladder and write scaling points.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint at the training cutoff.
    Eval(EvalArgs),
    /// Evaluate a checkpoint at several serving delays.
    Replay(ReplayArgs),
    /// Fit offset power laws and log-linear baselines to (task, N, P) points.
    FitScaling(FitArgs),
    /// Analytic training FLOPs per token across vocabularies and decoding modes.
    CostModel(CostArgs),
    /// Render plain-text tables from emitted CSVs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Compact,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Compact)]
    preset: Preset,
    /// World configuration JSON; missing keys take preset values.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, value_parser = size_arg)]
    users: Option<usize>,
    #[arg(long, value_parser = size_arg)]
    vocab: Option<usize>,
    #[arg(long, value_parser = duration_arg)]
    horizon: Option<i64>,
    #[arg(long, value_parser = duration_arg)]
    cutoff: Option<i64>,
}

#[derive(Args, Debug)]
struct Settings {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = size_arg)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
    /// Also save `checkpoint-<step>.bin` every N steps.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Serving delays, starting at 0 (e.g. 0,24h,48h).
    #[arg(long, default_value = "0,24h,48h", value_parser = durations_arg)]
    delays: Durations,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// CSV with header task,n,p.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Curve samples per task.
    #[arg(long, default_value_t = 100)]
    curve_points: usize,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, default_value_t = 1024)]
    d: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 512)]
    seq: usize,
    /// Vocabulary sizes: a list (1e6,1e7) or a decade range (1e3..1e8).
    #[arg(long, default_value = "1e3..1e8", value_parser = sizes_arg)]
    vocab: Sizes,
    /// `all` or a comma-separated list of full, sampled, projected, sampled+projected.
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    #[arg(long, default_value_t = 1)]
    positives: usize,
    /// Also write the sweep as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportKind {
    /// Offset vs log-linear fits, from fits.csv.
    Scaling,
    /// Relative MRR by serving delay, from a replay CSV.
    Staleness,
    /// MTP against NTP by delay, from two replay CSVs.
    Mtp,
    /// Masked against unmasked training on cold-start titles, from two eval CSVs.
    ColdStart,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, value_enum)]
    kind: ReportKind,
    #[arg(long)]
    input: PathBuf,
    /// Reference run for comparison reports.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Write the table to a file instead of only printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct Durations(Vec<i64>);

#[derive(Clone, Debug)]
struct Sizes(Vec<usize>);

fn size_arg(s: &str) -> Result<usize, String> {
    units::parse_size(s).map_err(|e| e.to_string())
}

fn duration_arg(s: &str) -> Result<i64, String> {
    units::parse_duration(s).map_err(|e| e.to_string())
}

fn durations_arg(s: &str) -> Result<Durations, String> {
    units::parse_durations(s).map(Durations).map_err(|e| e.to_string())
}

fn sizes_arg(s: &str) -> Result<Sizes, String> {
    units::parse_size_list(s).map(Sizes).map_err(|e| e.to_string())
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("GENREC_THREADS") {
            Ok(v) => Some(v.trim().parse().or_else(|_| usage(format!("GENREC_THREADS: expected an integer, got '{v}'")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return usage("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::File { path: path.display().to_string(), source })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let mut world = match a.preset {
        Preset::Default => WorldConfig::default(),
        Preset::Compact => WorldConfig::compact(),
    };
    let mut rec = Recorder::new("gen-data", serde_json::Value::Null, Some(a.seed));
    if let Some(p) = &a.world {
        let mut base = serde_json::to_value(&world)?;
        let patch: serde_json::Value = serde_json::from_slice(&read_file(p)?)?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(genrec_core::Error::Config("world file must hold a JSON object".into()).into());
        };
        for (k, v) in patch {
            if base.get(&k).is_none() {
                return Err(genrec_core::Error::Config(format!("unknown world key '{k}'")).into());
            }
            base[k] = v;
        }
        world = serde_json::from_value(base).map_err(|e| genrec_core::Error::Config(e.to_string()))?;
        rec.input(p);
    }
    if let Some(v) = a.users {
        world.n_users = v;
    }
    if let Some(v) = a.vocab {
        world.vocab_size = v;
    }
    if let Some(v) = a.horizon {
        world.horizon = v;
    }
    if let Some(v) = a.cutoff {
        world.cutoff = v;
    }
    let pair = generate_dataset(&world, a.seed)?;
    for w in &pair.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&a.out)?;
    for f in data::write_dir(&a.out, &pair, &world)? {
        rec.output(f);
    }
    rec.set_config(serde_json::to_value(&world)?);
    rec.finish(&a.out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} titles, {} train and {} validation events to {}",
        pair.catalog.len(),
        pair.train.n_events(),
        pair.validation.n_events(),
        a.out.display()
    );
    Ok(())
}

/// Model from the dataset plus settings; settings file first, then `--set`, then flags.
fn resolve(settings: &Settings, world: &WorldConfig, pair: &DatasetPair) -> CliResult<(ModelConfig, TrainConfig)> {
    let side = pair.catalog.side_info();
    let mut model = ModelConfig::desk(pair.catalog.len(), side.feature_dim, context_cards(world.slots, world.countries));
    let mut train = TrainConfig::default();
    model.decoder_mode = train.decoder.mode;
    let mut pairs = Vec::new();
    if let Some(p) = &settings.config {
        let text = String::from_utf8(read_file(p)?).map_err(|_| genrec_core::Error::Config("config file is not UTF-8".into()))?;
        pairs.extend(parse_kv(&text)?);
    }
    for s in &settings.set {
        let Some((k, v)) = s.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got '{s}'"));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    apply_kv(&pairs, &mut model, &mut train)?;
    if let Some(seed) = settings.seed {
        train.seed = seed;
    }
    if let Some(steps) = settings.steps {
        train.steps = steps;
    }
    model.validate()?;
    train.validate(&model)?;
    Ok((model, train))
}

fn write_eval(report: &EvalReport, dir: &Path, stem: &str, rec: &mut Recorder) -> CliResult<()> {
    let csv = dir.join(format!("{stem}.csv"));
    let mut w = create(&csv)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, report)?;
    rec.output(csv);
    rec.output(json);
    Ok(())
}

fn print_eval(report: &EvalReport) {
    let rows: Vec<report::EvalRow> = report
        .rows
        .iter()
        .map(|r| report::EvalRow {
            slice: r.slice.to_string(),
            delay_seconds: r.delay,
            count: r.count,
            mrr: r.mrr,
            relative_mrr: r.relative_mrr,
        })
        .collect();
    print!("{}", report::staleness(&rows));
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let (pair, world) = data::read_dir(&a.data)?;
    let (model, train) = resolve(&a.settings, &world, &pair)?;
    let config = serde_json::json!({ "model": model, "train": train, "data": a.data });
    let mut rec = Recorder::new("train", config, Some(train.seed));
    for f in data::files(&a.data) {
        rec.input(f);
    }
    create_dir(&a.out)?;
    let mut saved = Vec::new();
    let out = train_with_checkpoints(&model, &train, &pair, a.checkpoint_every, |ck| {
        let path = a.out.join(format!("checkpoint-{}.bin", ck.step));
        let mut w = File::create(&path).map(BufWriter::new)?;
        save_checkpoint(&mut w, ck)?;
        w.flush()?;
        saved.push(path);
        Ok(())
    })?;
    for p in saved {
        rec.output(p);
    }
    let ck_path = a.out.join("checkpoint.bin");
    let mut w = create(&ck_path)?;
    save_checkpoint(&mut w, &out.checkpoint)?;
    w.flush()?;
    rec.output(ck_path);
    let metrics = a.out.join("metrics.csv");
    let mut w = create(&metrics)?;
    out.log.write_csv(&mut w)?;
    w.flush()?;
    rec.output(metrics);
    let kv = a.out.join("config.kv");
    write_file(&kv, render_kv(&model, &train).as_bytes())?;
    rec.output(kv);
    if let Some(report) = &out.final_report {
        write_eval(report, &a.out, "eval", &mut rec)?;
        print_eval(report);
    }
    rec.finish(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> CliResult<()> {
    let (pair, world) = data::read_dir(&a.data)?;
    let (model, train) = resolve(&a.settings, &world, &pair)?;
    let ladder = LadderSpec::desk(model.vocab, model.feature_dim, model.context_cards.clone(), train);
    let mut rec = Recorder::new("sweep", serde_json::to_value(&ladder)?, Some(ladder.train.seed));
    for f in data::files(&a.data) {
        rec.input(f);
    }
    create_dir(&a.out)?;
    let result = sweep(&ladder, &pair)?;
    for (r, m) in result.rungs.iter().zip(&ladder.rungs) {
        match &r.error {
            None => eprintln!("rung width {} layers {}: {} backbone params", m.width, m.layers, r.backbone_params),
            Some(e) => eprintln!("rung width {} layers {} failed: {e}", m.width, m.layers),
        }
    }
    let points = a.out.join("points.csv");
    let mut w = create(&points)?;
    result.write_points_csv(&mut w)?;
    w.flush()?;
    rec.output(points);
    let json = a.out.join("sweep.json");
    write_json(&json, &result)?;
    rec.output(json);
    rec.finish(&a.out.join(MANIFEST_FILE))?;
    if result.rungs.iter().all(|r| r.error.is_some()) {
        return Err(genrec_core::Error::NonFiniteLoss { step: 0, last_good: "every rung failed".into() }.into());
    }
    print!("{}", sweep_table(&result));
    Ok(())
}

fn sweep_table(result: &SweepResult) -> String {
    let header: Vec<String> = ["N", "A", "B", "C", "cold_start"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = result
        .rungs
        .iter()
        .map(|r| {
            let mut row = vec![r.backbone_params.to_string()];
            for s in genrec_core::Slice::ALL {
                row.push(
                    r.best_mrr.iter().find(|(x, _)| *x == s).map_or("-".into(), |(_, v)| format!("{v:.4}")),
                );
            }
            row
        })
        .collect();
    report::table(&header, &rows)
}

fn load_ck(path: &Path) -> CliResult<Checkpoint> {
    let bytes = read_file(path)?;
    Ok(load_checkpoint(&bytes[..])?)
}

fn eval_common(a: &EvalArgs, command: &str, delays: &[i64]) -> CliResult<()> {
    let staleness = StalenessConfig { delays: delays.to_vec() };
    staleness.validate()?;
    let (pair, _) = data::read_dir(&a.data)?;
    let ck = load_ck(&a.checkpoint)?;
    let config = serde_json::json!({ "model": ck.model, "delays": delays, "checkpoint_step": ck.step });
    let mut rec = Recorder::new(command, config, Some(a.seed));
    for f in data::files(&a.data) {
        rec.input(f);
    }
    rec.input(&a.checkpoint);
    create_dir(&a.out)?;
    let report = if delays == [0] {
        evaluate(&ck.params, &ck.model, &pair, a.seed)?
    } else {
        replay_staleness(&ck.params, &ck.model, &pair, &staleness, a.seed)?
    };
    write_eval(&report, &a.out, command, &mut rec)?;
    rec.finish(&a.out.join(MANIFEST_FILE))?;
    print_eval(&report);
    Ok(())
}

fn fit_cmd(a: &FitArgs) -> CliResult<()> {
    let text = read_file(&a.points)?;
    let points = read_points_csv(&text[..])?;
    if points.is_empty() {
        return Err(genrec_core::Error::Input(format!("{}: no points", a.points.display())).into());
    }
    let config = serde_json::json!({ "curve_points": a.curve_points });
    let mut rec = Recorder::new("fit-scaling", config, None);
    rec.input(&a.points);
    let mut fits: Vec<(String, FitComparison)> = Vec::new();
    for (task, pts) in &points {
        let fit = compare_fits(pts).map_err(|e| match e {
            genrec_core::Error::DegenerateFit(m) => genrec_core::Error::DegenerateFit(format!("task {task}: {m}")),
            genrec_core::Error::Input(m) => genrec_core::Error::Input(format!("task {task}: {m}")),
            other => other,
        })?;
        fits.push((task.clone(), fit));
    }
    create_dir(&a.out)?;
    let fit_path = a.out.join("fits.csv");
    let mut w = create(&fit_path)?;
    write_fits_csv(&mut w, &fits)?;
    w.flush()?;
    rec.output(&fit_path);
    let ns = points.values().flatten().map(|p| p.n);
    let n_min = ns.clone().fold(f64::INFINITY, f64::min);
    let n_max = ns.fold(0.0, f64::max);
    let curve_path = a.out.join("curves.csv");
    let mut w = create(&curve_path)?;
    write_curves_csv(&mut w, &fits, n_min, n_max, a.curve_points)?;
    w.flush()?;
    rec.output(curve_path);
    rec.finish(&a.out.join(MANIFEST_FILE))?;
    print!("{}", report::scaling(&report::read_fits(&fit_path)?));
    Ok(())
}

fn parse_modes(s: &str) -> CliResult<Vec<CostMode>> {
    if s == "all" {
        return Ok(CostMode::ALL.to_vec());
    }
    s.split(',')
        .map(|m| m.trim().parse::<CostMode>().or_else(|_| usage(format!("unknown decoding mode '{m}'"))))
        .collect()
}

fn cost_cmd(a: &CostArgs) -> CliResult<()> {
    let modes = parse_modes(&a.mode)?;
    let base = CostQuery {
        layers: a.layers,
        d: a.d,
        seq_len: a.seq,
        vocab: a.vocab.0[0],
        mode: CostMode::Full,
        sample_fraction: a.fraction,
        n_positives: a.positives,
    };
    let rows = cost_sweep(&base, &a.vocab.0, &modes)?;
    let header: Vec<String> =
        ["V", "mode", "FLOPs/token", "vs full"].iter().map(|s| s.to_string()).collect();
    let full_at = |v: usize| {
        genrec_core::cost::total_flops_per_token(&CostQuery { vocab: v, mode: CostMode::Full, ..base })
    };
    let mut body = Vec::new();
    for r in &rows {
        let full = full_at(r.vocab)?;
        body.push(vec![
            format!("{:.0e}", r.vocab as f64),
            r.mode.to_string(),
            format!("{:.3e}", r.flops_per_token),
            format!("{:.1}x", full / r.flops_per_token),
        ]);
    }
    println!(
        "Training FLOPs per token (L={}, d={}, S={}, f={}); analytic output-layer estimates\n",
        a.layers, a.d, a.seq, a.fraction
    );
    print!("{}", report::table(&header, &body));
    if modes.contains(&CostMode::Full) && modes.contains(&CostMode::SampledProjected) {
        println!();
        for &v in &a.vocab.0 {
            let ratio = genrec_core::cost::reduction_ratio(&CostQuery { vocab: v, ..base })?;
            println!("ratio full / sampled+projected at V={:.0e}: {ratio:.1}x", v as f64);
        }
    }
    if let Some(path) = &a.csv {
        let config = serde_json::json!({ "base": base, "vocab": a.vocab.0, "modes": modes });
        let mut rec = Recorder::new("cost-model", config, None);
        let mut w = create(path)?;
        emit_sweep(&mut w, &base, &a.vocab.0, &modes)?;
        w.flush()?;
        rec.output(path);
        rec.finish(&sidecar(path))?;
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> CliResult<()> {
    let need_baseline = || a.baseline.as_deref().ok_or_else(|| CliError::Usage("this report needs --baseline".into()));
    let mut rec = Recorder::new("report", serde_json::json!({ "kind": format!("{:?}", a.kind) }), None);
    rec.input(&a.input);
    let text = match a.kind {
        ReportKind::Scaling => report::scaling(&report::read_fits(&a.input)?),
        ReportKind::Staleness => report::staleness(&report::read_eval(&a.input)?),
        ReportKind::Mtp => {
            let b = need_baseline()?;
            rec.input(b);
            report::comparison(
                "MTP against NTP: MRR by serving delay",
                &report::read_eval(b)?,
                &report::read_eval(&a.input)?,
                None,
            )?
        }
        ReportKind::ColdStart => {
            let b = need_baseline()?;
            rec.input(b);
            report::comparison(
                "Collaborative-embedding masking: cold-start MRR",
                &report::read_eval(b)?,
                &report::read_eval(&a.input)?,
                Some("cold_start"),
            )?
        }
    };
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, text.as_bytes())?;
        rec.output(out);
        rec.finish(&sidecar(out))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Eval(a) => eval_common(a, "eval", &[0]),
        Command::Replay(a) => eval_common(&a.eval, "replay", &a.delays.0),
        Command::FitScaling(a) => fit_cmd(a),
        Command::CostModel(a) => cost_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
