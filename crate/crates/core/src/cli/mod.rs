// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface.
//!
//! [`dispatch`] parses an argument vector, runs one subcommand and reports
//! the exit code plus the files it wrote. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 internal failure.

mod report;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::aggregate::{dataset_stats, LabelsSource, SPAN_THRESHOLD};
use crate::error::{Error, Result};
use crate::intervention::{
    build_steering_vector, run_controlled_decode, write_decode_log, ControlConfig, ControlRule, DecodeConfig,
    LabelSelector, SteeringMode, SteeringSpec,
};
use crate::judge::{
    aggregate_verdicts, judge_all, majority_vote, read_jsonl, write_jsonl, JudgeRequest, MockJudge, VerdictRecord,
    DEFAULT_C_THRESH,
};
use crate::metrics::{certainty, confusion_matrix_from_dists, one_vs_rest, token_metrics, ClassScores, ConfusionMatrix, TokenMetricsReport};
use crate::probe::{load_probe, save_probe, Probe, ProbeArch, ProbeKind};
use crate::scan::{scan_layers, write_scan_csv, ScanOptions};
use crate::synth::toy::{ToyConfig, ToyModel, TOY_LAYER};
use crate::synth::{generate_traces, SynthConfig};
use crate::trace::{load_traces, save_trace, Trace};
use crate::train::{train_probe, TrainConfig, TrainHistory};
use crate::util::{read_json, write_json};
use crate::ConflictLabel;

pub use report::{diagnose, render_report, Diagnosis, SpanDiagnosis, TraceDiagnosis};

/// Result of one CLI invocation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    /// Files written, in write order.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "kcprobe", version, about = "Knowledge-conflict probing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic traces with planted conflict geometry
    Synth(SynthArgs),
    /// Train a probe on one layer of a trace corpus
    TrainProbe(TrainArgs),
    /// Run a probe over traces: per-token outputs, span and sample aggregates
    Diagnose(DiagnoseArgs),
    /// Token metrics and confusion matrices from a diagnosis file
    Metrics(MetricsArgs),
    /// Train one probe per layer and compute head activation drift
    LayerScan(ScanArgs),
    /// Build a steering vector from labeled hidden states
    Steer(SteerArgs),
    /// Decode episodes on the toy model with optional interventions
    ControlSim(ControlArgs),
    /// Aggregate claim verdicts into support and error rates
    Judge(JudgeArgs),
    /// Corpus statistics from annotations or probe predictions
    Stats(StatsArgs),
    /// Render a standalone HTML token-highlight report
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; one sub-directory per trace
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Tokens per trace (rollout length with --toy)
    #[arg(long, default_value_t = 48)]
    tokens: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    peak: usize,
    /// Signal strength s
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    /// Noise scale sigma
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.05)]
    span_rate: f64,
    #[arg(long, default_value_t = 4.0)]
    span_len: f64,
    /// Relative head-norm boost on conflict tokens at the peak layer
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    head_boost: f64,
    /// Attention heads per layer; 0 omits head norms
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Probability that a span carries the sample's dominant type
    #[arg(long, default_value_t = 1.0)]
    purity: f64,
    /// Write toy-model rollouts (layer 0) and toy.json instead
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value = "linear")]
    arch: ProbeKind,
    /// Probe file; history.json is written next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    mlp_scale: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    /// Defaults to the probe's training layer
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value = "diagnosis.json")]
    out: PathBuf,
    /// Span-Max detection threshold
    #[arg(long, default_value_t = SPAN_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    fpr: f64,
    /// Also score NoConflict background chunks of this length
    #[arg(long)]
    background_len: Option<usize>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    diagnosis: PathBuf,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    fpr: f64,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value = "linear")]
    arch: ProbeKind,
    #[arg(long, default_value = "scan.json")]
    out: PathBuf,
    /// Also write the per-layer curves as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Recompute the drift at gamma +/- 20%
    #[arg(long)]
    robustness: bool,
    #[arg(long, default_value_t = 1.0)]
    mlp_scale: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SteerArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Population the vector points toward (label or "any")
    #[arg(long, default_value = "NONE")]
    target: LabelSelector,
    /// Population the vector points away from
    #[arg(long, default_value = "any")]
    reference: LabelSelector,
    #[arg(long, default_value_t = SteeringSpec::DEFAULT_LAMBDA, allow_negative_numbers = true)]
    lambda: f64,
    /// Inject only where the probe's conflict mass exceeds --delta
    #[arg(long)]
    conditional: bool,
    #[arg(long, default_value_t = SteeringSpec::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value = "steering.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ControlArgs {
    /// Output directory for decode_log.jsonl and summary.json
    #[arg(long)]
    out: PathBuf,
    /// Toy model config (toy.json); defaults to the built-in toy
    #[arg(long)]
    toy: Option<PathBuf>,
    /// Probe at layer 0; trained on toy rollouts when absent
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Steering spec; built from toy rollouts when --steer is set without it
    #[arg(long)]
    steering: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: u64,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    /// Enable representation steering
    #[arg(long)]
    steer: bool,
    /// Build the vector toward conflict states instead of away from them
    #[arg(long)]
    reverse: bool,
    #[arg(long, default_value_t = SteeringSpec::DEFAULT_LAMBDA, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long)]
    conditional: bool,
    #[arg(long, default_value_t = SteeringSpec::DEFAULT_DELTA)]
    delta: f64,
    /// Enable contrastive decoding against the context-free path
    #[arg(long, conflicts_with = "control")]
    vcd: bool,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Enable probe-guided top-k control
    #[arg(long)]
    control: bool,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// argmax-score or reweight
    #[arg(long, default_value = "argmax-score")]
    rule: ControlRule,
    /// Prompts without a conflict trigger token
    #[arg(long)]
    neutral: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct JudgeArgs {
    /// Verdict JSONL; repeat for self-consistency voting
    #[arg(long, conflicts_with = "claims")]
    verdicts: Vec<PathBuf>,
    /// Judge requests JSONL, checked against --facts by the offline judge
    #[arg(long, requires = "facts")]
    claims: Option<PathBuf>,
    #[arg(long)]
    facts: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_C_THRESH)]
    c_thresh: f64,
    #[arg(long, default_value = "judge.json")]
    out: PathBuf,
    /// Also write the final per-claim verdicts
    #[arg(long)]
    verdicts_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    traces: PathBuf,
    /// Count predicted labels of this probe instead of annotations
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value = "profile.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    diagnosis: PathBuf,
    #[arg(long, default_value = "report.html")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parse `argv` (program name first) and run the subcommand.
pub fn dispatch<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return CommandOutcome {
                exit_code: code,
                artifacts: Vec::new(),
            };
        }
    };
    let mut artifacts = Vec::new();
    match run(cli.command, &mut artifacts) {
        Ok(()) => {
            for p in &artifacts {
                println!("{}", p.display());
            }
            CommandOutcome { exit_code: 0, artifacts }
        }
        Err(e) => {
            eprintln!("error: {e}");
            CommandOutcome {
                exit_code: exit_code(&e),
                artifacts,
            }
        }
    }
}

/// [`dispatch`] with panics mapped to exit code 3.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match catch_unwind(AssertUnwindSafe(|| dispatch(argv))) {
        Ok(outcome) => outcome.exit_code,
        Err(_) => {
            eprintln!("error: internal failure");
            3
        }
    }
}

struct Writer<'a>(&'a mut Vec<PathBuf>);

impl Writer<'_> {
    fn json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        write_json(path, value)?;
        self.0.push(path.to_path_buf());
        Ok(())
    }

    fn text(&mut self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        self.0.push(path.to_path_buf());
        Ok(())
    }

    fn record(&mut self, path: &Path) {
        self.0.push(path.to_path_buf());
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn run(command: Command, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let mut w = Writer(artifacts);
    match command {
        Command::Synth(a) => cmd_synth(a, &mut w),
        Command::TrainProbe(a) => cmd_train(a, &mut w),
        Command::Diagnose(a) => cmd_diagnose(a, &mut w),
        Command::Metrics(a) => cmd_metrics(a, &mut w),
        Command::LayerScan(a) => cmd_scan(a, &mut w),
        Command::Steer(a) => cmd_steer(a, &mut w),
        Command::ControlSim(a) => cmd_control(a, &mut w),
        Command::Judge(a) => cmd_judge(a, &mut w),
        Command::Stats(a) => cmd_stats(a, &mut w),
        Command::Report(a) => cmd_report(a, &mut w),
    }
}

fn load_corpus(root: &Path) -> Result<Vec<Trace>> {
    let traces = load_traces(root)?;
    if traces.is_empty() {
        return Err(Error::InvalidInput(format!("no traces under {}", root.display())));
    }
    Ok(traces)
}

fn cmd_synth(a: SynthArgs, w: &mut Writer) -> Result<()> {
    let traces = if a.toy {
        let model = ToyModel::new(ToyConfig {
            seed: a.seed,
            ..ToyConfig::default()
        })?;
        ensure_dir(&a.out)?;
        w.json(&a.out.join("toy.json"), &model.config)?;
        model.rollout_traces(a.samples, a.tokens, a.seed)?
    } else {
        let cfg = SynthConfig {
            num_samples: a.samples,
            num_tokens: a.tokens,
            num_layers: a.layers,
            hidden_dim: a.dim,
            peak_layer: a.peak,
            signal_strength: a.signal,
            noise_sigma: a.noise,
            span_rate: a.span_rate,
            mean_span_len: a.span_len,
            head_boost: a.head_boost,
            num_heads: a.heads,
            span_purity: a.purity,
            seed: a.seed,
            ..SynthConfig::default()
        };
        cfg.validate()?;
        generate_traces(&cfg)?
    };
    for (i, tr) in traces.iter().enumerate() {
        let dir = a.out.join(format!("synth-{i:05}"));
        save_trace(tr, &dir)?;
        w.record(&dir);
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, w: &mut Writer) -> Result<()> {
    let mut cfg = TrainConfig::for_kind(a.arch).with_seed(a.seed);
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    match a.patience {
        Some(v) => cfg.patience = v,
        None => cfg.patience = cfg.patience.min(cfg.max_epochs),
    }
    cfg.validate()?;
    let traces = load_corpus(&a.traces)?;
    let arch = ProbeArch::for_kind(a.arch, traces[0].hidden_dim(), a.mlp_scale);
    arch.validate()?;
    let (probe, history) = train_probe(&traces, a.layer, arch, &cfg)?;
    ensure_parent(&a.out)?;
    save_probe(&probe, &a.out)?;
    w.record(&a.out);
    w.json(&a.out.with_file_name("history.json"), &history)
}

fn cmd_diagnose(a: DiagnoseArgs, w: &mut Writer) -> Result<()> {
    let probe = load_probe(&a.probe)?;
    let traces = load_corpus(&a.traces)?;
    let layer = a.layer.unwrap_or(probe.trained_on_layer);
    let diag = diagnose(&traces, &probe, layer, a.threshold, a.fpr, a.background_len)?;
    ensure_parent(&a.out)?;
    w.json(&a.out, &diag)
}

#[derive(Serialize)]
struct TraceMetrics<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    metrics: &'a TokenMetricsReport,
}

#[derive(Serialize)]
struct MetricsOutput<'a> {
    overall: TokenMetricsReport,
    per_trace: Vec<TraceMetrics<'a>>,
    /// 4x4 over all tokens.
    confusion: ConfusionMatrix,
    /// 3x3 over conflict-truth tokens, argmax over conflict classes.
    confusion_conditioned: ConfusionMatrix,
    one_vs_rest: ClassScores,
    mean_certainty: f64,
}

fn cmd_metrics(a: MetricsArgs, w: &mut Writer) -> Result<()> {
    let diag: Diagnosis = read_json(&a.diagnosis)?;
    let dists: Vec<[f64; 4]> = diag.traces.iter().flat_map(|t| t.dists.iter().copied()).collect();
    let truth: Vec<ConflictLabel> = diag.traces.iter().flat_map(|t| t.labels.iter().copied()).collect();
    if dists.is_empty() {
        return Err(Error::InvalidInput("diagnosis holds no tokens".into()));
    }
    let out = MetricsOutput {
        overall: token_metrics(&dists)?,
        per_trace: diag
            .traces
            .iter()
            .map(|t| TraceMetrics {
                sample_id: &t.sample_id,
                metrics: &t.metrics,
            })
            .collect(),
        confusion: confusion_matrix_from_dists(&dists, &truth, false)?,
        confusion_conditioned: confusion_matrix_from_dists(&dists, &truth, true)?,
        one_vs_rest: one_vs_rest(&dists, &truth, a.fpr)?,
        mean_certainty: dists.iter().map(certainty).sum::<f64>() / dists.len() as f64,
    };
    ensure_parent(&a.out)?;
    w.json(&a.out, &out)
}

fn cmd_scan(a: ScanArgs, w: &mut Writer) -> Result<()> {
    let mut cfg = TrainConfig::for_kind(a.arch).with_seed(a.seed);
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
        cfg.patience = cfg.patience.min(v);
    }
    let opts = ScanOptions {
        kind: a.arch,
        mlp_scale: a.mlp_scale,
        robustness: a.robustness,
        jobs: a.jobs.max(1),
    };
    let traces = load_corpus(&a.traces)?;
    let result = scan_layers(&traces, &cfg, &opts)?;
    ensure_parent(&a.out)?;
    w.json(&a.out, &result)?;
    if let Some(csv) = &a.csv {
        ensure_parent(csv)?;
        write_scan_csv(csv, &result)?;
        w.record(csv);
    }
    Ok(())
}

fn cmd_steer(a: SteerArgs, w: &mut Writer) -> Result<()> {
    let traces = load_corpus(&a.traces)?;
    let mode = if a.conditional { SteeringMode::Conditional } else { SteeringMode::Unconditional };
    let mut spec = build_steering_vector(&traces, a.layer, a.target, a.reference)?
        .with_lambda(a.lambda)
        .with_mode(mode);
    spec.delta = a.delta;
    spec.validate()?;
    ensure_parent(&a.out)?;
    w.json(&a.out, &spec)
}

/// Rollouts used to fit the default probe and steering vector.
const CONTROL_ROLLOUTS: usize = 1500;
const CONTROL_ROLLOUT_LEN: usize = 32;

#[derive(Serialize)]
struct EpisodeSummary {
    episode: u64,
    prompt_len: usize,
    tokens: Vec<usize>,
    #[serde(rename = "CR")]
    cr: f64,
    #[serde(rename = "SS")]
    ss: f64,
}

#[derive(Serialize)]
struct ControlSummary {
    toy: ToyConfig,
    probe_source: &'static str,
    train_history: Option<TrainHistory>,
    steering: Option<SteeringSpec>,
    vcd_beta: Option<f64>,
    control: Option<ControlConfig>,
    neutral_prompts: bool,
    max_len: usize,
    seed: u64,
    episodes: Vec<EpisodeSummary>,
    #[serde(rename = "mean_CR")]
    mean_cr: f64,
    #[serde(rename = "mean_SS")]
    mean_ss: f64,
}

fn cmd_control(a: ControlArgs, w: &mut Writer) -> Result<()> {
    if a.episodes == 0 || a.max_len == 0 {
        return Err(Error::Config("episodes and max-len must be positive".into()));
    }
    let toy_cfg: ToyConfig = match &a.toy {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    };
    let model = ToyModel::new(toy_cfg.clone())?;
    let needs_rollouts = a.probe.is_none() || (a.steer && a.steering.is_none());
    let rollouts = if needs_rollouts {
        model.rollout_traces(CONTROL_ROLLOUTS, CONTROL_ROLLOUT_LEN, a.seed)?
    } else {
        Vec::new()
    };

    let (probe, probe_source, history): (Probe, _, _) = match &a.probe {
        Some(p) => (load_probe(p)?, "file", None),
        None => {
            let cfg = TrainConfig::linear().with_seed(a.seed);
            let (p, h) = train_probe(&rollouts, TOY_LAYER, ProbeArch::linear(model.hidden_dim()), &cfg)?;
            (p, "trained", Some(h))
        }
    };

    let steering = if a.steer {
        let spec = match &a.steering {
            Some(p) => read_json::<SteeringSpec>(p)?,
            None => {
                let (none, any) = (LabelSelector::Label(ConflictLabel::NoConflict), LabelSelector::AnyConflict);
                let (target, reference) = if a.reverse { (any, none) } else { (none, any) };
                build_steering_vector(&rollouts, TOY_LAYER, target, reference)?
            }
        };
        let mode = if a.conditional { SteeringMode::Conditional } else { spec.mode };
        let mut spec = spec.with_lambda(a.lambda).with_mode(mode);
        spec.delta = a.delta;
        Some(spec)
    } else {
        None
    };
    let cfg = DecodeConfig {
        steering,
        vcd_beta: a.vcd.then_some(a.beta),
        control: a.control.then_some(ControlConfig {
            alpha: a.alpha,
            top_k: a.topk,
            rule: a.rule,
        }),
        ..DecodeConfig::plain(TOY_LAYER, a.max_len)
    };
    cfg.validate()?;

    let mut results = Vec::with_capacity(a.episodes as usize);
    let mut episodes = Vec::with_capacity(a.episodes as usize);
    for ep in 0..a.episodes {
        let prompt = model.episode_prompt(a.seed, ep, !a.neutral);
        let r = run_controlled_decode(&model, &probe, &cfg, &prompt)?;
        let m = token_metrics(&r.probe_dists())?;
        episodes.push(EpisodeSummary {
            episode: ep,
            prompt_len: prompt.len(),
            tokens: r.tokens.clone(),
            cr: m.cr,
            ss: m.ss,
        });
        results.push(r);
    }
    let n = episodes.len() as f64;
    let summary = ControlSummary {
        toy: toy_cfg,
        probe_source,
        train_history: history,
        steering: cfg.steering.clone(),
        vcd_beta: cfg.vcd_beta,
        control: cfg.control.clone(),
        neutral_prompts: a.neutral,
        max_len: a.max_len,
        seed: a.seed,
        mean_cr: episodes.iter().map(|e| e.cr).sum::<f64>() / n,
        mean_ss: episodes.iter().map(|e| e.ss).sum::<f64>() / n,
        episodes,
    };
    ensure_dir(&a.out)?;
    let log = a.out.join("decode_log.jsonl");
    write_decode_log(&log, &results)?;
    w.record(&log);
    w.json(&a.out.join("summary.json"), &summary)
}

fn load_mock_judge(path: &Path) -> Result<MockJudge> {
    let raw: MockJudge = read_json(path)?;
    let mut judge = MockJudge {
        unknown_confidence: raw.unknown_confidence,
        ..MockJudge::new()
    };
    for (claim, fact) in &raw.facts {
        judge = judge.with_fact(claim, fact.holds, fact.confidence);
    }
    Ok(judge)
}

fn cmd_judge(a: JudgeArgs, w: &mut Writer) -> Result<()> {
    if !(0.0..=1.0).contains(&a.c_thresh) {
        return Err(Error::Config(format!("c-thresh {} outside [0, 1]", a.c_thresh)));
    }
    let verdicts = match (&a.claims, &a.facts) {
        (Some(claims), Some(facts)) => {
            let requests: Vec<JudgeRequest> = read_jsonl(claims)?;
            judge_all(&load_mock_judge(facts)?, &requests)?
        }
        _ => {
            if a.verdicts.is_empty() {
                return Err(Error::Config("pass --verdicts or --claims with --facts".into()));
            }
            let runs = a
                .verdicts
                .iter()
                .map(|p| read_jsonl::<VerdictRecord>(p))
                .collect::<Result<Vec<_>>>()?;
            majority_vote(&runs)?
        }
    };
    let report = aggregate_verdicts(&verdicts, a.c_thresh)?;
    ensure_parent(&a.out)?;
    w.json(&a.out, &report)?;
    if let Some(p) = &a.verdicts_out {
        ensure_parent(p)?;
        write_jsonl(p, &verdicts)?;
        w.record(p);
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs, w: &mut Writer) -> Result<()> {
    let traces = load_corpus(&a.traces)?;
    let profile = match &a.probe {
        Some(p) => {
            let probe = load_probe(p)?;
            let layer = a.layer.unwrap_or(probe.trained_on_layer);
            let preds = traces
                .iter()
                .map(|t| Ok(crate::aggregate::predict_labels(&crate::aggregate::predict_dists(t, &probe, layer)?)))
                .collect::<Result<Vec<_>>>()?;
            dataset_stats(&traces, LabelsSource::Probe(&preds))?
        }
        None => dataset_stats(&traces, LabelsSource::Annotation)?,
    };
    let (cols, rows) = profile.table();
    eprintln!("{:<32}{}", "", cols.iter().map(|c| format!("{c:>10}")).collect::<String>());
    for (name, vals) in rows {
        eprintln!("{name:<32}{}", vals.iter().map(|v| format!("{v:>10}")).collect::<String>());
    }
    ensure_parent(&a.out)?;
    w.json(&a.out, &profile)
}

fn cmd_report(a: ReportArgs, w: &mut Writer) -> Result<()> {
    let traces = load_corpus(&a.traces)?;
    let diag: Diagnosis = read_json(&a.diagnosis)?;
    let html = render_report(&diag, &traces)?;
    ensure_parent(&a.out)?;
    w.text(&a.out, &html)
}
