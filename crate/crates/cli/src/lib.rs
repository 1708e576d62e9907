//! `mope-baf` command-line driver: train, eval, gradcheck, ablate, dump-mask.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mope::data::Task;
use mope::eval::{self, aggregate_runs, Aggregate, MetricMap};
use mope::experiment::{self, RunResult};
use mope::layout::{build_layout, build_stage1_mask, build_stage2_mask, Segment};
use mope::model::Model;
use mope::numerics::{BackwardFault, BoolMatrix, GradCheck};
use mope::persist::{Checkpoint, RunConfig};
use mope::training::{gradcheck_model, trace_csv};
use serde_json::json;

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step used by `gradcheck`.
pub const GRADCHECK_STEP: f64 = 1e-4;
const GRADCHECK_MAX_DIM: usize = 16;
const GRADCHECK_MAX_LAYERS: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "mope-baf", version, about = "Mixture-of-prompt-experts transformer with block-aware prompt fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a configuration file; writes checkpoints, trace and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on regenerated data.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep one setting and report mean F1 per value.
    Ablate(AblateArgs),
    /// Print the attention mask of a packed sequence as a 0/1 grid.
    DumpMask(DumpMaskArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Sets every seed of the run (task instance, split, init, shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of runs with consecutive seeds; reports mean (sd).
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Dev,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Split seed to regenerate (default: the recorded one).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate on this many consecutive split seeds and aggregate.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Explicit comma-separated split seeds to aggregate over.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Negative control: perturbs one backward rule.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "prompt_length")]
    PromptLength,
    #[value(name = "block_count")]
    BlockCount,
    Shots,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::PromptLength => "prompt_length",
            Axis::BlockCount => "block_count",
            Axis::Shots => "shots",
        }
    }

    /// `cfg` with the swept setting set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Axis::PromptLength => {
                c.model.vp_len = value;
                c.model.lp_len = value;
                c.model.vlp_len = value;
            }
            Axis::BlockCount => c.model.block_count = value,
            Axis::Shots => c.data.shots_per_class = value,
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    /// Runs per value, with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// First seed (default: the configured split seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write `ablate-<axis>.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpMaskArgs {
    /// Take lengths from this configuration (flags override).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vp: Option<usize>,
    #[arg(long)]
    pub lp: Option<usize>,
    /// VL-Prompt length (stage 2 only).
    #[arg(long)]
    pub vlp: Option<usize>,
    #[arg(long)]
    pub img: Option<usize>,
    #[arg(long)]
    pub txt: Option<usize>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// A check did not pass or the computation failed: exit 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<mope::Error> for CliError {
    fn from(e: mope::Error) -> Self {
        match e {
            mope::Error::Config(_) | mope::Error::Input(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Ablate(a) => cmd_ablate(a, out, err),
        Command::DumpMask(a) => cmd_dump_mask(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn to_json(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialise")
}

fn aggregate_json(agg: &Aggregate) -> serde_json::Value {
    let summary: serde_json::Map<String, serde_json::Value> = agg
        .mean
        .keys()
        .map(|k| (k.clone(), json!(agg.format(k).unwrap_or_default())))
        .collect();
    json!({ "runs": agg.runs, "mean": agg.mean, "sd": agg.sd, "summary": summary })
}

/// Writes `best.ckpt`, `final.ckpt`, `trace.csv` and `metrics.json` into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, result: &RunResult) -> CliResult {
    std::fs::create_dir_all(dir)?;
    result.best_checkpoint(cfg).save(&dir.join("best.ckpt"))?;
    result.final_checkpoint(cfg).save(&dir.join("final.ckpt"))?;
    std::fs::write(dir.join("trace.csv"), trace_csv(&result.outcome.trace))?;
    let metrics = run_json(result);
    std::fs::write(dir.join("metrics.json"), to_json(&metrics))?;
    Ok(())
}

fn run_json(result: &RunResult) -> serde_json::Value {
    json!({ "best_step": result.outcome.best_step, "dev": result.dev, "test": result.test })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let cfg = load_config(&args.config, args.seed)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    if args.runs == 1 {
        let result = experiment::run(&cfg)?;
        write_run(&dir, &cfg, &result)?;
        writeln!(out, "{}", to_json(&run_json(&result)))?;
        return Ok(());
    }
    let base = args.seed.unwrap_or(cfg.data.split_seed);
    let mut tests = Vec::new();
    for seed in base..base + args.runs as u64 {
        let c = cfg.with_seed(seed);
        let result = experiment::run(&c)?;
        write_run(&dir.join(format!("seed-{seed}")), &c, &result)?;
        writeln!(
            err,
            "seed {seed}: test accuracy {:.4}",
            result.test.get("accuracy").copied().unwrap_or(f64::NAN)
        )?;
        tests.push(result.test);
    }
    let agg = aggregate_runs(&tests)?;
    let report = aggregate_json(&agg);
    std::fs::write(dir.join("aggregate.json"), to_json(&report))?;
    writeln!(out, "{}", to_json(&report))?;
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let cfg = &ckpt.config;
    let seeds: Vec<u64> = match (&args.seeds, args.runs, args.seed) {
        (Some(s), _, _) => s.clone(),
        (None, Some(n), s) => {
            let base = s.unwrap_or(cfg.data.split_seed);
            (base..base + n as u64).collect()
        }
        (None, None, s) => vec![s.unwrap_or(cfg.data.split_seed)],
    };
    if seeds.is_empty() {
        return Err(CliError::Usage("no split seeds to evaluate".into()));
    }
    let evaluate = |seed: u64| -> CliResult<MetricMap> {
        let mut c = cfg.clone();
        c.data.split_seed = seed;
        if args.split == SplitName::Dev {
            c.data.test_size = 0;
        }
        let split = c.split()?;
        let samples = match args.split {
            SplitName::Dev => &split.dev,
            SplitName::Test => &split.test,
        };
        Ok(eval::evaluate(&model, samples, cfg.data.task)?)
    };
    if seeds.len() == 1 {
        writeln!(out, "{}", to_json(&json!(evaluate(seeds[0])?)))?;
        return Ok(());
    }
    let runs = seeds.iter().map(|&s| evaluate(s)).collect::<CliResult<Vec<_>>>()?;
    let mut report = aggregate_json(&aggregate_runs(&runs)?);
    report["seeds"] = json!(seeds);
    writeln!(out, "{}", to_json(&report))?;
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = load_config(&args.config, args.seed)?;
    let m = &cfg.model;
    if m.hidden_dim > GRADCHECK_MAX_DIM || m.total_layers() > GRADCHECK_MAX_LAYERS {
        return Err(CliError::Usage(format!(
            "refusing gradcheck on hidden_dim {} with {} layers (limits: {GRADCHECK_MAX_DIM}, {GRADCHECK_MAX_LAYERS})",
            m.hidden_dim,
            m.total_layers()
        )));
    }
    cfg.data.shots_per_class = 1;
    cfg.data.test_size = 0;
    let split = cfg.split()?;
    let model = Model::new(cfg.model.clone())?;
    let mut check = GradCheck::new(GRADCHECK_STEP);
    if args.corrupt_backward {
        check = check.with_fault(BackwardFault::GeluSlope);
    }
    let batch: Vec<_> = split.train.iter().take(2).cloned().collect();
    let result = gradcheck_model(&model, &batch, &check)?;
    let r = &result.report;
    let passed = r.max_rel_error <= GRADCHECK_TOLERANCE;
    let report = json!({
        "max_rel_error": r.max_rel_error,
        "tolerance": GRADCHECK_TOLERANCE,
        "coordinates": r.coordinates,
        "worst_param": result.worst_param,
        "worst_analytic": r.worst.as_ref().map(|w| w.analytic),
        "worst_numeric": r.worst.as_ref().map(|w| w.numeric),
        "passed": passed,
    });
    writeln!(out, "{}", to_json(&report))?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e} (worst parameter {})",
            r.max_rel_error,
            result.worst_param.as_deref().unwrap_or("?")
        )))
    }
}

/// One row of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: usize,
    pub mean_f1: f64,
    pub sd: f64,
    pub runs_ok: usize,
    pub runs_failed: usize,
}

pub const ABLATION_HEADER: &str = "value,mean_f1,sd,runs_ok,runs_failed";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value, r.mean_f1, r.sd, r.runs_ok, r.runs_failed
        ));
    }
    s
}

/// Trains `runs` seeds per value; a failing run is reported on `err` and
/// counted, and the sweep moves on.
pub fn ablate(
    cfg: &RunConfig,
    axis: Axis,
    values: &[usize],
    seeds: &[u64],
    err: &mut dyn Write,
) -> CliResult<Vec<AblationRow>> {
    let metric = eval::primary_metric(cfg.data.task);
    let mut rows = Vec::new();
    for &value in values {
        let mut scores = Vec::new();
        let mut failed = 0;
        for &seed in seeds {
            let c = axis.apply(&cfg.with_seed(seed), value);
            match experiment::run(&c) {
                Ok(r) => scores.push(r.test[metric]),
                Err(e) => {
                    failed += 1;
                    writeln!(err, "{}={value} seed {seed}: {e}", axis.name())?;
                }
            }
        }
        let (mean, sd) = if scores.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        rows.push(AblationRow {
            value,
            mean_f1: mean,
            sd,
            runs_ok: scores.len(),
            runs_failed: failed,
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let cfg = load_config(&args.config, None)?;
    if cfg.data.test_size == 0 {
        return Err(CliError::Usage("data.test_size: ablation needs a test set".into()));
    }
    let base = args.seed.unwrap_or(cfg.data.split_seed);
    let seeds: Vec<u64> = (base..base + args.runs as u64).collect();
    let rows = ablate(&cfg, args.axis, &args.values, &seeds, err)?;
    let csv = ablation_csv(&rows);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("ablate-{}.csv", args.axis.name())), &csv)?;
    }
    write!(out, "{csv}")?;
    Ok(())
}

/// Grid with a header row of column segment labels and one labelled line per row.
pub fn render_mask(mask: &BoolMatrix, labels: &[&str]) -> String {
    let mut s = String::from("    ");
    let header: Vec<String> = labels.iter().map(|l| format!("{l:>3}")).collect();
    s.push_str(&header.join(" "));
    s.push('\n');
    for (r, label) in labels.iter().enumerate() {
        s.push_str(&format!("{label:<4}"));
        let cells: Vec<String> = (0..mask.cols())
            .map(|c| format!("{:>3}", u8::from(mask.get(r, c))))
            .collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

pub fn cmd_dump_mask(args: &DumpMaskArgs, out: &mut dyn Write) -> CliResult {
    let base = match &args.config {
        Some(p) => {
            let c = load_config(p, None)?;
            let m = c.model;
            (m.vp_len, m.lp_len, m.vlp_len, m.n_patches, m.max_text_len)
        }
        None => (1, 1, 1, 1, 1),
    };
    let vp = args.vp.unwrap_or(base.0);
    let lp = args.lp.unwrap_or(base.1);
    let vlp = args.vlp.unwrap_or(base.2);
    let img = args.img.unwrap_or(base.3);
    let txt = args.txt.unwrap_or(base.4);
    let text = if args.stage == 1 {
        let layout = build_layout(vp, lp, img, txt, 1)?;
        let labels: Vec<&str> = (0..layout.total_len())
            .map(|i| layout.segment_of(i).map_or("?", Segment::label))
            .collect();
        render_mask(&build_stage1_mask(&layout), &labels)
    } else {
        if txt == 0 {
            return Err(CliError::Usage("text length must be at least 1".into()));
        }
        let mut labels = vec!["VLP"; vlp];
        labels.extend(std::iter::repeat_n(Segment::Image.label(), img));
        labels.extend(std::iter::repeat_n(Segment::Text.label(), txt));
        render_mask(&build_stage2_mask(vlp, img, txt), &labels)
    };
    write!(out, "{text}")?;
    Ok(())
}

/// Test-set accuracy of a full run; used by the sweep helpers and the
/// acceptance suite.
pub fn test_accuracy(cfg: &RunConfig) -> CliResult<f64> {
    let r = experiment::run(cfg)?;
    Ok(r.test["accuracy"])
}

/// Default task of a configuration file, for messages.
pub fn task_of(cfg: &RunConfig) -> Task {
    cfg.data.task
}
