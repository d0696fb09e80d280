mod eval;
mod output;
mod score;

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use segreward::harness::{
    ablation_row, render_ablation, render_sweep, sweep, train_with, HarnessError, StepMetrics, TrainConfig, ABLATION_ROWS,
};
use segreward::oracles::{OracleReport, Suite};

use output::{Manifest, OutDir};

/// Exit 1: bad input or config. Exit 2: an internal invariant did not hold.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Invariant(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Invariant(_) => 2,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(e) => write!(f, "input error: {e:#}"),
            Failure::Invariant(e) => write!(f, "invariant violation: {e:#}"),
        }
    }
}

pub trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn invariant(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }

    fn invariant(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invariant(e.into()))
    }
}

fn harness(e: HarnessError) -> Failure {
    match e {
        HarnessError::InvalidConfig(_) | HarnessError::Config(_) | HarnessError::Unresolvable(_) => {
            Failure::Input(e.into())
        }
        _ => Failure::Invariant(e.into()),
    }
}

#[derive(Parser)]
#[command(name = "segreward", version, about = "Two-pass self-rewarding segmentation rewards and GRPO training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Score raw two-pass outputs or replay group traces.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes breakdowns.jsonl, summary.json and a manifest here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the template policy; writes metrics.csv, traces.jsonl, report.json.
    Train(RunArgs),
    /// Train base, +desc and +desc+len side by side.
    Ablation(RunArgs),
    /// Sweep the length anchor and penalty slope.
    Sweep(RunArgs),
    /// Compare fast implementations against brute-force references.
    Oracle {
        /// matching, grpo, gradient, mask_iou, kl, parser or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per suite; each suite has its own default.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// gIoU, cIoU and mean tokens of predicted masks.
    Eval {
        /// Predictions JSONL.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun the command recorded in a manifest.
    Replay {
        /// manifest.json of an earlier run.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the manifest's own directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).input()?;
    TrainConfig::parse(&text)
        .with_context(|| format!("in {}", path.display()))
        .input()
}

fn resolve(args: &RunArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.steps = n;
    }
    cfg.validate().map_err(harness)?;
    Ok(cfg)
}

fn run_manifest(command: &str, cfg: &TrainConfig) -> Manifest {
    Manifest {
        seed: Some(cfg.seed),
        config: Some(cfg.to_text()),
        ..Manifest::new(command)
    }
}

fn json_line<T: serde::Serialize>(w: &mut impl Write, v: &T) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

const METRIC_COLUMNS: [&str; 10] = [
    "step",
    "mean_total",
    "mean_acc",
    "mean_desc",
    "mean_len",
    "mean_n1",
    "mean_n2",
    "answer_entropy",
    "acc_rate",
    "gate_closed",
];

fn metrics_csv(timeline: &[StepMetrics]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS)?;
    for m in timeline {
        w.serialize(m)?;
    }
    w.into_inner().map_err(|e| anyhow!("{}", e.error()))
}

fn summary_line(timeline: &[StepMetrics]) -> String {
    match timeline.last() {
        None => "no steps run".to_string(),
        Some(m) => format!(
            "step {}: total {:.3} acc_rate {:.3} n1 {:.1} n2 {:.1} entropy {:.3}",
            m.step, m.mean_total, m.acc_rate, m.mean_n1, m.mean_n2, m.answer_entropy
        ),
    }
}

/// One training run into its own directory. Returns the report.
fn train_into(cfg: &TrainConfig, root: &Path) -> Result<segreward::harness::TrainReport, Failure> {
    let mut dir = OutDir::create(root).input()?;
    let mut traces = dir.stream("traces.jsonl").input()?;
    let mut sink_err = None;
    let report = train_with(cfg, &mut |t| {
        if sink_err.is_none() {
            sink_err = json_line(traces.writer(), t).err();
        }
    })
    .map_err(harness)?;
    if let Some(e) = sink_err {
        return Err(Failure::Input(e.context("writing traces.jsonl")));
    }
    dir.write("metrics.csv", &metrics_csv(&report.timeline).input()?).input()?;
    dir.commit(traces).input()?;
    let mut text = serde_json::to_string_pretty(&report).invariant()?;
    text.push('\n');
    dir.write("report.json", text.as_bytes()).input()?;
    dir.finish(run_manifest("train", cfg)).input()?;
    Ok(report)
}

fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let report = train_into(cfg, out)?;
    println!("{}", summary_line(&report.timeline));
    Ok(())
}

fn cmd_ablation(cfg: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let mut dir = OutDir::create(out).input()?;
    let mut rows = Vec::new();
    for (name, desc, len) in ABLATION_ROWS {
        let sub = match (desc, len) {
            (false, false) => "base",
            (true, false) => "desc",
            _ => "desc_len",
        };
        let run = TrainConfig {
            enable_desc: desc,
            enable_len: len,
            ..cfg.clone()
        };
        let report = train_into(&run, &dir.path().join(sub))?;
        println!("{name}: {}", summary_line(&report.timeline));
        for f in ["metrics.csv", "traces.jsonl", "report.json", output::MANIFEST] {
            dir.note(format!("{sub}/{f}"));
        }
        rows.push(ablation_row(name, &report));
    }
    let table = render_ablation(&rows);
    print!("{table}");
    dir.write("ablation.md", table.as_bytes()).input()?;
    let mut json = serde_json::to_string_pretty(&rows).invariant()?;
    json.push('\n');
    dir.write("ablation.json", json.as_bytes()).input()?;
    dir.finish(run_manifest("ablation", cfg)).input()
}

fn cmd_sweep(cfg: &TrainConfig, out: &Path) -> Result<(), Failure> {
    let report = sweep(cfg).map_err(harness)?;
    let table = render_sweep(&report);
    print!("{table}");
    let mut dir = OutDir::create(out).input()?;
    dir.write("sweep.md", table.as_bytes()).input()?;
    let mut json = serde_json::to_string_pretty(&report).invariant()?;
    json.push('\n');
    dir.write("sweep.json", json.as_bytes()).input()?;
    dir.finish(run_manifest("sweep", cfg)).input()
}

fn cmd_score(input: &Path, cfg: &TrainConfig, out: Option<&Path>, manifest: Manifest) -> Result<(), Failure> {
    let (lines, summary) = score::score_file(input, &cfg.reward_config(), &cfg.grpo_config())?;
    let mut body = Vec::new();
    for l in &lines {
        json_line(&mut body, l).invariant()?;
    }
    let mut sum = serde_json::to_string_pretty(&summary).invariant()?;
    sum.push('\n');
    match out {
        Some(out) => {
            let mut dir = OutDir::create(out).input()?;
            dir.write("breakdowns.jsonl", &body).input()?;
            dir.write("summary.json", sum.as_bytes()).input()?;
            dir.finish(manifest).input()?;
            print!("{sum}");
        }
        None => {
            std::io::stdout().write_all(&body).input()?;
            eprint!("{sum}");
        }
    }
    if summary.trace_mismatches > 0 {
        return Err(Failure::Invariant(anyhow!(
            "{} trace samples did not reproduce their recorded rewards",
            summary.trace_mismatches
        )));
    }
    Ok(())
}

fn cmd_oracle(suite: &str, seed: u64, count: Option<usize>, out: Option<&Path>, manifest: Manifest) -> Result<(), Failure> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(suite).ok_or_else(|| Failure::Input(anyhow!("unknown suite {suite:?}")))?]
    };
    let reports: Vec<OracleReport> = suites
        .iter()
        .map(|s| s.run(count.unwrap_or_else(|| s.default_count()), seed))
        .collect();
    for r in &reports {
        println!(
            "{} {}: {} cases, {} failures, max error {:e} (tolerance {:e}); {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.suite,
            r.cases,
            r.failures,
            r.max_error,
            r.tolerance,
            r.detail
        );
        for f in &r.first_failures {
            println!("  seed {seed} {f}");
        }
    }
    if let Some(out) = out {
        let mut dir = OutDir::create(out).input()?;
        let mut json = serde_json::to_string_pretty(&reports).invariant()?;
        json.push('\n');
        dir.write("oracle.json", json.as_bytes()).input()?;
        dir.finish(manifest).input()?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(anyhow!("oracle mismatch in {}", failed.join(", "))))
    }
}

fn cmd_eval(input: &Path, gt: &Path, out: Option<&Path>, manifest: Manifest) -> Result<(), Failure> {
    let rows = eval::eval_files(input, gt)?;
    let table = eval::render(&rows);
    print!("{table}");
    if let Some(out) = out {
        let mut dir = OutDir::create(out).input()?;
        let mut body = Vec::new();
        for r in &rows {
            json_line(&mut body, r).invariant()?;
        }
        dir.write("eval.jsonl", &body).input()?;
        dir.write("eval.md", table.as_bytes()).input()?;
        dir.finish(manifest).input()?;
    }
    Ok(())
}

fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let m = Manifest::load(manifest_path).input()?;
    if m.engine_version != segreward::VERSION {
        log::warn!(
            "manifest written by engine {}, replaying with {}",
            m.engine_version,
            segreward::VERSION
        );
    }
    let out = out.unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let cfg = match &m.config {
        Some(text) => TrainConfig::parse(text).context("manifest config").input()?,
        None => TrainConfig::default(),
    };
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| Failure::Input(anyhow!("manifest has no {what} path")))
    };
    match m.command.as_str() {
        "train" => cmd_train(&cfg, &out),
        "ablation" => cmd_ablation(&cfg, &out),
        "sweep" => cmd_sweep(&cfg, &out),
        "score" => cmd_score(&need(&m.input, "input")?, &cfg, Some(&out), m.clone()),
        "eval" => cmd_eval(&need(&m.input, "input")?, &need(&m.gt, "gt")?, Some(&out), m.clone()),
        "oracle" => {
            let suite = m.suite.clone().unwrap_or_else(|| "all".into());
            cmd_oracle(&suite, m.seed.unwrap_or(0), m.count, Some(&out), m.clone())
        }
        other => Err(Failure::Input(anyhow!("manifest command {other:?} cannot be replayed"))),
    }
}

/// Caps the worker pool from `ENGINE_THREADS`.
fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("ENGINE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("ENGINE_THREADS={v:?}"))
        .input()?;
    if n == 0 {
        return Err(Failure::Input(anyhow!("ENGINE_THREADS must be positive")));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
        .invariant()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Score { input, config, out } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate().map_err(harness)?;
            let manifest = Manifest {
                input: Some(input.clone()),
                ..run_manifest("score", &cfg)
            };
            cmd_score(&input, &cfg, out.as_deref(), manifest)
        }
        Command::Train(args) => cmd_train(&resolve(&args)?, &args.out),
        Command::Ablation(args) => cmd_ablation(&resolve(&args)?, &args.out),
        Command::Sweep(args) => cmd_sweep(&resolve(&args)?, &args.out),
        Command::Oracle { suite, seed, count, out } => {
            let manifest = Manifest {
                seed: Some(seed),
                suite: Some(suite.clone()),
                count,
                ..Manifest::new("oracle")
            };
            cmd_oracle(&suite, seed, count, out.as_deref(), manifest)
        }
        Command::Eval { input, gt, out } => {
            let manifest = Manifest {
                input: Some(input.clone()),
                gt: Some(gt.clone()),
                ..Manifest::new("eval")
            };
            cmd_eval(&input, &gt, out.as_deref(), manifest)
        }
        Command::Replay { input, out } => replay(&input, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
