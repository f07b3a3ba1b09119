//! `epgrpo` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal failure.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epgrpo::analysis::{analyze_run, compare, read_metrics, reward_plot_svg, RunAnalysis};
use epgrpo::compute_group_advantages_with;
use epgrpo::objective::{verify_theorem1, ObjectiveError};
use epgrpo::policy::PolicyShape;
use epgrpo::rollout::{parse_rollout_group, serialize_group_advantages, AdvantageConfig};
use epgrpo::tasks::TaskKind;
use epgrpo::trainer::{self, theorem_case, Algorithm, RunConfig, TrainError};

/// Environment variable naming the directory under which `train` creates run
/// directories when `--out` is not given.
const RUN_ROOT_ENV: &str = "EPGRPO_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "epgrpo",
    version,
    about = "Entropy-gated, progress-shaped GRPO advantages and a toy trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy policy; writes metrics.jsonl, evals.jsonl, checkpoints and summary.json.
    Train(TrainArgs),
    /// Compute token advantages for rollout groups (one JSON group per line).
    Advantages(AdvantagesArgs),
    /// Check the regularizer gradient identity on a random policy by finite differences.
    VerifyTheorem(VerifyArgs),
    /// Summarize one or more runs (run directories or metrics.jsonl files).
    Analyze(AnalyzeArgs),
}

/// Flags override the config file, which overrides built-in defaults.
#[derive(Args)]
struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $EPGRPO_RUN_ROOT/<run-id>, or runs/<run-id>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run identifier used for the default output directory.
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// grpo, epgrpo, or an ablation such as +eg+ips.
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    batch_prompts: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    eval_instances: Option<usize>,
    /// Print the effective config and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct AdvantagesArgs {
    /// Rollout JSONL ("-" for stdin).
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Advantage config JSON (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "epgrpo")]
    algorithm: Algorithm,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    context_order: usize,
    #[arg(long, default_value_t = 4)]
    max_positions: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value_t = 1e-6)]
    fd_step: f64,
    /// Advantage config JSON (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directories or metrics.jsonl files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write the full report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write an SVG plot of smoothed reward curves here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown task {s:?} (copy, reverse, modsum)"))
}

enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| CliError::Data(format!("stdin: {e}")))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            fs::write(p, text).map_err(|e| CliError::Internal(format!("{}: {e}", p.display())))
        }
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("stdout: {e}"))),
    }
}

fn load_advantage_config(path: Option<&Path>) -> Result<AdvantageConfig, CliError> {
    match path {
        None => Ok(AdvantageConfig::default()),
        Some(p) => serde_json::from_str(&read_input(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_str::<RunConfig>(&read_input(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.algorithm {
        cfg.algorithm = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.group_size {
        cfg.group_size = v;
    }
    if let Some(v) = args.batch_prompts {
        cfg.batch_prompts = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.task {
        cfg.task.task = v;
    }
    if let Some(v) = args.eval_instances {
        cfg.eval.instances = v;
    }
    cfg.validate()?;
    if args.print_config {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        return write_output(None, &(text + "\n"));
    }

    let out = match args.out {
        Some(dir) => dir,
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            let id = args
                .run_id
                .unwrap_or_else(|| format!("{}-seed{}", cfg.algorithm, cfg.seed));
            root.join(id)
        }
    };
    fs::create_dir_all(&out).map_err(|e| CliError::Internal(format!("{}: {e}", out.display())))?;
    let cfg_path = out.join("run_config.json");
    fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
    )
    .map_err(|e| CliError::Internal(format!("{}: {e}", cfg_path.display())))?;

    let report = trainer::run(&cfg, Some(&out))?;
    let s = &report.summary;
    eprintln!(
        "{}: {} steps, smoothed reward {:.3}, zero-variance ratio {:.3}{}",
        out.display(),
        s.steps,
        s.final_smoothed_reward,
        s.overall_zero_variance_ratio,
        s.final_accuracy
            .map(|a| format!(", accuracy {a:.3}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_advantages(args: AdvantagesArgs) -> Result<(), CliError> {
    let cfg = load_advantage_config(args.config.as_deref())?;
    let text = read_input(&args.input)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| {
            CliError::Data(format!("{}: line {}: {e}", args.input.display(), i + 1))
        };
        let group = parse_rollout_group(line).map_err(|e| at(&e))?;
        let adv = compute_group_advantages_with(&group, &cfg, args.algorithm.flags())
            .map_err(|e| at(&e))?;
        out.push_str(&serialize_group_advantages(&adv));
        out.push('\n');
    }
    write_output(args.output.as_deref(), &out)
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let cfg = load_advantage_config(args.config.as_deref())?;
    let shape = PolicyShape::new(args.vocab, args.context_order, args.max_positions)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !(args.fd_step > 0.0 && args.fd_step.is_finite()) {
        return Err(CliError::Usage(format!(
            "--fd-step must be positive, got {}",
            args.fd_step
        )));
    }
    let (params, group) = theorem_case(args.seed, shape, args.group_size, args.max_len)?;
    let report = verify_theorem1(&params, &group, &cfg, args.fd_step).map_err(|e| match e {
        ObjectiveError::ZeroVariance(_) | ObjectiveError::DegenerateGroup(_) => {
            CliError::Data(e.to_string())
        }
        other => CliError::Internal(other.to_string()),
    })?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_output(None, &(text + "\n"))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let mut runs: Vec<RunAnalysis> = Vec::new();
    let mut curves = Vec::new();
    for path in &args.runs {
        let a = analyze_run(path).map_err(|e| CliError::Data(e.to_string()))?;
        if args.plot.is_some() {
            let file = if path.is_dir() {
                path.join("metrics.jsonl")
            } else {
                path.clone()
            };
            let metrics = read_metrics(&file).map_err(|e| CliError::Data(e.to_string()))?;
            curves.push((
                a.run_id.clone(),
                metrics.iter().map(|m| m.mean_reward).collect(),
            ));
        }
        runs.push(a);
    }
    let mut text = format!(
        "{:<24} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
        "run", "steps", "zv_early", "zv_mid", "zv_late", "zv_all", "reward", "mean_kl", "grad_norm"
    );
    for r in &runs {
        text.push_str(&format!(
            "{:<24} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.4} {:>9.2e} {:>9.2e}\n",
            r.run_id,
            r.steps,
            r.stage_zero_variance[0],
            r.stage_zero_variance[1],
            r.stage_zero_variance[2],
            r.overall_zero_variance,
            r.final_smoothed_reward,
            r.mean_kl,
            r.mean_grad_norm
        ));
    }
    let comparison = compare(runs).expect("at least one run");
    if comparison.runs.len() > 1 {
        text.push_str(&format!("best smoothed reward: {}\n", comparison.best_run));
    }
    write_output(None, &text)?;
    if let Some(p) = &args.json {
        let body = serde_json::to_string_pretty(&comparison).expect("report serializes") + "\n";
        write_output(Some(p), &body)?;
    }
    if let Some(p) = &args.plot {
        write_output(Some(p), &reward_plot_svg(&curves))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Advantages(a) => cmd_advantages(a),
        Command::VerifyTheorem(a) => cmd_verify(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epgrpo: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
