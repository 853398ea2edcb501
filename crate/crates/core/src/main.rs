use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bias_lens::corpus::{read_corpus, validate};
use bias_lens::pipeline::{Pipeline, RunConfig, Stage};
use bias_lens::synth::{generate, write_synth, SynthSpec};
use bias_lens::{Error, Result};

/// Finds biased instances in LLM traces, groups them, and turns them into
/// debiasing prompts.
#[derive(Parser)]
#[command(name = "bias-lens", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus for structural and value errors.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Mine counter-example pairs (calibrating thresholds unless fixed).
    Mine(RunArgs),
    /// Apply the influential and typical filters to mined pairs.
    Select(RunArgs),
    /// Extract bias vectors from the selected pairs.
    Extract(RunArgs),
    /// Project bias vectors to 2-D and cluster them.
    Cluster(RunArgs),
    /// Induce bias patterns per cluster through a chat endpoint.
    Induce(RunArgs),
    /// Build zero-shot and few-shot debiasing prompts.
    Prompt(RunArgs),
    /// Write the scatter plot and summary for a run directory.
    Report(RunArgs),
    /// Generate a synthetic corpus with planted bias groups.
    Synth(SynthArgs),
    /// Run stages in order, reusing completed ones.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated subset of stages.
        #[arg(long)]
        stages: Option<String>,
        /// Re-run stages even when their outputs are current.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Induction backend: live or replay.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Continue when calibrated counts miss their targets.
    #[arg(long)]
    allow_infeasible: bool,
    /// Any config key, as KEY=VALUE; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        let path = |p: Option<PathBuf>| p.map(|p| p.display().to_string());
        push("manifest", path(self.manifest));
        push("run_dir", path(self.run_dir));
        push("tau", self.tau.map(|v| v.to_string()));
        push("tau_p", self.tau_p.map(|v| v.to_string()));
        push("mu", self.mu.map(|v| v.to_string()));
        push("eps", self.eps.map(|v| v.to_string()));
        push("min_pts", self.min_pts.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("mode", self.mode);
        push("replay", path(self.replay));
        push("endpoint", self.endpoint);
        push("model", self.model);
        if self.allow_infeasible {
            push("allow_infeasible", Some("true".into()));
        }
        for (k, v) in pairs {
            cfg.set(k, &v)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_records: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long, default_value_t = 5.0)]
    strength: f64,
    #[arg(long, default_value_t = 0.2)]
    fail_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_stages(cfg: RunConfig) -> Result<()> {
    let outcome = Pipeline::new(cfg).run()?;
    for s in &outcome.executed {
        log::info!("completed {}", s.name());
    }
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(())
}

fn single(args: RunArgs, stage: Stage) -> Result<()> {
    let mut cfg = args.into_config()?;
    cfg.stages = vec![stage];
    cfg.resume = false;
    run_stages(cfg)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Validate { manifest } => {
            let corpus = read_corpus(&manifest)?;
            let report = validate(&corpus);
            println!("{}", serde_json::to_string_pretty(&report)?);
            match report.violations.first() {
                Some(v) => Err(Error::Validation(format!("{} violations, first: {}", report.violations.len(), v.message))),
                None => Ok(()),
            }
        }
        Command::Mine(a) => single(a, Stage::Mine),
        Command::Select(a) => single(a, Stage::Select),
        Command::Extract(a) => single(a, Stage::Extract),
        Command::Cluster(a) => single(a, Stage::Cluster),
        Command::Induce(a) => single(a, Stage::Induce),
        Command::Prompt(a) => single(a, Stage::Prompt),
        Command::Report(a) => single(a, Stage::Report),
        Command::Synth(a) => {
            let spec = SynthSpec {
                n_records: a.n_records,
                dim: a.dim,
                n_groups: a.groups,
                bias_strength: a.strength,
                fail_rate: a.fail_rate,
                seed: a.seed,
                ..Default::default()
            };
            let (corpus, truth) = generate(&spec)?;
            let manifest = write_synth(&a.out, &corpus, &truth)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Run { args, stages, force } => {
            let mut cfg = args.into_config()?;
            if let Some(s) = stages {
                cfg.set("stages", &s)?;
            }
            cfg.resume = !force;
            run_stages(cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
