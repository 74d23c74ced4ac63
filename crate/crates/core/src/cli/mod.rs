//! The `srpo` command line: train, ablate, stats, plot, golden, dump-tasks.

pub mod ablate;
pub mod manifest;
pub mod plot;
pub mod stats;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

pub use ablate::{run_ablation, summarize, AblationPlan, SummaryRow, SUMMARY_FILE};
pub use manifest::{RunManifest, MANIFEST_FILE};
pub use plot::{plot_files, plot_runs, rolling_mean, DEFAULT_WINDOW};
pub use stats::{routing_report, StatsReport};

use crate::config::{Algorithm, TrainConfig};
use crate::env::{gen_task, EnvKind};
use crate::error::{Error, Result};
use crate::golden;
use crate::trainer::{run_training, stream_rng, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "srpo", version, about = "Sample-routed policy optimization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and write its artifacts and manifest.
    Train(TrainArgs),
    /// Train every variant over several seeds and tabulate eval accuracy.
    Ablate(AblateArgs),
    /// Recompute routing fractions from a rollout log.
    Stats(StatsArgs),
    /// Render SVG charts from one or more metrics files.
    Plot(PlotArgs),
    /// Print the objective reference values as JSON lines.
    Golden(GoldenArgs),
    /// Print sample tasks as JSON lines.
    DumpTasks(DumpTasksArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Args)]
#[group(required = false, multiple = false)]
pub struct ConfigSource {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a built-in preset instead of a file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Algorithm used with --preset.
    #[arg(long, default_value = "SRPO")]
    pub algorithm: Algorithm,
    /// Override a config key, e.g. `--set mix_lambda=0.9` or `--set model.embed_dim=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed; takes precedence over SRPO_SEED and --set.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn has_source(&self) -> bool {
        self.source.config.is_some() || self.source.preset.is_some()
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let value: Value = match (&self.source.config, self.source.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
            (None, Some(Preset::Paper)) => serde_json::to_value(TrainConfig::paper(self.algorithm))?,
            (None, _) => serde_json::to_value(TrainConfig::desk(self.algorithm))?,
        };
        let mut cfg = TrainConfig::resolve(value, &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Rerun the config recorded in a manifest and verify the checksums match.
    #[arg(long, conflicts_with_all = ["config", "preset", "overrides", "seed"])]
    pub manifest: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Suppress progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Root directory; each run goes to <out>/<VARIANT>/seed_<n>.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds, counting up from the config seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Variants to run; all five by default.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Algorithm>,
    /// Steps to tabulate; every shared evaluation step by default.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<usize>,
    /// Skip runs that already finished and continue interrupted ones.
    #[arg(long)]
    pub resume: bool,
    /// Suppress progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// rollouts.jsonl written by a run.
    pub rollouts: PathBuf,
    /// Metrics to cross-check; defaults to metrics.csv beside the log.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Skip the cross-check even if a metrics file exists.
    #[arg(long)]
    pub no_check: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// One metrics.csv per seed.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Directory for the SVG files.
    #[arg(long)]
    pub out: PathBuf,
    /// Trailing rolling-mean window, in steps.
    #[arg(long, default_value_t = plot::DEFAULT_WINDOW)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct GoldenArgs {
    /// Write the fixtures here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpTasksArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Environment kind, overriding the config.
    #[arg(long, value_enum)]
    pub env: Option<EnvArg>,
    /// Number of tasks to print.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Training step whose task stream to replay.
    #[arg(long, default_value_t = 0)]
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvArg {
    CopySort,
    ModArith,
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let opts = RunOptions {
        resume: args.resume,
        verbose: !args.quiet,
    };
    if let Some(mpath) = &args.manifest {
        let recorded = RunManifest::read(mpath)?;
        recorded.config.validate()?;
        run_training(&recorded.config, &args.out, &opts)?;
        let fresh = RunManifest::collect(&recorded.config, &args.out)?;
        fresh.write(&args.out)?;
        let bad = recorded.mismatches(&fresh);
        for m in &bad {
            write_out(
                out,
                &format!(
                    "MISMATCH {}: expected {} found {}\n",
                    m.path,
                    m.expected.as_deref().unwrap_or("-"),
                    m.found.as_deref().unwrap_or("-")
                ),
            )?;
        }
        if !bad.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} artifact(s) differ from the manifest",
                bad.len()
            )));
        }
        return write_out(out, &format!("reproduced {} artifacts\n", fresh.files.len()));
    }
    if !args.config.has_source() {
        return Err(Error::InvalidInput(
            "train needs --config, --preset or --manifest".into(),
        ));
    }
    let cfg = args.config.resolve()?;
    let summary = run_training(&cfg, &args.out, &opts)?;
    RunManifest::collect(&cfg, &args.out)?.write(&args.out)?;
    let best = summary
        .eval_points()
        .into_iter()
        .map(|(_, e)| e)
        .fold(f64::NAN, f64::max);
    write_out(
        out,
        &format!(
            "{} seed {}: {} steps in {}, best eval {:.4}\n",
            cfg.algorithm.name(),
            cfg.seed,
            summary.metrics.len(),
            args.out.display(),
            best
        ),
    )
}

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let base = if args.config.has_source() {
        args.config.resolve()?
    } else {
        ConfigArgs {
            source: ConfigSource {
                config: None,
                preset: Some(Preset::Desk),
            },
            ..args.config.clone()
        }
        .resolve()?
    };
    let plan = AblationPlan {
        seeds: (0..args.seeds as u64).map(|k| base.seed + k).collect(),
        variants: if args.variants.is_empty() {
            Algorithm::ALL.to_vec()
        } else {
            args.variants.clone()
        },
        checkpoints: (!args.checkpoints.is_empty()).then(|| args.checkpoints.clone()),
        base,
    };
    let opts = RunOptions {
        resume: args.resume,
        verbose: !args.quiet,
    };
    let rows = run_ablation(&plan, &args.out, &opts)?;
    let mut text = String::from("variant,step,seeds,eval_mean,eval_std\n");
    for r in rows {
        text += &format!(
            "{},{},{},{:.4},{:.4}\n",
            r.variant, r.step, r.seeds, r.eval_mean, r.eval_std
        );
    }
    write_out(out, &text)
}

pub fn cmd_stats(args: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let metrics = if args.no_check {
        None
    } else {
        args.metrics.clone().or_else(|| stats::sibling_metrics(&args.rollouts))
    };
    let report = routing_report(&args.rollouts, metrics.as_deref())?;
    let mut text = String::from("step,rollouts,grpo_frac,sdpo_frac,teacher_avail_frac\n");
    for s in &report.steps {
        text += &format!(
            "{},{},{},{},{}\n",
            s.step, s.rollouts, s.grpo_frac, s.sdpo_frac, s.teacher_avail_frac
        );
    }
    text += &format!(
        "# overall: grpo {:.4} sdpo {:.4} teacher_avail {:.4}\n",
        report.overall.grpo_fraction, report.overall.sdpo_fraction, report.overall.teacher_avail_fraction
    );
    text += &match (report.max_abs_diff, &metrics) {
        (Some(d), Some(p)) => format!("# matches {} (max abs diff {d:e})\n", p.display()),
        _ => "# no metrics cross-check\n".to_string(),
    };
    write_out(out, &text)
}

pub fn cmd_plot(args: &PlotArgs, out: &mut dyn Write) -> Result<()> {
    for p in plot_files(&args.metrics, &args.out, args.window)? {
        write_out(out, &format!("{}\n", p.display()))?;
    }
    Ok(())
}

/// Writes the golden fixtures; fails if any case misses its reference value.
pub fn cmd_golden(args: &GoldenArgs, out: &mut dyn Write) -> Result<()> {
    let cases = golden::cases();
    let mut text = String::new();
    for c in &cases {
        text += &json!({
            "name": c.name,
            "actual": c.actual,
            "expected": c.expected,
            "tolerance": golden::GOLDEN_TOLERANCE,
            "pass": c.passed(),
        })
        .to_string();
        text.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => write_out(out, &text)?,
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "golden cases failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_dump_tasks(args: &DumpTasksArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = if args.config.has_source() {
        args.config.resolve()?
    } else {
        let mut c = TrainConfig::desk(args.config.algorithm);
        if let Some(seed) = args.config.seed {
            c.seed = seed;
        }
        c
    };
    if let Some(kind) = args.env {
        cfg.env.kind = match kind {
            EnvArg::CopySort => EnvKind::CopySort,
            EnvArg::ModArith => EnvKind::ModArith,
        };
    }
    // Same stream the trainer draws its prompts from at this step.
    let mut rng = stream_rng(cfg.seed, "tasks", args.step as u64, cfg.env.seed);
    let mut text = String::new();
    for _ in 0..args.count {
        text += &serde_json::to_string(&gen_task(&cfg.env, &mut rng))?;
        text.push('\n');
    }
    write_out(out, &text)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::Plot(a) => cmd_plot(a, out),
        Command::Golden(a) => cmd_golden(a, out),
        Command::DumpTasks(a) => cmd_dump_tasks(a, out),
    }
}

/// Parses arguments, runs the command and returns the process exit status (0 or 1).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return i32::from(e.use_stderr());
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
