//! The training loop and everything it writes to disk.

pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod rng;
pub mod step;
pub mod warm;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_records, write_records, Record};
pub use eval::{evaluate, EvalReport, Policy};
pub use optim::{clip_grad_norm, global_norm, lr_schedule, optimizer_update, AdamW};
pub use rng::stream_rng;
pub use step::{collect_rollouts, train_step, MiniBatchLoss, SdpoToken, StepOutcome};
pub use warm::{warm_start, WarmStartReport};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{init_params, PolicyParams};
use crate::types::{Branch, RolloutGroup, TokenId};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "trainer_state.json";
pub const WARM_START_FILE: &str = "warm_start.json";

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 12] = [
    "step",
    "wall_seconds",
    "mean_loss",
    "grpo_frac",
    "sdpo_frac",
    "teacher_avail_frac",
    "mean_teacher_entropy",
    "mean_response_length",
    "train_accuracy",
    "eval_avg_at_k",
    "grad_norm",
    "dropped_token_count",
];

/// One row of `metrics.csv`. `wall_seconds` is the only nondeterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub wall_seconds: f64,
    pub mean_loss: f64,
    pub grpo_frac: f64,
    pub sdpo_frac: f64,
    pub teacher_avail_frac: f64,
    pub mean_teacher_entropy: Option<f64>,
    pub mean_response_length: f64,
    pub train_accuracy: f64,
    pub eval_avg_at_k: Option<f64>,
    pub grad_norm: f64,
    pub dropped_token_count: usize,
}

impl StepMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &StepMetrics) -> bool {
        StepMetrics {
            wall_seconds: 0.0,
            ..self.clone()
        } == StepMetrics {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

/// One line of `rollouts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub group_id: usize,
    pub rollout_index: usize,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub reward: f64,
    pub branch: Branch,
    pub teacher_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub student: PolicyParams,
    pub teacher: PolicyParams,
    pub optimizer: AdamW,
    /// Outer steps completed.
    pub step: usize,
}

impl TrainerState {
    /// Student and teacher both start from `params`.
    pub fn from_params(config: TrainConfig, params: PolicyParams) -> Result<Self> {
        config.validate()?;
        if params.config() != &config.model {
            return Err(Error::config("model", "parameters do not match the model config"));
        }
        Ok(TrainerState {
            optimizer: AdamW::new(params.len()),
            teacher: params.clone(),
            student: params,
            config,
            step: 0,
        })
    }

    /// Random init followed by the supervised warm start.
    pub fn initialize(config: TrainConfig) -> Result<(Self, WarmStartReport)> {
        config.validate()?;
        let mut params = init_params(&config.model, config.seed)?;
        let report = warm_start(&mut params, &config)?;
        Ok((TrainerState::from_params(config, params)?, report))
    }

    pub fn eval_due(&self, step: usize) -> bool {
        step == 0 || (step + 1).is_multiple_of(self.config.eval_interval)
    }

    /// avg@k of the student on the run's fixed evaluation prompts.
    pub fn evaluate_student(&self) -> Result<EvalReport> {
        let c = &self.config;
        let mut rng = stream_rng(c.seed, "eval", c.env.seed, 0);
        evaluate(
            &self.student,
            &c.env,
            c.eval_prompts,
            c.eval_rollouts,
            c.eval_temperature,
            c.eval_top_p,
            c.max_response_len,
            &mut rng,
        )
    }

    /// Runs one outer step, evaluating when the schedule asks for it.
    pub fn advance(&mut self) -> Result<(StepMetrics, Vec<RolloutGroup>, StepOutcome)> {
        let start = Instant::now();
        let step = self.step;
        let groups = collect_rollouts(&self.config, &self.student, step)?;
        let out = train_step(self, &groups)?;
        let eval = if self.eval_due(step) {
            Some(self.evaluate_student()?.avg_at_k)
        } else {
            None
        };
        let metrics = StepMetrics {
            step,
            wall_seconds: start.elapsed().as_secs_f64(),
            mean_loss: out.mean_loss,
            grpo_frac: out.grpo_frac,
            sdpo_frac: out.sdpo_frac,
            teacher_avail_frac: out.teacher_avail_frac,
            mean_teacher_entropy: out.mean_teacher_entropy,
            mean_response_length: out.mean_response_length,
            train_accuracy: out.train_accuracy,
            eval_avg_at_k: eval,
            grad_norm: out.grad_norm,
            dropped_token_count: out.dropped_token_count,
        };
        Ok((metrics, groups, out))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        write_records(
            &dir.join(CHECKPOINT_FILE),
            &[
                Record::new("student", &c.model, self.step, c.seed, self.student.flat().to_vec()),
                Record::new("teacher", &c.model, self.step, c.seed, self.teacher.flat().to_vec()),
            ],
        )?;
        write_records(
            &dir.join(OPTIMIZER_FILE),
            &[
                Record::new("adam_m", &c.model, self.step, c.seed, self.optimizer.m.clone()),
                Record::new("adam_v", &c.model, self.step, c.seed, self.optimizer.v.clone()),
            ],
        )?;
        let meta = SavedState {
            step: self.step,
            optimizer_updates: self.optimizer.t,
            config: c.clone(),
        };
        write_json(&dir.join(STATE_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SavedState = read_json(&dir.join(STATE_FILE))?;
        meta.config.validate()?;
        let path = dir.join(CHECKPOINT_FILE);
        let mut recs = read_records(&path)?;
        let student = checkpoint::take_record(&mut recs, "student", &path)?.into_params()?;
        let teacher = checkpoint::take_record(&mut recs, "teacher", &path)?.into_params()?;
        let path = dir.join(OPTIMIZER_FILE);
        let mut recs = read_records(&path)?;
        let mut optimizer = AdamW::new(student.len());
        optimizer.m = checkpoint::take_record(&mut recs, "adam_m", &path)?.values;
        optimizer.v = checkpoint::take_record(&mut recs, "adam_v", &path)?.values;
        optimizer.t = meta.optimizer_updates;
        if optimizer.m.len() != student.len() || optimizer.v.len() != student.len() {
            return Err(Error::ShapeMismatch {
                expected: student.len(),
                actual: optimizer.m.len(),
            });
        }
        Ok(TrainerState {
            config: meta.config,
            student,
            teacher,
            optimizer,
            step: meta.step,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    step: usize,
    optimizer_updates: u64,
    config: TrainConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(METRICS_COLUMNS) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected columns {METRICS_COLUMNS:?}, found {headers:?}"),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn rollout_records(step: usize, groups: &[RolloutGroup], out: &StepOutcome) -> Vec<RolloutRecord> {
    groups
        .iter()
        .zip(&out.decisions)
        .flat_map(|(g, ds)| {
            g.rollouts
                .iter()
                .zip(ds)
                .enumerate()
                .map(move |(i, (r, d))| RolloutRecord {
                    step,
                    group_id: g.group_id,
                    rollout_index: i,
                    prompt: r.prompt.clone(),
                    response: r.response.clone(),
                    reward: r.reward,
                    branch: d.branch,
                    teacher_index: d.teacher_index,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in the output directory if there is one.
    pub resume: bool,
    /// Print one progress line per evaluation.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub warm_start: Option<WarmStartReport>,
    pub resumed_from: Option<usize>,
}

impl RunSummary {
    pub fn eval_points(&self) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter_map(|m| m.eval_avg_at_k.map(|e| (m.step, e)))
            .collect()
    }
}

/// Trains for `config.total_steps` outer steps, writing metrics, rollouts,
/// checkpoints and the resolved config into `out_dir`.
pub fn run_training(config: &TrainConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let rollouts_path = out_dir.join(ROLLOUTS_FILE);

    let resumable = opts.resume && out_dir.join(STATE_FILE).exists();
    let (mut state, mut history, warm, resumed_from) = if resumable {
        let mut state = TrainerState::load(out_dir)?;
        if state.config.model != config.model || state.config.seed != config.seed {
            return Err(Error::config(
                "model",
                "resume needs the model shape and seed the checkpoint was written with",
            ));
        }
        state.config = config.clone();
        let mut history = read_metrics(&metrics_path)?;
        history.retain(|m| m.step < state.step);
        let mut kept = read_rollouts(&rollouts_path)?;
        kept.retain(|r| r.step < state.step);
        rewrite_jsonl(&rollouts_path, &kept)?;
        let from = state.step;
        (state, history, None, Some(from))
    } else {
        let (state, report) = TrainerState::initialize(config.clone())?;
        write_json(&out_dir.join(WARM_START_FILE), &report)?;
        File::create(&rollouts_path).map_err(|e| Error::io(&rollouts_path, e))?;
        (state, Vec::new(), Some(report), None)
    };
    write_json(&out_dir.join(CONFIG_FILE), config)?;
    write_metrics(&metrics_path, &history)?;

    let mut rollouts = BufWriter::new(
        OpenOptions::new()
            .append(true)
            .open(&rollouts_path)
            .map_err(|e| Error::io(&rollouts_path, e))?,
    );
    let mut metrics_out = csv::WriterBuilder::new().has_headers(false).from_writer(
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?,
    );
    while state.step < config.total_steps {
        let step = state.step;
        let (m, groups, out) = state.advance()?;
        for rec in rollout_records(step, &groups, &out) {
            serde_json::to_writer(&mut rollouts, &rec)?;
            rollouts.write_all(b"\n").map_err(|e| Error::io(&rollouts_path, e))?;
        }
        metrics_out.serialize(&m)?;
        metrics_out.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if opts.verbose {
            if let Some(e) = m.eval_avg_at_k {
                eprintln!(
                    "[{}] step {:>4}  loss {:+.4}  train_acc {:.3}  eval {:.3}  sdpo {:.2}",
                    config.algorithm.name(),
                    step,
                    m.mean_loss,
                    m.train_accuracy,
                    e,
                    m.sdpo_frac
                );
            }
        }
        history.push(m);
        if state.step % config.checkpoint_interval == 0 {
            rollouts.flush().map_err(|e| Error::io(&rollouts_path, e))?;
            state.save(out_dir)?;
        }
    }
    rollouts.flush().map_err(|e| Error::io(&rollouts_path, e))?;
    state.save(out_dir)?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        metrics: history,
        warm_start: warm,
        resumed_from,
    })
}

fn rewrite_jsonl(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
