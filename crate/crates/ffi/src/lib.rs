//! C ABI over `srpo-core`.
//!
//! Handles are opaque heap objects owned by the caller once created and
//! released with the matching `*_free`. Every fallible call returns an
//! `SrpoStatus`; on failure the message is kept per thread and can be copied
//! out with `srpo_last_error_message`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use srpo_core::config::{apply_override, Algorithm, TrainConfig};
use srpo_core::objective::{self, Divergence, SupportSet};
use srpo_core::router;
use srpo_core::trainer::{self, RunOptions, StepMetrics, TrainerState};
use srpo_core::types::Branch;
use srpo_core::Error;

pub const SRPO_ALGORITHM_GRPO: i32 = 0;
pub const SRPO_ALGORITHM_SDPO: i32 = 1;
pub const SRPO_ALGORITHM_SRPO: i32 = 2;
pub const SRPO_ALGORITHM_SRPO_NO_DW: i32 = 3;
pub const SRPO_ALGORITHM_ADV_MIX: i32 = 4;

pub const SRPO_DIVERGENCE_FKL: i32 = 0;
pub const SRPO_DIVERGENCE_RKL: i32 = 1;
pub const SRPO_DIVERGENCE_JS: i32 = 2;

pub const SRPO_BRANCH_GRPO: i32 = 0;
pub const SRPO_BRANCH_SDPO: i32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrpoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    InvalidInput = 4,
    NonFinite = 5,
    InfiniteDivergence = 6,
    Model = 7,
    Io = 8,
    Schema = 9,
    Json = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Opaque training configuration.
pub struct SrpoConfig {
    inner: TrainConfig,
}

/// Opaque trainer: student, EMA teacher, optimizer moments and step counter.
pub struct SrpoTrainer {
    inner: TrainerState,
}

/// One training step's metrics. Missing values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SrpoStepMetrics {
    pub step: u64,
    pub wall_seconds: f64,
    pub mean_loss: f64,
    pub grpo_frac: f64,
    pub sdpo_frac: f64,
    pub teacher_avail_frac: f64,
    pub mean_teacher_entropy: f64,
    pub mean_response_length: f64,
    pub train_accuracy: f64,
    pub eval_avg_at_k: f64,
    pub grad_norm: f64,
    pub dropped_token_count: u64,
}

impl From<&StepMetrics> for SrpoStepMetrics {
    fn from(m: &StepMetrics) -> Self {
        SrpoStepMetrics {
            step: m.step as u64,
            wall_seconds: m.wall_seconds,
            mean_loss: m.mean_loss,
            grpo_frac: m.grpo_frac,
            sdpo_frac: m.sdpo_frac,
            teacher_avail_frac: m.teacher_avail_frac,
            mean_teacher_entropy: m.mean_teacher_entropy.unwrap_or(f64::NAN),
            mean_response_length: m.mean_response_length,
            train_accuracy: m.train_accuracy,
            eval_avg_at_k: m.eval_avg_at_k.unwrap_or(f64::NAN),
            grad_norm: m.grad_norm,
            dropped_token_count: m.dropped_token_count as u64,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SrpoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => SrpoStatus::Config,
            Error::Model(_) | Error::ShapeMismatch { .. } => SrpoStatus::Model,
            Error::NonFinite { .. } => SrpoStatus::NonFinite,
            Error::InfiniteDivergence { .. } => SrpoStatus::InfiniteDivergence,
            Error::InvalidInput(_) => SrpoStatus::InvalidInput,
            Error::Schema { .. } => SrpoStatus::Schema,
            Error::Io { .. } => SrpoStatus::Io,
            Error::Json(_) | Error::Csv(_) => SrpoStatus::Json,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrpoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            SrpoStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SrpoStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SrpoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SrpoStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn algorithm(code: i32) -> Result<Algorithm, Failure> {
    match code {
        SRPO_ALGORITHM_GRPO => Ok(Algorithm::Grpo),
        SRPO_ALGORITHM_SDPO => Ok(Algorithm::Sdpo),
        SRPO_ALGORITHM_SRPO => Ok(Algorithm::Srpo),
        SRPO_ALGORITHM_SRPO_NO_DW => Ok(Algorithm::SrpoNoDw),
        SRPO_ALGORITHM_ADV_MIX => Ok(Algorithm::AdvMix),
        _ => Err(Failure(
            SrpoStatus::InvalidInput,
            format!("unknown algorithm code {code}"),
        )),
    }
}

fn divergence_kind(code: i32) -> Result<Divergence, Failure> {
    match code {
        SRPO_DIVERGENCE_FKL => Ok(Divergence::ForwardKl),
        SRPO_DIVERGENCE_RKL => Ok(Divergence::ReverseKl),
        SRPO_DIVERGENCE_JS => Ok(Divergence::JensenShannon),
        _ => Err(Failure(
            SrpoStatus::InvalidInput,
            format!("unknown divergence code {code}"),
        )),
    }
}

/// Copies `text` plus a NUL into `buf`; `*needed` receives the full size.
unsafe fn copy_out(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let size = text.len() + 1;
    if !needed.is_null() {
        *needed = size;
    }
    if buf.is_null() || len < size {
        return Err(Failure(
            SrpoStatus::BufferTooSmall,
            format!("buffer of {len} bytes, {size} needed"),
        ));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

unsafe fn boxed_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to fit). Returns the full length including the NUL, or 0 if the
/// last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn srpo_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = (bytes.len() - 1).min(len - 1);
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Desk-scale preset for the given `SRPO_ALGORITHM_*` code.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn srpo_config_desk(algorithm_code: i32, out: *mut *mut SrpoConfig) -> SrpoStatus {
    guard(|| {
        let inner = TrainConfig::desk(algorithm(algorithm_code)?);
        boxed_out(out, SrpoConfig { inner })
    })
}

/// The published hyperparameters on the desk-scale model.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn srpo_config_paper(algorithm_code: i32, out: *mut *mut SrpoConfig) -> SrpoStatus {
    guard(|| {
        let inner = TrainConfig::paper(algorithm(algorithm_code)?);
        boxed_out(out, SrpoConfig { inner })
    })
}

/// Parses and validates a JSON config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn srpo_config_from_json(json: *const c_char, out: *mut *mut SrpoConfig) -> SrpoStatus {
    guard(|| {
        let inner = TrainConfig::from_json_str(str_arg(json, "json")?)?;
        inner.validate()?;
        boxed_out(out, SrpoConfig { inner })
    })
}

/// Applies one `key=value` override (dotted keys reach nested sections).
/// The config is left unchanged if the result does not validate.
///
/// # Safety
/// `config` must be a live handle; `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn srpo_config_set(config: *mut SrpoConfig, assignment: *const c_char) -> SrpoStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let mut value = serde_json::to_value(&cfg.inner).map_err(Error::from)?;
        apply_override(&mut value, str_arg(assignment, "assignment")?)?;
        let next: TrainConfig = serde_json::from_value(value).map_err(Error::from)?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Writes the config as pretty JSON. With a null or short buffer, returns
/// `BufferTooSmall` and stores the required size in `*needed`.
///
/// # Safety
/// `config` must be a live handle; `buf` null or valid for `len` bytes;
/// `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn srpo_config_to_json(
    config: *const SrpoConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> SrpoStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        copy_out(&cfg.inner.to_json_pretty(), buf, len, needed)
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srpo_config_free(config: *mut SrpoConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Initializes a trainer: random parameters followed by the supervised warm start.
///
/// # Safety
/// `config` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_new(config: *const SrpoConfig, out: *mut *mut SrpoTrainer) -> SrpoStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let (inner, _) = TrainerState::initialize(cfg.inner.clone())?;
        boxed_out(out, SrpoTrainer { inner })
    })
}

/// Restores a trainer saved with `srpo_trainer_save` or by a training run.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_load(dir: *const c_char, out: *mut *mut SrpoTrainer) -> SrpoStatus {
    guard(|| {
        let inner = TrainerState::load(&PathBuf::from(str_arg(dir, "dir")?))?;
        boxed_out(out, SrpoTrainer { inner })
    })
}

/// Collects rollouts, performs one outer step and evaluates if scheduled.
///
/// # Safety
/// `trainer` must be a live handle; `metrics` null or valid.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_step(trainer: *mut SrpoTrainer, metrics: *mut SrpoStepMetrics) -> SrpoStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        let (m, _, _) = t.inner.advance()?;
        if !metrics.is_null() {
            *metrics = SrpoStepMetrics::from(&m);
        }
        Ok(())
    })
}

/// avg@k of the student on the run's evaluation prompts.
///
/// # Safety
/// `trainer` must be a live handle; `avg_at_k` valid.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_evaluate(trainer: *const SrpoTrainer, avg_at_k: *mut f64) -> SrpoStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let out = avg_at_k.as_mut().ok_or_else(|| null("avg_at_k"))?;
        *out = t.inner.evaluate_student()?.avg_at_k;
        Ok(())
    })
}

/// Writes checkpoint, optimizer and trainer-state files into `dir`.
///
/// # Safety
/// `trainer` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_save(trainer: *const SrpoTrainer, dir: *const c_char) -> SrpoStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Failure(SrpoStatus::Io, format!("{}: {e}", dir.display())))?;
        t.inner.save(&dir)?;
        Ok(())
    })
}

/// Outer steps completed, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_step_count(trainer: *const SrpoTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.inner.step as u64)
}

/// Number of scalar parameters in the student, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_num_params(trainer: *const SrpoTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.inner.student.len() as u64)
}

/// # Safety
/// `trainer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srpo_trainer_free(trainer: *mut SrpoTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Full training run into `out_dir`, as the `train` command does.
///
/// # Safety
/// `config` must be a live handle; `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn srpo_run_training(
    config: *const SrpoConfig,
    out_dir: *const c_char,
    resume: bool,
) -> SrpoStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let opts = RunOptions { resume, verbose: false };
        trainer::run_training(&cfg.inner, &dir, &opts)?;
        Ok(())
    })
}

/// Group-relative advantages of `n` rewards into `out[n]`.
///
/// # Safety
/// `rewards` and `out` must be valid for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn srpo_group_advantages(
    rewards: *const f64,
    n: usize,
    adv_eps: f64,
    out: *mut f64,
) -> SrpoStatus {
    guard(|| {
        let r = slice_arg(rewards, n, "rewards")?;
        let a = objective::group_relative_advantages(r, adv_eps)?;
        out_slice(out, n, "out")?.copy_from_slice(&a.values);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn srpo_grpo_token_loss(
    logprob_new: f64,
    logprob_old: f64,
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
) -> f64 {
    objective::grpo_token_loss(logprob_new, logprob_old, advantage, eps_low, eps_high)
}

#[no_mangle]
pub extern "C" fn srpo_is_weight(logprob_current: f64, logprob_behavior: f64, rho: f64) -> f64 {
    objective::is_weight(logprob_current, logprob_behavior, rho)
}

/// Divergence between student and teacher probabilities that already share a support.
///
/// # Safety
/// `student` and `teacher` must be valid for `n` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn srpo_divergence(
    kind: i32,
    student: *const f64,
    teacher: *const f64,
    n: usize,
    out: *mut f64,
) -> SrpoStatus {
    guard(|| {
        let support = SupportSet {
            indices: (0..n).collect(),
            student_probs: slice_arg(student, n, "student")?.to_vec(),
            teacher_probs: slice_arg(teacher, n, "teacher")?.to_vec(),
        };
        let value = objective::divergence(divergence_kind(kind)?, &support)?;
        *out.as_mut().ok_or_else(|| null("out"))? = value;
        Ok(())
    })
}

/// Shannon entropy in nats; NaN for a null pointer with `n > 0`.
///
/// # Safety
/// `probs` must be valid for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn srpo_teacher_entropy(probs: *const f64, n: usize) -> f64 {
    match slice_arg(probs, n, "probs") {
        Ok(p) => objective::teacher_entropy(p),
        Err(_) => f64::NAN,
    }
}

/// Entropy-based token weights with unit mean, written to `out[n]`.
///
/// # Safety
/// `entropies` and `out` must be valid for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn srpo_dynamic_weights(entropies: *const f64, n: usize, beta: f64, out: *mut f64) -> SrpoStatus {
    guard(|| {
        let h = slice_arg(entropies, n, "entropies")?;
        let w = objective::dynamic_weights(h, beta)
            .ok_or_else(|| Failure(SrpoStatus::InvalidInput, "no entropies".into()))?;
        out_slice(out, n, "out")?.copy_from_slice(&w);
        Ok(())
    })
}

/// `SRPO_BRANCH_SDPO` for an incorrect rollout with a teacher, else `SRPO_BRANCH_GRPO`.
#[no_mangle]
pub extern "C" fn srpo_route_rollout(correct: bool, teacher_available: bool) -> i32 {
    match router::route_rollout(correct, teacher_available) {
        Branch::Grpo => SRPO_BRANCH_GRPO,
        Branch::Sdpo => SRPO_BRANCH_SDPO,
    }
}

#[no_mangle]
pub extern "C" fn srpo_lr_schedule(base_lr: f64, warmup_steps: usize, update: u64) -> f64 {
    trainer::lr_schedule(base_lr, warmup_steps, update)
}
