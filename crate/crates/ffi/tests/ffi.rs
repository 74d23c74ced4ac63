use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use srpo_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { srpo_last_error_message(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn tiny_config() -> *mut SrpoConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { srpo_config_desk(SRPO_ALGORITHM_SRPO, &mut cfg) },
        SrpoStatus::Ok
    );
    for set in [
        "model.embed_dim=8",
        "model.context_len=24",
        "model.mlp_expansion=2",
        "mini_batch_size=2",
        "question_batch_size=4",
        "group_size=4",
        "total_steps=3",
        "eval_interval=2",
        "eval_prompts=4",
        "eval_rollouts=2",
        "warm_start.max_steps=5",
        "warm_start.probe_prompts=8",
        "warm_start.batch_size=4",
    ] {
        let s = CString::new(set).unwrap();
        assert_eq!(
            unsafe { srpo_config_set(cfg, s.as_ptr()) },
            SrpoStatus::Ok,
            "{set}: {}",
            last_error()
        );
    }
    cfg
}

#[test]
fn pure_functions_match_reference_values() {
    let rewards = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut adv = [0.0; 8];
    assert_eq!(
        unsafe { srpo_group_advantages(rewards.as_ptr(), 8, 0.0, adv.as_mut_ptr()) },
        SrpoStatus::Ok
    );
    assert!((adv[0] - 0.75 / 0.1875f64.sqrt()).abs() < 1e-12);
    assert!((adv.iter().sum::<f64>()).abs() < 1e-12);

    assert!((srpo_grpo_token_loss(1.5f64.ln(), 0.0, 1.0, 0.2, 0.28) + 1.28).abs() < 1e-12);
    assert_eq!(srpo_is_weight(4f64.ln(), 0.0, 2.0), 2.0);
    assert_eq!(srpo_route_rollout(false, true), SRPO_BRANCH_SDPO);
    assert_eq!(srpo_route_rollout(false, false), SRPO_BRANCH_GRPO);
    assert_eq!(srpo_route_rollout(true, true), SRPO_BRANCH_GRPO);
    assert_eq!(srpo_route_rollout(true, false), SRPO_BRANCH_GRPO);
    assert_eq!(srpo_lr_schedule(2.0, 1, 0), 2.0);

    let u = [0.25; 4];
    assert!((unsafe { srpo_teacher_entropy(u.as_ptr(), 4) } - 4f64.ln()).abs() < 1e-12);
    assert!(unsafe { srpo_teacher_entropy(ptr::null(), 3) }.is_nan());

    let h = [0.0, std::f64::consts::LN_2];
    let mut w = [0.0; 2];
    assert_eq!(
        unsafe { srpo_dynamic_weights(h.as_ptr(), 2, 1.0, w.as_mut_ptr()) },
        SrpoStatus::Ok
    );
    assert!((w[0] - 4.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(
        unsafe { srpo_dynamic_weights(h.as_ptr(), 0, 1.0, w.as_mut_ptr()) },
        SrpoStatus::InvalidInput
    );

    let (p, q) = ([1.0, 0.0], [0.5, 0.5]);
    let mut d = 0.0;
    assert_eq!(
        unsafe { srpo_divergence(SRPO_DIVERGENCE_FKL, p.as_ptr(), q.as_ptr(), 2, &mut d) },
        SrpoStatus::Ok
    );
    assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(
        unsafe { srpo_divergence(7, p.as_ptr(), q.as_ptr(), 2, &mut d) },
        SrpoStatus::InvalidInput
    );
}

#[test]
fn errors_carry_codes_and_messages() {
    let rewards = [1.0];
    let mut adv = [0.0];
    assert_eq!(
        unsafe { srpo_group_advantages(rewards.as_ptr(), 1, 0.0, adv.as_mut_ptr()) },
        SrpoStatus::InvalidInput
    );
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { srpo_group_advantages(ptr::null(), 2, 0.0, adv.as_mut_ptr()) },
        SrpoStatus::NullPointer
    );
    assert!(last_error().contains("rewards"));

    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { srpo_config_desk(99, &mut cfg) }, SrpoStatus::InvalidInput);
    assert!(cfg.is_null());
    let bad = CString::new("{\"algorithm\": \"SRPO\"}").unwrap();
    assert_eq!(
        unsafe { srpo_config_from_json(bad.as_ptr(), &mut cfg) },
        SrpoStatus::Json
    );

    assert_eq!(
        unsafe { srpo_config_desk(SRPO_ALGORITHM_GRPO, &mut cfg) },
        SrpoStatus::Ok
    );
    assert_eq!(last_error(), "");
    let set = CString::new("mix_lambda=2").unwrap();
    assert_eq!(unsafe { srpo_config_set(cfg, set.as_ptr()) }, SrpoStatus::Config);
    assert!(last_error().contains("mix_lambda"));
    unsafe { srpo_config_free(cfg) };
    unsafe { srpo_config_free(ptr::null_mut()) };
    unsafe { srpo_trainer_free(ptr::null_mut()) };
    assert_eq!(unsafe { srpo_trainer_step_count(ptr::null()) }, 0);
}

#[test]
fn config_json_round_trips() {
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { srpo_config_paper(SRPO_ALGORITHM_GRPO, &mut cfg) },
        SrpoStatus::Ok
    );
    let mut needed = 0usize;
    assert_eq!(
        unsafe { srpo_config_to_json(cfg, ptr::null_mut(), 0, &mut needed) },
        SrpoStatus::BufferTooSmall
    );
    let mut buf = vec![0 as std::ffi::c_char; needed];
    assert_eq!(
        unsafe { srpo_config_to_json(cfg, buf.as_mut_ptr(), needed, &mut needed) },
        SrpoStatus::Ok
    );
    let mut copy = ptr::null_mut();
    assert_eq!(
        unsafe { srpo_config_from_json(buf.as_ptr(), &mut copy) },
        SrpoStatus::Ok
    );
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert!(text.contains("\"learning_rate\": 1e-6"));
    unsafe {
        srpo_config_free(cfg);
        srpo_config_free(copy);
    }
}

#[test]
fn trainer_handle_steps_saves_and_reloads() {
    let cfg = tiny_config();
    let mut t = ptr::null_mut();
    assert_eq!(
        unsafe { srpo_trainer_new(cfg, &mut t) },
        SrpoStatus::Ok,
        "{}",
        last_error()
    );
    assert!(unsafe { srpo_trainer_num_params(t) } > 0);
    let mut m = SrpoStepMetrics::default();
    assert_eq!(
        unsafe { srpo_trainer_step(t, &mut m) },
        SrpoStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(m.step, 0);
    assert!(m.eval_avg_at_k.is_finite());
    assert!((m.grpo_frac + m.sdpo_frac - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { srpo_trainer_step(t, &mut m) }, SrpoStatus::Ok);
    assert_eq!(m.step, 1);
    assert!(m.eval_avg_at_k.is_finite());
    assert_eq!(unsafe { srpo_trainer_step_count(t) }, 2);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { srpo_trainer_save(t, path.as_ptr()) }, SrpoStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { srpo_trainer_load(path.as_ptr(), &mut back) },
        SrpoStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(unsafe { srpo_trainer_step_count(back) }, 2);

    // The reloaded trainer continues exactly as the original would.
    let (mut a, mut b) = (SrpoStepMetrics::default(), SrpoStepMetrics::default());
    assert_eq!(unsafe { srpo_trainer_step(t, &mut a) }, SrpoStatus::Ok);
    assert_eq!(unsafe { srpo_trainer_step(back, &mut b) }, SrpoStatus::Ok);
    assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
    assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());

    let mut avg = -1.0;
    assert_eq!(unsafe { srpo_trainer_evaluate(back, &mut avg) }, SrpoStatus::Ok);
    assert!((0.0..=1.0).contains(&avg));

    let missing = CString::new(dir.path().join("nothing").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(
        unsafe { srpo_trainer_load(missing.as_ptr(), &mut none) },
        SrpoStatus::Io
    );
    unsafe {
        srpo_trainer_free(t);
        srpo_trainer_free(back);
        srpo_config_free(cfg);
    }
}

#[test]
fn run_training_writes_a_run_directory() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { srpo_run_training(cfg, out.as_ptr(), false) },
        SrpoStatus::Ok,
        "{}",
        last_error()
    );
    assert!(dir.path().join("run").join("metrics.csv").exists());
    unsafe { srpo_config_free(cfg) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/srpo.h")).unwrap();
    for name in [
        "typedef struct SrpoConfig SrpoConfig;",
        "typedef struct SrpoTrainer SrpoTrainer;",
        "SRPO_STATUS_OK = 0",
        "srpo_last_error_message",
        "srpo_trainer_step",
        "srpo_run_training",
        "srpo_dynamic_weights",
        "#define SRPO_ALGORITHM_ADV_MIX 4",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Builds the static library, then compiles and runs tests/smoke.c against
/// it. Skipped only when no C compiler is installed.
#[test]
fn c_program_links_against_static_library() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C link check: no cc");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // `cargo test` builds only the rlib, and the outer cargo holds the lock on
    // the main target directory, so the archive is built in a separate one.
    let target = manifest.join("../../target/ffi-smoke");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "--release", "--lib", "--manifest-path"])
        .arg(manifest.join("Cargo.toml"))
        .env("CARGO_TARGET_DIR", &target)
        .status()
        .unwrap();
    assert!(status.success(), "building the static library failed");
    let lib = target.join("release/libsrpo_ffi.a");

    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
