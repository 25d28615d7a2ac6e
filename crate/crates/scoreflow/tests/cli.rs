//! End-to-end runs of the `scoreflow` binary: the full
//! pretrain/finetune/eval/sweep pipeline, cross-process determinism of every
//! artifact, the seed override, and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scoreflow"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("failed to launch scoreflow");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn small_config(out_dir: &Path) -> String {
    format!(
        "seed = 11\n\
         out_dir = {}\n\
         demos.episodes = 2\n\
         flow.steps = 120\n\
         flow.batch_size = 32\n\
         flow.hidden_dim = 16\n\
         flow.hidden_layers = 1\n\
         score.sigma_hidden_dim = 8\n\
         score.sigma_hidden_layers = 1\n\
         finetune.n_iters = 2\n\
         finetune.n_envs = 2\n\
         finetune.critic_warmup_iters = 1\n\
         finetune.critic_hidden_dim = 16\n\
         finetune.critic_hidden_layers = 1\n\
         ppo.epochs = 2\n\
         ppo.minibatch_size = 32\n\
         eval.episodes = 2\n",
        out_dir.display()
    )
}

#[test]
fn pipeline_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("small.cfg");
    std::fs::write(&config_path, small_config(&out_dir)).unwrap();

    run_ok(bin().arg("pretrain").arg("--config").arg(&config_path));
    let pretrained = out_dir.join("pretrained.ckpt");
    let first_ckpt = read(&pretrained);
    let first_loss = read(&out_dir.join("pretrain_loss.csv"));

    run_ok(bin().arg("pretrain").arg("--config").arg(&config_path));
    assert_eq!(first_ckpt, read(&pretrained), "pretrain checkpoint changed between runs");
    assert_eq!(
        first_loss,
        read(&out_dir.join("pretrain_loss.csv")),
        "pretrain loss history changed between runs"
    );

    run_ok(bin()
        .arg("finetune")
        .arg("--config")
        .arg(&config_path)
        .arg("--checkpoint")
        .arg(&pretrained));
    let finetuned = out_dir.join("finetuned.ckpt");
    let first_finetuned = read(&finetuned);
    let first_metrics = read(&out_dir.join("metrics.csv"));

    run_ok(bin()
        .arg("finetune")
        .arg("--config")
        .arg(&config_path)
        .arg("--checkpoint")
        .arg(&pretrained));
    assert_eq!(first_finetuned, read(&finetuned), "finetune checkpoint changed between runs");
    assert_eq!(
        first_metrics,
        read(&out_dir.join("metrics.csv")),
        "finetune metrics changed between runs"
    );

    let eval_out = run_ok(bin()
        .arg("eval")
        .arg("--runs")
        .arg(format!("{},{}", pretrained.display(), finetuned.display()))
        .arg("--seeds")
        .arg("3")
        .arg("--config")
        .arg(&config_path));
    let text = String::from_utf8_lossy(&eval_out.stdout).to_string();
    assert!(text.contains("return"), "eval output missing returns: {text}");
    assert!(text.contains("welch"), "eval output missing the pairwise test: {text}");

    let sweep_path = out_dir.join("alpha.csv");
    run_ok(bin()
        .arg("sweep-alpha")
        .arg("--checkpoint")
        .arg(&finetuned)
        .arg("--out")
        .arg(&sweep_path));
    let sweep = String::from_utf8_lossy(&read(&sweep_path)).to_string();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("training_stage,t,alpha_scaled"));
    assert_eq!(lines.count(), 101, "expected one row per grid point");
    let last = sweep.lines().last().unwrap();
    let alpha_at_one: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(alpha_at_one, 0.0, "exported schedule must vanish at t = 1");
}

#[test]
fn seed_env_var_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("small.cfg");
    std::fs::write(&config_path, small_config(&out_dir)).unwrap();

    run_ok(bin().arg("pretrain").arg("--config").arg(&config_path));
    let baseline = read(&out_dir.join("pretrain_loss.csv"));

    run_ok(bin()
        .arg("pretrain")
        .arg("--config")
        .arg(&config_path)
        .env("SCOREFLOW_SEED", "987"));
    let overridden = read(&out_dir.join("pretrain_loss.csv"));
    assert_ne!(baseline, overridden, "a different seed must change the training trace");

    // Overriding with the value already in the file is a no-op.
    run_ok(bin()
        .arg("pretrain")
        .arg("--config")
        .arg(&config_path)
        .env("SCOREFLOW_SEED", "11"));
    assert_eq!(baseline, read(&out_dir.join("pretrain_loss.csv")));
}

#[test]
fn demo_csv_roundtrip_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("small.cfg");
    std::fs::write(&config_path, small_config(&out_dir)).unwrap();

    run_ok(bin().arg("pretrain").arg("--config").arg(&config_path));
    let metrics_from_scripted = {
        run_ok(bin()
            .arg("finetune")
            .arg("--config")
            .arg(&config_path)
            .arg("--checkpoint")
            .arg(out_dir.join("pretrained.ckpt")));
        read(&out_dir.join("metrics.csv"))
    };

    // Feed the exported demos back in through the CSV path; float
    // serialization is shortest-roundtrip, so the run must not change.
    let csv_config_path = dir.path().join("csv.cfg");
    std::fs::write(
        &csv_config_path,
        format!(
            "{}demos.path = {}\n",
            small_config(&out_dir),
            out_dir.join("demos.csv").display()
        ),
    )
    .unwrap();
    run_ok(bin()
        .arg("finetune")
        .arg("--config")
        .arg(&csv_config_path)
        .arg("--checkpoint")
        .arg(out_dir.join("pretrained.ckpt")));
    assert_eq!(metrics_from_scripted, read(&out_dir.join("metrics.csv")));
}

#[test]
fn verify_fast_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv");
    let out = run_ok(bin().arg("verify").arg("--fast").arg("--out").arg(&report));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.lines().any(|l| l.starts_with("PASS")), "no PASS lines in: {text}");
    assert!(!text.contains("FAIL"), "battery reported failures: {text}");
    let csv = String::from_utf8_lossy(&read(&report)).to_string();
    assert_eq!(csv.lines().next(), Some("check,value,threshold,pass"));
    assert!(csv.lines().count() > 10, "report looks truncated: {csv}");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let missing = bin()
        .arg("pretrain")
        .arg("--config")
        .arg("/nonexistent/nowhere.cfg")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    let dir = tempfile::tempdir().unwrap();
    let not_a_ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&not_a_ckpt, b"definitely not a checkpoint").unwrap();
    let bad_magic = bin()
        .arg("sweep-alpha")
        .arg("--checkpoint")
        .arg(&not_a_ckpt)
        .output()
        .unwrap();
    assert_eq!(bad_magic.status.code(), Some(2));

    let bad_config = dir.path().join("bad.cfg");
    std::fs::write(&bad_config, "ppo.gamma = maybe\n").unwrap();
    let unparsable = bin()
        .arg("pretrain")
        .arg("--config")
        .arg(&bad_config)
        .output()
        .unwrap();
    assert_eq!(unparsable.status.code(), Some(2));
}
