use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scoreflow::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use scoreflow::config::RunConfig;
use scoreflow::env::{scripted_demos, ACTION_DIM, OBS_DIM};
use scoreflow::error::{Error, Result};
use scoreflow::finetune::{eval_mean_return, finetune};
use scoreflow::flow::{pretrain, DemoDataset, VelocityFieldParams};
use scoreflow::io::{
    load_demo_csv, write_alpha_sweep_csv, write_check_csv, write_demo_csv, write_metrics_csv,
    write_pretrain_csv,
};
use scoreflow::ppo::CriticParams;
use scoreflow::rng::{derive_seed, stream_rng, STREAM_DEMO, STREAM_NET_INIT};
use scoreflow::sampler::FlowPolicy;
use scoreflow::score::{ControlHeads, ScoreSchedulerParams, VariancePredictorParams};
use scoreflow::stats::welch_t_test;
use scoreflow::verify::run_battery;

#[derive(Parser)]
#[command(name = "scoreflow", version, about = "Flow-matching policies with score-modulated SDE fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the identity and invariant battery; write a CSV report.
    Verify {
        /// Report destination.
        #[arg(long, default_value = "verify_report.csv")]
        out: PathBuf,
        /// Trim sample counts for a quicker pass.
        #[arg(long)]
        fast: bool,
    },
    /// Behavior-clone a velocity field on demonstrations.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// PPO fine-tuning starting from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from (output of pretrain).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate checkpoints on fresh episodes; Welch test between runs.
    Eval {
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// Number of evaluation seeds per run.
        #[arg(long)]
        seeds: usize,
        /// Optional config for environment/episode settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export the score schedule α(t) of a checkpoint over a time grid.
    SweepAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "alpha_sweep.csv")]
        out: PathBuf,
    },
}

fn load_config_with_env(path: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    apply_seed_override(&mut config)?;
    Ok(config)
}

fn apply_seed_override(config: &mut RunConfig) -> Result<()> {
    if let Ok(raw) = std::env::var("SCOREFLOW_SEED") {
        config.seed = raw
            .parse::<u64>()
            .map_err(|_| Error::Usage(format!("SCOREFLOW_SEED must be an integer, got '{raw}'")))?;
    }
    Ok(())
}

fn demo_dataset(config: &RunConfig) -> Result<DemoDataset> {
    let (observations, actions) = match &config.demos.path {
        Some(path) => load_demo_csv(path)?,
        None => {
            let mut rng = stream_rng(config.seed, &[STREAM_DEMO]);
            scripted_demos(config.env, config.demos.episodes, &mut rng)?
        }
    };
    DemoDataset::from_pairs_unit(observations, actions)
}

fn build_policy(config: &RunConfig, velocity: VelocityFieldParams) -> Result<FlowPolicy> {
    let heads = ControlHeads {
        alpha: ScoreSchedulerParams::init(
            config.score.alpha_hidden_dim,
            derive_seed(config.seed, &[STREAM_NET_INIT, 1]),
        )?,
        sigma: VariancePredictorParams::init(
            ACTION_DIM,
            OBS_DIM,
            config.score.sigma_hidden_dim,
            config.score.sigma_hidden_layers,
            config.score.sigma_min,
            config.score.sigma_max,
            derive_seed(config.seed, &[STREAM_NET_INIT, 2]),
        )?,
    };
    let mut policy = FlowPolicy::new(
        velocity,
        heads,
        config.sampler.variant,
        config.clip_policy()?,
        config.sampler.steps,
    )?;
    policy.lambda_max = config.sampler.lambda_max;
    Ok(policy)
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("out_dir '{}': {e}", config.out_dir.display()),
        ))
    })
}

fn cmd_verify(out: &Path, fast: bool) -> Result<bool> {
    let results = run_battery(fast)?;
    write_check_csv(out, &results)?;
    let mut all_pass = true;
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{status}  {:<34} {:>14.6e}  (threshold {:.1e})", r.name, r.value, r.threshold);
        all_pass &= r.pass;
    }
    println!("report written to {}", out.display());
    Ok(all_pass)
}

fn cmd_pretrain(config_path: &Path) -> Result<bool> {
    let config = load_config_with_env(config_path)?;
    ensure_out_dir(&config)?;
    let demos = demo_dataset(&config)?;
    let result = pretrain(&demos, &config.pretrain_config())?;
    let policy = build_policy(&config, result.params)?;
    let critic = CriticParams::init(
        OBS_DIM,
        config.finetune.critic_hidden_dim,
        config.finetune.critic_hidden_layers,
        derive_seed(config.seed, &[STREAM_NET_INIT, 3]),
    )?;
    let schedule = config.finetune_config().schedule;
    let checkpoint = Checkpoint::fresh(
        policy,
        critic,
        schedule,
        demos.action_center.clone(),
        demos.action_scale.clone(),
        config.to_text(),
    );
    let ckpt_path = config.out_dir.join("pretrained.ckpt");
    save_checkpoint(&checkpoint, &ckpt_path)?;
    write_pretrain_csv(&config.out_dir.join("pretrain_loss.csv"), &result.loss_history)?;
    write_demo_csv(&config.out_dir.join("demos.csv"), &demos.observations, &demos.actions)?;
    println!(
        "pretrain: {} pairs, fm loss {:.6} -> {:.6}",
        demos.len(),
        result.initial_loss,
        result.final_loss
    );
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(true)
}

fn cmd_finetune(config_path: &Path, checkpoint_path: &Path) -> Result<bool> {
    let config = load_config_with_env(config_path)?;
    ensure_out_dir(&config)?;
    let start = load_checkpoint(checkpoint_path)?;
    let demos = demo_dataset(&config)?;
    let result = finetune(start.policy, start.critic, &demos, &config.finetune_config(), config.seed)?;
    let metrics_path = config.out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &result.metrics)?;
    let mut checkpoint = Checkpoint::fresh(
        result.policy,
        result.critic,
        config.finetune_config().schedule,
        start.action_center,
        start.action_scale,
        config.to_text(),
    );
    checkpoint.actor_opt = result.actor_opt;
    checkpoint.critic_opt = result.critic_opt;
    checkpoint.reward_stat = result.reward_stat;
    checkpoint.iter = config.finetune.n_iters as u64;
    let ckpt_path = config.out_dir.join("finetuned.ckpt");
    save_checkpoint(&checkpoint, &ckpt_path)?;
    if let (Some(first), Some(last)) = (result.metrics.first(), result.metrics.last()) {
        println!(
            "finetune: {} iters, return {:.4} -> {:.4}",
            result.metrics.len(),
            first.return_mean,
            last.return_mean
        );
    }
    println!("metrics written to {}", metrics_path.display());
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(true)
}

fn cmd_eval(runs: &[PathBuf], seeds: usize, config_path: Option<&Path>) -> Result<bool> {
    if runs.is_empty() {
        return Err(Error::Usage("eval needs at least one --runs entry".into()));
    }
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let mut config = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_seed_override(&mut config)?;
    let mut samples: Vec<(String, Vec<f64>)> = Vec::with_capacity(runs.len());
    for path in runs {
        let ckpt = load_checkpoint(path)?;
        let mut returns = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let (mean, _) = eval_mean_return(
                &ckpt.policy,
                config.env,
                config.eval.episodes,
                config.seed.wrapping_add(s as u64),
            )?;
            returns.push(mean);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        println!("{}: return {mean:.4} ± {std:.4} over {seeds} seeds", path.display());
        samples.push((path.display().to_string(), returns));
    }
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let test = welch_t_test(&samples[i].1, &samples[j].1)?;
            println!(
                "welch {} vs {}: t = {:.4}, p = {:.4}, df = {:.2}",
                samples[i].0, samples[j].0, test.t, test.p, test.degrees_of_freedom
            );
        }
    }
    Ok(true)
}

fn cmd_sweep_alpha(checkpoint_path: &Path, out: &Path) -> Result<bool> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let alpha = &ckpt.policy.heads.alpha;
    let mut rows = Vec::with_capacity(101);
    for k in 0..=100u32 {
        let t = f64::from(k) / 100.0;
        rows.push((ckpt.iter, t, alpha.alpha_scaled(t)?));
    }
    write_alpha_sweep_csv(out, &rows)?;
    println!("alpha sweep ({} rows) written to {}", rows.len(), out.display());
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Verify { out, fast } => cmd_verify(out, *fast),
        Command::Pretrain { config } => cmd_pretrain(config),
        Command::Finetune { config, checkpoint } => cmd_finetune(config, checkpoint),
        Command::Eval { runs, seeds, config } => cmd_eval(runs, *seeds, config.as_deref()),
        Command::SweepAlpha { checkpoint, out } => cmd_sweep_alpha(checkpoint, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_)
                | Error::Usage(_)
                | Error::Io(_)
                | Error::BadMagic
                | Error::Truncated
                | Error::VersionMismatch { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
