//! Online fine-tuning of a pretrained flow policy on the point-mass task.
//!
//! Each iteration collects parallel rollouts with per-stream PRNGs, runs
//! GAE with the current critic, applies one PPO update, tightens the noise
//! bound per the schedule and appends one metrics row.

use crate::env::{PointMassConfig, PointMassEnv};
use crate::error::{Error, Result};
use crate::flow::DemoDataset;
use crate::nn::{cosine_warm_restart_lr, OptimizerState};
use crate::ppo::{
    gae, normalize_advantages, ppo_update, ActorOptimizers, CriticParams, PPOConfig, RolloutBatch,
    RunningStd,
};
use crate::rng::{
    derive_seed, stream_rng, STREAM_ENV_RESET, STREAM_EVAL, STREAM_PPO_SHUFFLE, STREAM_ROLLOUT,
};
use crate::sampler::{sample_action, sample_action_with_noise, FlowPolicy};
use crate::score::NoiseBoundSchedule;

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub n_iters: usize,
    pub n_envs: usize,
    pub env: PointMassConfig,
    pub ppo: PPOConfig,
    pub schedule: NoiseBoundSchedule,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub lr_min: f64,
    pub lr_warmup: usize,
    /// Iterations of critic-only updates before the actor starts moving.
    pub critic_warmup_iters: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            n_iters: 100,
            n_envs: 8,
            env: PointMassConfig::default(),
            ppo: PPOConfig::default(),
            schedule: NoiseBoundSchedule { hold_ratio: 0.35, decay_target_mix: 0.3, total_iters: 100 },
            actor_lr: 3e-4,
            critic_lr: 4e-3,
            lr_min: 1e-4,
            lr_warmup: 0,
            critic_warmup_iters: 10,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if self.n_envs == 0 {
            return Err(Error::Config("need at least one rollout environment".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.lr_min > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub sigma_mean: f64,
    pub alpha_mean_at_t0: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub policy: FlowPolicy,
    pub critic: CriticParams,
    pub metrics: Vec<MetricsRow>,
    pub actor_opt: ActorOptimizers,
    pub critic_opt: OptimizerState,
    pub reward_stat: RunningStd,
}

/// Collects `n_envs` full episodes under the current policy. Returns the
/// PPO batch (rewards possibly normalized, advantages normalized) and the
/// raw per-episode returns for logging.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &FlowPolicy,
    critic: &CriticParams,
    env_config: PointMassConfig,
    n_envs: usize,
    gamma: f64,
    gae_lambda: f64,
    reward_stat: Option<&mut RunningStd>,
    iter: usize,
    seed: u64,
) -> Result<(RolloutBatch, Vec<f64>)> {
    let horizon = env_config.horizon;
    let mut observations = Vec::with_capacity(n_envs * horizon);
    let mut trajectories = Vec::with_capacity(n_envs * horizon);
    let mut env_actions = Vec::with_capacity(n_envs * horizon);
    let mut raw_rewards = Vec::with_capacity(n_envs * horizon);
    let mut dones = Vec::with_capacity(n_envs * horizon);
    let mut values = Vec::with_capacity(n_envs * horizon);
    let mut old_log_probs = Vec::with_capacity(n_envs * horizon);
    let mut bootstraps = Vec::with_capacity(n_envs);
    let mut episode_returns = Vec::with_capacity(n_envs);

    for env_idx in 0..n_envs {
        let mut reset_rng = stream_rng(seed, &[STREAM_ENV_RESET, iter as u64, env_idx as u64]);
        let mut env = PointMassEnv::reset(env_config, &mut reset_rng);
        let mut obs = env.observation();
        let mut episode_return = 0.0;
        for h in 0..horizon {
            let traj_seed = derive_seed(
                seed,
                &[STREAM_ROLLOUT, iter as u64, env_idx as u64, h as u64],
            );
            let traj = sample_action(policy, &obs, traj_seed)?;
            let action = traj.final_action();
            let value = critic.value(&obs)?;
            let (next_obs, reward, done) = env.step(&action)?;
            episode_return += reward;
            observations.push(obs);
            old_log_probs.push(traj.log_prob);
            trajectories.push(traj);
            env_actions.push(action);
            raw_rewards.push(reward);
            dones.push(done);
            values.push(value);
            obs = next_obs;
        }
        bootstraps.push(critic.value(&obs)?);
        episode_returns.push(episode_return);
    }

    let mut rewards = raw_rewards.clone();
    if let Some(stat) = reward_stat {
        for &r in &raw_rewards {
            stat.update(r);
        }
        let divisor = stat.divisor();
        for r in rewards.iter_mut() {
            *r /= divisor;
        }
    }

    let mut advantages = Vec::with_capacity(n_envs * horizon);
    let mut returns = Vec::with_capacity(n_envs * horizon);
    // Episodes end by time limit, not by reaching an absorbing state, so
    // the value bootstrap flows through the cut; `dones` stays in the batch
    // for bookkeeping but must not zero the final-step target.
    let truncation = vec![false; horizon];
    for env_idx in 0..n_envs {
        let lo = env_idx * horizon;
        let hi = lo + horizon;
        let mut env_values = values[lo..hi].to_vec();
        env_values.push(bootstraps[env_idx]);
        let (adv, ret) =
            gae(&rewards[lo..hi], &env_values, &truncation, gamma, gae_lambda)?;
        advantages.extend(adv);
        returns.extend(ret);
    }
    normalize_advantages(&mut advantages);

    let batch = RolloutBatch {
        observations,
        trajectories,
        env_actions,
        rewards,
        dones,
        values,
        old_log_probs,
        advantages,
        returns,
        n_envs,
        n_steps: horizon,
    };
    batch.validate()?;
    Ok((batch, episode_returns))
}

/// Mean and std of episode returns under the deterministic mean chain
/// (a⁰ = 0, ε ≡ 0), over `episodes` fresh environments.
pub fn eval_mean_return(
    policy: &FlowPolicy,
    env_config: PointMassConfig,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Domain("evaluation needs at least one episode".into()));
    }
    let d = policy.action_dim();
    let zero_noise = vec![vec![0.0; d]; policy.steps];
    let mut totals = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = stream_rng(seed, &[STREAM_EVAL, e as u64]);
        let mut env = PointMassEnv::reset(env_config, &mut rng);
        let mut obs = env.observation();
        let mut total = 0.0;
        while !env.is_done() {
            let traj = sample_action_with_noise(policy, &obs, vec![0.0; d], &zero_noise)?;
            let (next_obs, reward, _) = env.step(&traj.final_action())?;
            total += reward;
            obs = next_obs;
        }
        totals.push(total);
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let std = (totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok((mean, std))
}

/// Fine-tunes `policy` (and trains `critic`) for `config.n_iters`
/// iterations. Deterministic given `seed`; every PRNG consumer hangs off a
/// labeled stream of it.
pub fn finetune(
    mut policy: FlowPolicy,
    mut critic: CriticParams,
    demo: &DemoDataset,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    config.validate()?;
    let mut actor_opt = ActorOptimizers::new(&policy);
    let mut critic_opt = OptimizerState::new(&critic.net);
    let mut reward_stat = RunningStd::default();
    let mut metrics = Vec::with_capacity(config.n_iters);
    let sigma_min = policy.heads.sigma.sigma_min;
    let sigma_max = policy.heads.sigma.sigma_max;
    for iter in 0..config.n_iters {
        policy.sigma_bound = config.schedule.effective_sigma_max(iter, sigma_min, sigma_max);
        let stat = if config.ppo.reward_norm { Some(&mut reward_stat) } else { None };
        let (batch, episode_returns) = collect_rollouts(
            &policy,
            &critic,
            config.env,
            config.n_envs,
            config.ppo.gamma,
            config.ppo.gae_lambda,
            stat,
            iter,
            seed,
        )?;
        let actor_lr = cosine_warm_restart_lr(
            config.actor_lr,
            config.lr_min,
            config.n_iters as u64,
            config.lr_warmup as u64,
            iter as u64,
        )?;
        let critic_lr = cosine_warm_restart_lr(
            config.critic_lr,
            config.lr_min,
            config.n_iters as u64,
            config.lr_warmup as u64,
            iter as u64,
        )?;
        let mut bc_rng = stream_rng(seed, &[STREAM_PPO_SHUFFLE, iter as u64]);
        let diag = ppo_update(
            &mut policy,
            &mut critic,
            &mut actor_opt,
            &mut critic_opt,
            &batch,
            demo,
            &config.ppo,
            actor_lr,
            critic_lr,
            iter >= config.critic_warmup_iters,
            &mut bc_rng,
        )?;
        let n = episode_returns.len() as f64;
        let return_mean = episode_returns.iter().sum::<f64>() / n;
        let return_std = (episode_returns.iter().map(|r| (r - return_mean) * (r - return_mean)).sum::<f64>()
            / n)
            .sqrt();
        let sigma_mean = {
            let stds: Vec<f64> =
                batch.trajectories.iter().flat_map(|tr| tr.stds.iter().copied()).collect();
            stds.iter().sum::<f64>() / stds.len() as f64
        };
        metrics.push(MetricsRow {
            iter,
            return_mean,
            return_std,
            approx_kl: diag.approx_kl,
            clip_frac: diag.clip_frac,
            entropy: diag.entropy,
            sigma_mean,
            alpha_mean_at_t0: policy.heads.alpha.alpha_scaled(0.0)?,
            actor_lr,
            critic_lr,
        });
    }
    Ok(FinetuneResult { policy, critic, metrics, actor_opt, critic_opt, reward_stat })
}
