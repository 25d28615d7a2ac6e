//! PPO machinery over the flow policy's exact trajectory likelihood.
//!
//! The policy gradient differentiates the recomputed chain log-density, so
//! the velocity field, the drift schedule and the noise head all receive
//! updates through one clipped surrogate. A retained demonstration buffer
//! regularizes the velocity field toward the cloned behavior.

use crate::error::{Error, Result};
use crate::flow::{fm_loss_with_draws, sample_fm_draws, DemoDataset};
use crate::nn::{
    adam_step, clip_global_norm, mlp_init, Activation, Gradient, MlpSpec, OptimizerState,
    ParamBundle,
};
use crate::rng::StreamRng;
use crate::sampler::{
    trajectory_backward, trajectory_entropy, trajectory_log_prob, FlowPolicy, FlowTrajectory,
    PolicyGrads,
};
use rand::seq::SliceRandom;

const LN_2PI: f64 = 1.8378770664093453;

/// Value network V(s).
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub net: ParamBundle,
}

impl CriticParams {
    pub fn init(obs_dim: usize, hidden_dim: usize, hidden_layers: usize, seed: u64) -> Result<Self> {
        let mut layers: Vec<(usize, Activation)> =
            vec![(hidden_dim, Activation::Tanh); hidden_layers];
        layers.push((1, Activation::Identity));
        let net = mlp_init(&MlpSpec::new(obs_dim, &layers), seed)?;
        Ok(CriticParams { net })
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        Ok(self.net.forward(s)?[0])
    }
}

/// Mean squared value error over the batch plus its parameter gradient.
pub fn critic_loss_and_grad(
    critic: &CriticParams,
    observations: &[Vec<f64>],
    returns: &[f64],
) -> Result<(f64, Gradient)> {
    if observations.len() != returns.len() || observations.is_empty() {
        return Err(Error::Shape("critic batch lengths differ or are empty".into()));
    }
    let inv_b = 1.0 / observations.len() as f64;
    let mut grad = Gradient::zeros_like(&critic.net);
    let mut loss = 0.0;
    for (s, &ret) in observations.iter().zip(returns) {
        let trace = critic.net.forward_trace(s)?;
        let r = trace.output()[0] - ret;
        loss += r * r * inv_b;
        critic.net.backward(&trace, &[2.0 * r * inv_b], &mut grad);
    }
    Ok((loss, grad))
}

/// Generalized advantage estimation. `values` carries one bootstrap entry
/// beyond the rewards; a set done flag cuts both bootstrap and propagation.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 || dones.len() != t_len {
        return Err(Error::Shape(format!(
            "gae expects |values| = |rewards|+1 and |dones| = |rewards|, got {}, {}, {}",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Clipped PPO surrogate min(r·A, clip(r, 1−ε, 1+ε)·A) with r = exp(new − old).
pub fn ppo_surrogate(new_logp: f64, old_logp: f64, advantage: f64, clip_eps: f64) -> f64 {
    let ratio = (new_logp - old_logp).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// d(surrogate)/d(new_logp): the unclipped branch contributes r·A while it
/// is the active minimum; the clipped branch is flat in the ratio.
fn surrogate_logp_grad(new_logp: f64, old_logp: f64, advantage: f64, clip_eps: f64) -> f64 {
    let ratio = (new_logp - old_logp).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        unclipped
    } else {
        0.0
    }
}

/// Exact differential entropy of a recorded Gaussian chain,
/// Σ_k ½·d·ln(2πe·(σ^k)²·Δt).
pub fn chain_entropy(stds: &[f64], action_dim: usize, dt: f64) -> f64 {
    debug_assert!(stds.iter().all(|&s| s > 0.0), "chain entropy needs positive stds");
    let d = action_dim as f64;
    stds.iter().map(|&s| 0.5 * d * (LN_2PI + 1.0 + (s * s * dt).ln())).sum()
}

/// In-place mean-zero/unit-std normalization; inputs with spread below the
/// 1e-8 guard are only centered.
pub fn normalize_advantages(advantages: &mut [f64]) {
    if advantages.is_empty() {
        return;
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-8 {
        for a in advantages.iter_mut() {
            *a = (*a - mean) / std;
        }
    } else {
        for a in advantages.iter_mut() {
            *a -= mean;
        }
    }
}

/// Welford-style running scale for reward normalization. The divisor is a
/// positive rescaling, so reward comparisons keep their order.
#[derive(Debug, Clone, Default)]
pub struct RunningStd {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStd {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64).sqrt()
    }

    /// Positive divisor: the running std once it is meaningful, else 1.
    pub fn divisor(&self) -> f64 {
        let s = self.std();
        if s > 1e-8 {
            s
        } else {
            1.0
        }
    }

    /// Raw Welford accumulators, for persistence.
    pub fn state(&self) -> (u64, f64, f64) {
        (self.count, self.mean, self.m2)
    }

    pub fn from_state(count: u64, mean: f64, m2: f64) -> Self {
        RunningStd { count, mean, m2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PPOConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub bc_coef: f64,
    pub critic_coef: f64,
    pub target_kl: f64,
    pub max_grad_norm: f64,
    pub reward_norm: bool,
    pub bc_batch_size: usize,
    pub minibatch_size: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            clip_eps: 0.01,
            gamma: 0.95,
            gae_lambda: 0.95,
            epochs: 10,
            entropy_coef: 0.03,
            bc_coef: 0.01,
            critic_coef: 0.5,
            target_kl: 0.1,
            max_grad_norm: 25.0,
            reward_norm: true,
            bc_batch_size: 64,
            minibatch_size: 64,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config(format!("clip_eps must be positive, got {}", self.clip_eps)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config(format!(
                "gae_lambda must lie in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("ppo needs at least one epoch".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be positive".into()));
        }
        if self.entropy_coef < 0.0 || self.bc_coef < 0.0 || self.critic_coef < 0.0 {
            return Err(Error::Config("loss coefficients must be nonnegative".into()));
        }
        if !(self.target_kl > 0.0) {
            return Err(Error::Config(format!("target_kl must be positive, got {}", self.target_kl)));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// One iteration's worth of experience, flattened over envs × steps.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub observations: Vec<Vec<f64>>,
    pub trajectories: Vec<FlowTrajectory>,
    pub env_actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub n_envs: usize,
    pub n_steps: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || n != self.n_envs * self.n_steps {
            return Err(Error::Shape(format!(
                "batch holds {n} transitions, expected n_envs·n_steps = {}",
                self.n_envs * self.n_steps
            )));
        }
        let consistent = self.trajectories.len() == n
            && self.env_actions.len() == n
            && self.rewards.len() == n
            && self.dones.len() == n
            && self.values.len() == n
            && self.old_log_probs.len() == n
            && self.advantages.len() == n
            && self.returns.len() == n;
        if !consistent {
            return Err(Error::Shape("batch field lengths disagree".into()));
        }
        for (traj, &lp) in self.trajectories.iter().zip(&self.old_log_probs) {
            if traj.log_prob != lp {
                return Err(Error::Domain(
                    "stored old log-prob differs from its trajectory's accumulated value".into(),
                ));
            }
        }
        if self.advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("batch advantages".into()));
        }
        Ok(())
    }
}

/// Adam state for the three actor networks.
#[derive(Debug, Clone)]
pub struct ActorOptimizers {
    pub velocity: OptimizerState,
    pub alpha: OptimizerState,
    pub sigma: OptimizerState,
}

impl ActorOptimizers {
    pub fn new(policy: &FlowPolicy) -> Self {
        ActorOptimizers {
            velocity: OptimizerState::new(&policy.velocity.net),
            alpha: OptimizerState::new(&policy.heads.alpha.net),
            sigma: OptimizerState::new(&policy.heads.sigma.net),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateDiagnostics {
    /// mean(old_logp − new_logp) from the last epoch that evaluated it.
    pub approx_kl: f64,
    /// Fraction of ratios pushed outside [1−ε, 1+ε].
    pub clip_frac: f64,
    /// Mean chain entropy over the batch.
    pub entropy: f64,
    pub surrogate_loss: f64,
    pub critic_loss: f64,
    pub bc_loss: f64,
    /// Epochs that applied an update (the KL stop can cut the loop short).
    pub epochs_run: usize,
    /// Mean probability ratio over the first epoch; 1 up to rounding.
    pub first_ratio_mean: f64,
}

/// One PPO update over the batch: `epochs` passes of shuffled minibatch
/// steps with the KL early stop checked on the full batch at the top of
/// each epoch, joint grad clipping over the actor networks, critic
/// regression, entropy bonus and the β-weighted behavior-cloning term. On a
/// non-finite loss or gradient, both networks are restored to their
/// pre-update state and the update reports the failure.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut FlowPolicy,
    critic: &mut CriticParams,
    actor_opt: &mut ActorOptimizers,
    critic_opt: &mut OptimizerState,
    batch: &RolloutBatch,
    demo: &DemoDataset,
    config: &PPOConfig,
    actor_lr: f64,
    critic_lr: f64,
    update_actor: bool,
    bc_rng: &mut StreamRng,
) -> Result<UpdateDiagnostics> {
    config.validate()?;
    batch.validate()?;
    let policy_snapshot = policy.clone();
    let critic_snapshot = critic.clone();
    match ppo_update_inner(
        policy, critic, actor_opt, critic_opt, batch, demo, config, actor_lr, critic_lr,
        update_actor, bc_rng,
    ) {
        Ok(diag) => Ok(diag),
        Err(e) => {
            *policy = policy_snapshot;
            *critic = critic_snapshot;
            Err(e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn ppo_update_inner(
    policy: &mut FlowPolicy,
    critic: &mut CriticParams,
    actor_opt: &mut ActorOptimizers,
    critic_opt: &mut OptimizerState,
    batch: &RolloutBatch,
    demo: &DemoDataset,
    config: &PPOConfig,
    actor_lr: f64,
    critic_lr: f64,
    update_actor: bool,
    bc_rng: &mut StreamRng,
) -> Result<UpdateDiagnostics> {
    let n = batch.len() as f64;
    let mut diag = UpdateDiagnostics::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..config.epochs {
        // The KL gate and the reported diagnostics are full-batch quantities
        // under the parameters as they stand at the top of the epoch.
        let mut new_logps = Vec::with_capacity(batch.len());
        let mut entropies = Vec::with_capacity(batch.len());
        for (s, traj) in batch.observations.iter().zip(&batch.trajectories) {
            new_logps.push(trajectory_log_prob(policy, s, traj)?);
            entropies.push(trajectory_entropy(policy, s, traj)?);
        }
        if new_logps.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("policy log-prob in epoch {epoch}")));
        }
        let approx_kl = batch
            .old_log_probs
            .iter()
            .zip(&new_logps)
            .map(|(o, n)| o - n)
            .sum::<f64>()
            / n;
        diag.approx_kl = approx_kl;
        if epoch == 0 {
            diag.first_ratio_mean = batch
                .old_log_probs
                .iter()
                .zip(&new_logps)
                .map(|(o, nl)| (nl - o).exp())
                .sum::<f64>()
                / n;
        }
        if approx_kl > config.target_kl {
            break;
        }
        let mut clip_hits = 0usize;
        let mut surrogate_sum = 0.0;
        for ((&nl, &ol), &adv) in new_logps.iter().zip(&batch.old_log_probs).zip(&batch.advantages)
        {
            let ratio = (nl - ol).exp();
            if (ratio - 1.0).abs() > config.clip_eps {
                clip_hits += 1;
            }
            surrogate_sum += ppo_surrogate(nl, ol, adv, config.clip_eps);
        }
        diag.clip_frac = clip_hits as f64 / n;
        diag.surrogate_loss = -surrogate_sum / n;
        diag.entropy = entropies.iter().sum::<f64>() / n;
        let mut closs = 0.0;
        for (s, &r) in batch.observations.iter().zip(&batch.returns) {
            closs += (critic.value(s)? - r).powi(2);
        }
        diag.critic_loss = closs / n;
        if !diag.critic_loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss in epoch {epoch}")));
        }

        order.shuffle(bc_rng);
        for chunk in order.chunks(config.minibatch_size) {
            let m = chunk.len() as f64;
            if update_actor {
                let mut grads = PolicyGrads::zeros_like(policy);
                for &i in chunk {
                    let s = &batch.observations[i];
                    let traj = &batch.trajectories[i];
                    // Recomputed against the current parameters: earlier
                    // minibatches in this epoch have already moved them.
                    let nl = trajectory_log_prob(policy, s, traj)?;
                    if !nl.is_finite() {
                        return Err(Error::NonFinite(format!("policy log-prob in epoch {epoch}")));
                    }
                    let g = surrogate_logp_grad(
                        nl,
                        batch.old_log_probs[i],
                        batch.advantages[i],
                        config.clip_eps,
                    );
                    let w_logp = -g / m;
                    let w_entropy = -config.entropy_coef / m;
                    trajectory_backward(policy, s, traj, w_logp, w_entropy, &mut grads)?;
                }
                if config.bc_coef > 0.0 && !demo.is_empty() {
                    let take = config.bc_batch_size.min(demo.len());
                    let mut idx: Vec<usize> = (0..demo.len()).collect();
                    idx.shuffle(bc_rng);
                    idx.truncate(take);
                    let pairs: Vec<(&[f64], &[f64])> = idx
                        .iter()
                        .map(|&i| (demo.observations[i].as_slice(), demo.actions[i].as_slice()))
                        .collect();
                    let draws = sample_fm_draws(policy.action_dim(), take, bc_rng);
                    let (bc_loss, bc_grad) = fm_loss_with_draws(&policy.velocity, &pairs, &draws)?;
                    diag.bc_loss = bc_loss;
                    grads.velocity.add_scaled(&bc_grad, config.bc_coef);
                }
                clip_global_norm(
                    &mut [&mut grads.velocity, &mut grads.alpha, &mut grads.sigma],
                    config.max_grad_norm,
                );
                if !grads.is_finite() {
                    return Err(Error::NonFinite(format!("actor gradient in epoch {epoch}")));
                }
                adam_step(&mut policy.velocity.net, &grads.velocity, &mut actor_opt.velocity, actor_lr)?;
                adam_step(&mut policy.heads.alpha.net, &grads.alpha, &mut actor_opt.alpha, actor_lr)?;
                adam_step(&mut policy.heads.sigma.net, &grads.sigma, &mut actor_opt.sigma, actor_lr)?;
            }

            let mb_obs: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.observations[i].clone()).collect();
            let mb_ret: Vec<f64> = chunk.iter().map(|&i| batch.returns[i]).collect();
            let (mb_loss, mut cgrad) = critic_loss_and_grad(critic, &mb_obs, &mb_ret)?;
            if !mb_loss.is_finite() {
                return Err(Error::NonFinite(format!("critic loss in epoch {epoch}")));
            }
            cgrad.scale(config.critic_coef);
            clip_global_norm(&mut [&mut cgrad], config.max_grad_norm);
            if !cgrad.is_finite() {
                return Err(Error::NonFinite(format!("critic gradient in epoch {epoch}")));
            }
            adam_step(&mut critic.net, &cgrad, critic_opt, critic_lr)?;
        }
        diag.epochs_run = epoch + 1;
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocityFieldParams;
    use crate::nn::{finite_diff_check, Layer};
    use crate::rng::stream_rng;
    use crate::sampler::{sample_action, ClipPolicy, SamplerVariant};
    use crate::score::{ControlHeads, ScoreSchedulerParams, VariancePredictorParams};

    #[test]
    fn gae_with_zero_lambda_is_the_td_error() {
        let rewards = [1.0, -0.5, 0.25];
        let values = [0.3, 0.1, -0.2, 0.4];
        let dones = [false, false, false];
        let (adv, _) = gae(&rewards, &values, &dones, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let delta = rewards[t] + 0.9 * values[t + 1] - values[t];
            assert!((adv[t] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_matches_backward_recursion_oracle() {
        let (adv, ret) =
            gae(&[1.0, 0.0], &[0.5, 0.5, 0.0], &[false, false], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![0.5, -0.5]);
        assert_eq!(ret, vec![1.0, 0.0]);
    }

    #[test]
    fn gae_zero_rewards_zero_values_gives_zero_advantages() {
        let (adv, ret) = gae(&[0.0; 5], &[0.0; 6], &[false; 5], 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        assert!(ret.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn gae_respects_episode_boundaries() {
        // a done flag at t cuts the bootstrap and the accumulation
        let (adv, _) =
            gae(&[1.0, 1.0], &[0.0, 5.0, 5.0], &[true, false], 0.99, 0.95).unwrap();
        assert!((adv[0] - 1.0).abs() < 1e-15, "terminal step must not bootstrap, got {}", adv[0]);
    }

    #[test]
    fn gae_rejects_mismatched_lengths() {
        assert!(gae(&[1.0], &[0.0, 0.0, 0.0], &[false], 0.9, 0.9).is_err());
        assert!(gae(&[1.0], &[0.0, 0.0], &[false, true], 0.9, 0.9).is_err());
    }

    #[test]
    fn surrogate_matches_tabulated_cases() {
        assert_eq!(ppo_surrogate(0.7, 0.7, 2.5, 0.01), 2.5);
        let lr = 1.5f64.ln();
        assert!((ppo_surrogate(lr, 0.0, 1.0, 0.01) - 1.01).abs() < 1e-12);
        let lr = 0.5f64.ln();
        assert!((ppo_surrogate(lr, 0.0, -1.0, 0.01) - -0.99).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_numeric_slope() {
        for (nl, adv) in [(0.004, 1.3), (-0.02, -0.7), (0.3, 0.9), (-0.3, -1.1)] {
            let g = surrogate_logp_grad(nl, 0.0, adv, 0.01);
            let h = 1e-7;
            let num = (ppo_surrogate(nl + h, 0.0, adv, 0.01)
                - ppo_surrogate(nl - h, 0.0, adv, 0.01))
                / (2.0 * h);
            assert!((g - num).abs() < 1e-5, "at nl={nl}, adv={adv}: {g} vs {num}");
        }
    }

    #[test]
    fn chain_entropy_matches_closed_form() {
        let h = chain_entropy(&[0.1; 4], 1, 0.25);
        assert!((h - -6.307174961397273).abs() < 1e-12);
        // the spec'd doubling law: doubling every σ adds K·d·ln 2
        let doubled = chain_entropy(&[0.2; 4], 1, 0.25);
        assert!((doubled - h - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(chain_entropy(&[], 3, 0.25), 0.0);
    }

    #[test]
    fn advantage_normalization_hits_unit_moments() {
        let mut a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-10);

        let mut flat = vec![5.0; 8];
        normalize_advantages(&mut flat);
        assert!(flat.iter().all(|&x| x == 0.0), "degenerate spread is centered, not scaled");
    }

    #[test]
    fn running_std_matches_direct_computation_and_guards() {
        let xs = [2.0, -1.0, 0.5, 3.0, -2.5];
        let mut rs = RunningStd::default();
        assert_eq!(rs.divisor(), 1.0);
        for &x in &xs {
            rs.update(x);
        }
        let mean = xs.iter().sum::<f64>() / 5.0;
        let direct = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
        assert!((rs.std() - direct).abs() < 1e-12);
        assert!(rs.divisor() > 0.0);
        // positive rescaling preserves reward comparisons
        let (r1, r2) = (-1.3, -0.4);
        assert!(r1 / rs.divisor() < r2 / rs.divisor());
    }

    #[test]
    fn ppo_config_validation() {
        assert!(PPOConfig::default().validate().is_ok());
        assert!(PPOConfig { clip_eps: 0.0, ..PPOConfig::default() }.validate().is_err());
        assert!(PPOConfig { gamma: 1.0, ..PPOConfig::default() }.validate().is_err());
        assert!(PPOConfig { gae_lambda: 1.5, ..PPOConfig::default() }.validate().is_err());
        assert!(PPOConfig { epochs: 0, ..PPOConfig::default() }.validate().is_err());
        assert!(PPOConfig { target_kl: 0.0, ..PPOConfig::default() }.validate().is_err());
    }

    #[test]
    fn critic_loss_gradient_passes_finite_difference_check() {
        let critic = CriticParams::init(3, 8, 2, 21).unwrap();
        let obs: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![0.3 * i as f64, -0.2 * i as f64, 0.05 * i as f64])
            .collect();
        let returns: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).cos()).collect();
        let (_, grad) = critic_loss_and_grad(&critic, &obs, &returns).unwrap();
        let err = finite_diff_check(
            |net| {
                let c = CriticParams { net: net.clone() };
                Ok(critic_loss_and_grad(&c, &obs, &returns)?.0)
            },
            &critic.net,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "critic gradient mismatch {err}");
    }

    // --- ppo_update scaffolding -------------------------------------------

    fn tiny_policy(seed: u64) -> FlowPolicy {
        let velocity = VelocityFieldParams::init(1, 2, 6, 1, seed).unwrap();
        let heads = ControlHeads {
            alpha: ScoreSchedulerParams::init(6, seed + 1).unwrap(),
            sigma: VariancePredictorParams::init(1, 2, 6, 1, 0.1, 0.24, seed + 2).unwrap(),
        };
        FlowPolicy::new(velocity, heads, SamplerVariant::ScoreFlow, ClipPolicy::disabled(), 2)
            .unwrap()
    }

    fn synthetic_batch(policy: &FlowPolicy, advantages: Vec<f64>) -> RolloutBatch {
        let n = advantages.len();
        let mut observations = Vec::new();
        let mut trajectories = Vec::new();
        let mut old_log_probs = Vec::new();
        let mut env_actions = Vec::new();
        for i in 0..n {
            let s = vec![0.1 * i as f64, -0.05 * i as f64];
            let traj = sample_action(policy, &s, 1000 + i as u64).unwrap();
            old_log_probs.push(traj.log_prob);
            env_actions.push(traj.final_action());
            trajectories.push(traj);
            observations.push(s);
        }
        RolloutBatch {
            observations,
            trajectories,
            env_actions,
            rewards: vec![0.0; n],
            dones: vec![false; n],
            values: vec![0.0; n],
            old_log_probs,
            advantages,
            returns: vec![0.5; n],
            n_envs: 1,
            n_steps: n,
        }
    }

    fn tiny_demo() -> DemoDataset {
        let obs = vec![vec![0.0, 0.0], vec![0.2, -0.1], vec![-0.3, 0.4], vec![0.1, 0.1]];
        let act = vec![vec![0.5], vec![-0.5], vec![0.2], vec![-0.1]];
        DemoDataset::from_pairs_unit(obs, act).unwrap()
    }

    #[test]
    fn zero_advantages_leave_actor_untouched_but_critic_moves() {
        let mut policy = tiny_policy(40);
        let mut critic = CriticParams::init(2, 6, 1, 44).unwrap();
        let critic_before = critic.clone();
        let actor_before = policy.clone();
        let batch = synthetic_batch(&policy, vec![0.0; 6]);
        let mut aopt = ActorOptimizers::new(&policy);
        let mut copt = OptimizerState::new(&critic.net);
        let config = PPOConfig {
            entropy_coef: 0.0,
            bc_coef: 0.0,
            epochs: 2,
            target_kl: 10.0,
            ..PPOConfig::default()
        };
        let demo = tiny_demo();
        let diag = ppo_update(
            &mut policy, &mut critic, &mut aopt, &mut copt, &batch, &demo, &config, 1e-3, 1e-2,
            true, &mut stream_rng(0, &[1]),
        )
        .unwrap();
        assert_eq!(policy.velocity.net, actor_before.velocity.net);
        assert_eq!(policy.heads.alpha.net, actor_before.heads.alpha.net);
        assert_eq!(policy.heads.sigma.net, actor_before.heads.sigma.net);
        assert_ne!(critic.net, critic_before.net);
        assert_eq!(diag.epochs_run, 2);
    }

    #[test]
    fn first_epoch_ratio_mean_is_one() {
        let mut policy = tiny_policy(41);
        let mut critic = CriticParams::init(2, 6, 1, 45).unwrap();
        let batch = synthetic_batch(&policy, vec![0.5, -0.5, 1.0, -1.0]);
        let mut aopt = ActorOptimizers::new(&policy);
        let mut copt = OptimizerState::new(&critic.net);
        let config = PPOConfig::default();
        let demo = tiny_demo();
        let diag = ppo_update(
            &mut policy, &mut critic, &mut aopt, &mut copt, &batch, &demo, &config, 1e-3, 1e-2,
            true, &mut stream_rng(0, &[2]),
        )
        .unwrap();
        assert!((diag.first_ratio_mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn parameter_moves_along_the_analytic_gradient_sign() {
        // single-step, one-dimensional policy with a constant velocity net:
        // the only mean parameter is the output bias b, μ = a⁰ + b·Δt, and
        // d log π/db = z·Δt/var. With ratio 1 the surrogate gradient is
        // A·d log π/db, so sign(Δb) after one Adam step = sign(A·z).
        for (adv, flip) in [(2.0, 1.0), (-2.0, -1.0)] {
            let velocity = VelocityFieldParams {
                net: ParamBundle {
                    layers: vec![Layer {
                        in_dim: 3,
                        out_dim: 1,
                        weights: vec![0.0; 3],
                        bias: vec![0.2],
                        activation: Activation::Identity,
                    }],
                },
                action_dim: 1,
                obs_dim: 1,
            };
            let heads = ControlHeads {
                alpha: ScoreSchedulerParams::init(4, 7).unwrap(),
                sigma: VariancePredictorParams::init(1, 1, 4, 1, 0.1, 0.24, 8).unwrap(),
            };
            let mut policy = FlowPolicy::new(
                velocity,
                heads,
                SamplerVariant::NoiseOnly,
                ClipPolicy::disabled(),
                1,
            )
            .unwrap();
            let s = vec![0.3];
            // pick a trajectory whose noise moved the sample above the mean
            let traj = (0..100)
                .map(|seed| sample_action(&policy, &s, seed).unwrap())
                .find(|tr| flip * (tr.states[1][0] - tr.means[0][0]) > 0.0)
                .expect("some draw lands on the requested side");
            let bias_before = policy.velocity.net.layers[0].bias[0];
            let batch = RolloutBatch {
                observations: vec![s.clone()],
                env_actions: vec![traj.final_action()],
                old_log_probs: vec![traj.log_prob],
                trajectories: vec![traj],
                rewards: vec![0.0],
                dones: vec![false],
                values: vec![0.0],
                advantages: vec![adv],
                returns: vec![0.0],
                n_envs: 1,
                n_steps: 1,
            };
            let mut critic = CriticParams::init(1, 4, 1, 9).unwrap();
            let mut aopt = ActorOptimizers::new(&policy);
            let mut copt = OptimizerState::new(&critic.net);
            let config = PPOConfig {
                epochs: 1,
                entropy_coef: 0.0,
                bc_coef: 0.0,
                target_kl: 10.0,
                ..PPOConfig::default()
            };
            let demo = tiny_demo();
            ppo_update(
                &mut policy, &mut critic, &mut aopt, &mut copt, &batch, &demo, &config, 1e-3,
                1e-3, true, &mut stream_rng(0, &[3]),
            )
            .unwrap();
            let bias_after = policy.velocity.net.layers[0].bias[0];
            // A·z > 0 in both cases by construction, so b must increase the
            // likelihood of the sampled action: Δb has the sign of z·A
            assert!(
                (bias_after - bias_before) * flip * adv.signum() > 0.0,
                "adv {adv}: bias moved {bias_before} → {bias_after}"
            );
        }
    }

    #[test]
    fn kl_early_stop_halts_the_epoch_loop() {
        let mut policy = tiny_policy(42);
        let mut critic = CriticParams::init(2, 6, 1, 46).unwrap();
        let batch = synthetic_batch(&policy, vec![3.0, -2.0, 2.5, -3.0, 1.5, -1.0]);
        let mut aopt = ActorOptimizers::new(&policy);
        let mut copt = OptimizerState::new(&critic.net);
        let config = PPOConfig {
            epochs: 8,
            target_kl: 1e-12,
            entropy_coef: 0.0,
            bc_coef: 0.0,
            ..PPOConfig::default()
        };
        let demo = tiny_demo();
        let diag = ppo_update(
            &mut policy, &mut critic, &mut aopt, &mut copt, &batch, &demo, &config, 5e-3, 1e-2,
            true, &mut stream_rng(0, &[4]),
        )
        .unwrap();
        // epoch 0 sees KL = 0 and updates; epoch 1 measures KL > target and
        // stops before updating
        assert_eq!(diag.epochs_run, 1);
        assert!(diag.approx_kl.abs() > 1e-12);
    }

    #[test]
    fn nonfinite_update_restores_parameters() {
        let mut policy = tiny_policy(43);
        let mut critic = CriticParams::init(2, 6, 1, 47).unwrap();
        let policy_before = policy.clone();
        let critic_before = critic.clone();
        let mut batch = synthetic_batch(&policy, vec![1.0, -1.0, 0.5, -0.5]);
        // poison the critic targets so its loss overflows after the actor
        // has already stepped
        batch.returns = vec![1e200; 4];
        let mut aopt = ActorOptimizers::new(&policy);
        let mut copt = OptimizerState::new(&critic.net);
        let config =
            PPOConfig { epochs: 2, bc_coef: 0.0, target_kl: 10.0, ..PPOConfig::default() };
        let demo = tiny_demo();
        let err = ppo_update(
            &mut policy, &mut critic, &mut aopt, &mut copt, &batch, &demo, &config, 1e-3, 1e-2,
            true, &mut stream_rng(0, &[5]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(policy.velocity.net, policy_before.velocity.net);
        assert_eq!(policy.heads.sigma.net, policy_before.heads.sigma.net);
        assert_eq!(critic.net, critic_before.net);
    }

    #[test]
    fn bc_term_pulls_the_velocity_field() {
        let mut policy = tiny_policy(48);
        let mut critic = CriticParams::init(2, 6, 1, 49).unwrap();
        let batch = synthetic_batch(&policy, vec![0.0; 4]);
        let mut aopt = ActorOptimizers::new(&policy);
        let mut copt = OptimizerState::new(&critic.net);
        let before = policy.velocity.net.clone();
        let config = PPOConfig {
            epochs: 1,
            entropy_coef: 0.0,
            bc_coef: 0.5,
            target_kl: 10.0,
            ..PPOConfig::default()
        };
        let demo = tiny_demo();
        ppo_update(
            &mut policy, &mut critic, &mut aopt, &mut copt, &batch, &demo, &config, 1e-3, 1e-2,
            true, &mut stream_rng(0, &[6]),
        )
        .unwrap();
        assert_ne!(policy.velocity.net, before, "bc term must move the velocity field");
    }

    #[test]
    fn invalid_batch_is_rejected() {
        let policy = tiny_policy(50);
        let mut batch = synthetic_batch(&policy, vec![0.5, 0.5]);
        batch.old_log_probs[0] += 1e-3;
        assert!(batch.validate().is_err());
        let mut batch = synthetic_batch(&policy, vec![0.5, 0.5]);
        batch.advantages[1] = f64::NAN;
        assert!(batch.validate().is_err());
        let mut batch = synthetic_batch(&policy, vec![0.5, 0.5]);
        batch.n_envs = 3;
        assert!(batch.validate().is_err());
    }
}
