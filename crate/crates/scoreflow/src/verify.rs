//! The self-check battery behind `scoreflow verify`: fast versions of the
//! identities the method rests on, each reduced to one named scalar
//! compared against a threshold.

use rand::Rng;

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::Result;
use crate::flow::{fm_loss_with_draws, sample_fm_draws, VelocityFieldParams, T_MAX};
use crate::io::CheckResult;
use crate::nn::finite_diff_check;
use crate::oracle::{
    duality_check, gaussian_optimal_velocity, mc_posterior_score, mixture_score, GaussianData,
    MixtureData,
};
use crate::ppo::{chain_entropy, critic_loss_and_grad, gae, ppo_surrogate, CriticParams};
use crate::rng::{standard_normal_vec, stream_rng};
use crate::sampler::{
    sample_action, sample_action_with_noise, trajectory_backward, trajectory_entropy,
    trajectory_log_prob, ClipPolicy, FlowPolicy, PolicyGrads, SamplerVariant,
};
use crate::score::{closed_form_score, ControlHeads, ScoreSchedulerParams, VariancePredictorParams};

const VERIFY_SEED: u64 = 0xC0FFEE;

fn check(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        threshold,
        pass: value.is_finite() && value <= threshold,
    }
}

fn duality_sweep(n: usize) -> Result<CheckResult> {
    let mut rng = stream_rng(VERIFY_SEED, &[1]);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let dim = rng.gen_range(1..=4);
        let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let var = rng.gen_range(0.05..4.0);
        let data = GaussianData::new(mean, var)?;
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t = rng.gen_range(0.0..=T_MAX);
        worst = worst.max(duality_check(&data, &a, t)?);
    }
    Ok(check("duality_sweep_max_residual", worst, 1e-10))
}

fn mc_posterior(n_samples: usize) -> Result<CheckResult> {
    let mut rng = stream_rng(VERIFY_SEED, &[2]);
    let mut worst: f64 = 0.0;
    for case in 0..6 {
        let data = MixtureData::new(vec![
            (0.5, GaussianData::new(vec![rng.gen_range(-2.0..0.0)], rng.gen_range(0.2..1.0))?),
            (0.5, GaussianData::new(vec![rng.gen_range(0.0..2.0)], rng.gen_range(0.2..1.0))?),
        ])?;
        let a = vec![rng.gen_range(-2.0..2.0)];
        let t = if case == 0 { 0.0 } else { rng.gen_range(0.0..0.9) };
        let exact = mixture_score(&data, &a, t)?;
        let mc = mc_posterior_score(&data, &a, t, n_samples, &mut rng)?;
        let gap = (mc.estimate[0] - exact[0]).abs();
        let allowed = 3.0 * mc.std_error[0] + 1e-12;
        worst = worst.max(gap / allowed);
    }
    Ok(check("mc_posterior_max_se_ratio", worst, 1.0))
}

fn alpha_checks() -> Result<Vec<CheckResult>> {
    let fresh = ScoreSchedulerParams::init(16, 0)?;
    let softplus_neg2 = (1.0f64 + (-2.0f64).exp()).ln();
    let mut init_dev: f64 = 0.0;
    for k in 0..=1000 {
        let t = k as f64 / 1000.0;
        let expected = (1.0 - t) * softplus_neg2;
        init_dev = init_dev.max((fresh.alpha_scaled(t)? - expected).abs());
    }
    let terminal = fresh.alpha_scaled(1.0)?.abs();

    // bounded modulated drift: ‖α·score‖ ≤ sup α_raw · (V + A)
    let mut trained = ScoreSchedulerParams::init(16, 3)?;
    let width = trained.net.layers.len();
    trained.net.layers[width - 1].bias[0] = 0.7;
    for (i, w) in trained.net.layers[width - 1].weights.iter_mut().enumerate() {
        *w = 0.05 * (i as f64 + 1.0);
    }
    let mut rng = stream_rng(VERIFY_SEED, &[3]);
    let mut sup_raw: f64 = 0.0;
    for k in 0..=1000 {
        sup_raw = sup_raw.max(trained.alpha_raw(k as f64 / 1000.0)?);
    }
    let (v_bound, a_bound) = (3.0, 4.0);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..10_000 {
        let t = rng.gen_range(0.0..=T_MAX);
        let v = rng.gen_range(-v_bound..v_bound);
        let a = rng.gen_range(-a_bound..a_bound);
        let drift = trained.alpha_scaled(t)? * closed_form_score(&[v], &[a], t)?[0];
        worst_ratio = worst_ratio.max(drift.abs() / (sup_raw * (v_bound + a_bound)));
    }
    Ok(vec![
        check("alpha_fresh_init_max_dev", init_dev, 1e-6),
        check("alpha_terminal_value", terminal, 0.0),
        check("alpha_drift_bound_ratio", worst_ratio, 1.0 + 1e-9),
    ])
}

fn test_policy(variant: SamplerVariant, seed: u64) -> Result<FlowPolicy> {
    let velocity = VelocityFieldParams::init(ACTION_DIM, OBS_DIM, 12, 1, seed)?;
    let mut alpha = ScoreSchedulerParams::init(8, seed + 1)?;
    let width = alpha.net.layers.len();
    alpha.net.layers[width - 1].bias[0] = -0.4; // break the zero init so α varies
    for (i, w) in alpha.net.layers[width - 1].weights.iter_mut().enumerate() {
        *w = 0.03 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let heads = ControlHeads {
        alpha,
        sigma: VariancePredictorParams::init(ACTION_DIM, OBS_DIM, 12, 1, 0.1, 0.24, seed + 2)?,
    };
    FlowPolicy::new(velocity, heads, variant, ClipPolicy::default(), 4)
}

fn replay_and_reduction() -> Result<Vec<CheckResult>> {
    let mut rng = stream_rng(VERIFY_SEED, &[4]);
    let mut replay_worst: f64 = 0.0;
    for variant in SamplerVariant::ALL {
        let policy = test_policy(variant, 40)?;
        for k in 0..4u64 {
            let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let traj = sample_action(&policy, &obs, 900 + k)?;
            let replayed = trajectory_log_prob(&policy, &obs, &traj)?;
            replay_worst = replay_worst.max((traj.log_prob - replayed).abs());
        }
    }

    // ε ≡ 0 under noise_only must reproduce the Euler ODE path bit for bit
    let policy = test_policy(SamplerVariant::NoiseOnly, 41)?;
    let mut ode_worst: f64 = 0.0;
    for k in 0..8u64 {
        let mut rng = stream_rng(VERIFY_SEED, &[5, k]);
        let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a0 = standard_normal_vec(&mut rng, ACTION_DIM);
        let zeros = vec![vec![0.0; ACTION_DIM]; policy.steps];
        let traj = sample_action_with_noise(&policy, &obs, a0.clone(), &zeros)?;
        let ode = crate::flow::ode_sample_from(&policy.velocity, &obs, policy.steps, a0)?;
        for (x, y) in traj.states.last().unwrap().iter().zip(&ode) {
            ode_worst = ode_worst.max((x - y).abs());
        }
    }

    // coupled variants: σ_k must equal √(2λ(t_k)) bit for bit
    let mut coupled_mismatches = 0.0;
    for (vi, variant) in [SamplerVariant::ScoreSdeCoupled, SamplerVariant::CoupledLearned]
        .into_iter()
        .enumerate()
    {
        let policy = test_policy(variant, 42)?;
        for k in 0..8u64 {
            let mut rng = stream_rng(VERIFY_SEED, &[6, vi as u64, k]);
            let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let traj = sample_action(&policy, &obs, 4000 + k)?;
            for (step, sigma) in traj.stds.iter().enumerate() {
                let t = step as f64 / policy.steps as f64;
                let lambda = match variant {
                    SamplerVariant::ScoreSdeCoupled => policy.lambda_max * (1.0 - t),
                    _ => policy.heads.alpha.alpha_scaled(t)?,
                };
                if sigma.to_bits() != (2.0 * lambda).sqrt().to_bits() {
                    coupled_mismatches += 1.0;
                }
            }
        }
    }
    Ok(vec![
        check("replay_max_logprob_error", replay_worst, 1e-9),
        check("ode_reduction_max_diff", ode_worst, 0.0),
        check("coupled_sigma_bit_mismatches", coupled_mismatches, 0.0),
    ])
}

fn gradient_checks() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut rng = stream_rng(VERIFY_SEED, &[7]);

    let velocity = VelocityFieldParams::init(1, 2, 6, 1, 50)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..6)
        .map(|_| {
            (
                vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                vec![rng.gen_range(-0.8..0.8)],
            )
        })
        .collect();
    let batch: Vec<(&[f64], &[f64])> =
        pairs.iter().map(|(o, a)| (o.as_slice(), a.as_slice())).collect();
    let draws = sample_fm_draws(1, batch.len(), &mut rng);
    let (_, analytic) = fm_loss_with_draws(&velocity, &batch, &draws)?;
    let fm_err = finite_diff_check(
        |net| {
            let candidate = VelocityFieldParams { net: net.clone(), action_dim: 1, obs_dim: 2 };
            fm_loss_with_draws(&candidate, &batch, &draws).map(|(l, _)| l)
        },
        &velocity.net,
        &analytic,
        1e-5,
    )?;
    results.push(check("fd_fm_loss", fm_err, 1e-4));

    let policy = test_policy(SamplerVariant::ScoreFlow, 51)?;
    let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let traj = sample_action(&policy, &obs, 777)?;
    let mut grads = PolicyGrads::zeros_like(&policy);
    trajectory_backward(&policy, &obs, &traj, 1.0, 0.0, &mut grads)?;
    let logp_err = finite_diff_check(
        |net| {
            let mut p = policy.clone();
            p.velocity.net = net.clone();
            trajectory_log_prob(&p, &obs, &traj)
        },
        &policy.velocity.net,
        &grads.velocity,
        1e-6,
    )?;
    results.push(check("fd_trajectory_logprob_velocity", logp_err, 1e-4));
    let alpha_err = finite_diff_check(
        |net| {
            let mut p = policy.clone();
            p.heads.alpha.net = net.clone();
            trajectory_log_prob(&p, &obs, &traj)
        },
        &policy.heads.alpha.net,
        &grads.alpha,
        1e-6,
    )?;
    results.push(check("fd_trajectory_logprob_alpha", alpha_err, 1e-4));
    let sigma_err = finite_diff_check(
        |net| {
            let mut p = policy.clone();
            p.heads.sigma.net = net.clone();
            trajectory_log_prob(&p, &obs, &traj)
        },
        &policy.heads.sigma.net,
        &grads.sigma,
        1e-6,
    )?;
    results.push(check("fd_trajectory_logprob_sigma", sigma_err, 1e-4));

    let mut entropy_grads = PolicyGrads::zeros_like(&policy);
    trajectory_backward(&policy, &obs, &traj, 0.0, 1.0, &mut entropy_grads)?;
    let entropy_err = finite_diff_check(
        |net| {
            let mut p = policy.clone();
            p.heads.sigma.net = net.clone();
            trajectory_entropy(&p, &obs, &traj)
        },
        &policy.heads.sigma.net,
        &entropy_grads.sigma,
        1e-6,
    )?;
    results.push(check("fd_chain_entropy_sigma", entropy_err, 1e-4));

    let critic = CriticParams::init(OBS_DIM, 8, 2, 52)?;
    let observations: Vec<Vec<f64>> =
        (0..5).map(|_| (0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let returns: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (_, critic_grad) = critic_loss_and_grad(&critic, &observations, &returns)?;
    let critic_err = finite_diff_check(
        |net| {
            let candidate = CriticParams { net: net.clone() };
            critic_loss_and_grad(&candidate, &observations, &returns).map(|(l, _)| l)
        },
        &critic.net,
        &critic_grad,
        1e-5,
    )?;
    results.push(check("fd_critic_loss", critic_err, 1e-4));
    Ok(results)
}

fn scalar_oracles() -> Result<Vec<CheckResult>> {
    // clipped surrogate, three regimes
    let cases = [
        ((0.05f64, 0.0f64, 2.0f64), (0.05f64).exp() * 2.0),
        ((0.5, 0.0, 2.0), 1.2 * 2.0),
        ((-0.5, 0.0, -2.0), 0.8 * -2.0),
    ];
    let mut surrogate_dev: f64 = 0.0;
    for ((new_lp, old_lp, adv), expected) in cases {
        surrogate_dev = surrogate_dev.max((ppo_surrogate(new_lp, old_lp, adv, 0.2) - expected).abs());
    }

    let (adv, _) = gae(&[1.0, 0.0], &[0.5, 0.5, 0.0], &[false, true], 1.0, 1.0)?;
    let gae_dev = (adv[0] - 0.5).abs().max((adv[1] + 0.5).abs());

    let entropy_dev =
        (chain_entropy(&[0.1; 4], 1, 0.25) - -6.307174961397273).abs();

    let duality_point = {
        let data = GaussianData::new(vec![0.0], 4.0)?;
        let v = gaussian_optimal_velocity(&data, &[1.0], 0.5)?;
        // worked example: posterior mean 1.6, v★ = 1.2
        (v[0] - 1.2).abs()
    };

    Ok(vec![
        check("surrogate_three_cases_dev", surrogate_dev, 1e-12),
        check("gae_oracle_dev", gae_dev, 1e-12),
        check("chain_entropy_constant_dev", entropy_dev, 1e-12),
        check("gaussian_velocity_example_dev", duality_point, 1e-12),
    ])
}

/// Runs the battery; `fast` trims sample counts for interactive use.
pub fn run_battery(fast: bool) -> Result<Vec<CheckResult>> {
    let (sweep_n, mc_n) = if fast { (2_000, 5_000) } else { (10_000, 20_000) };
    let mut results = Vec::new();
    results.push(duality_sweep(sweep_n)?);
    results.push(mc_posterior(mc_n)?);
    results.extend(alpha_checks()?);
    results.extend(replay_and_reduction()?);
    results.extend(gradient_checks()?);
    results.extend(scalar_oracles()?);
    Ok(results)
}
