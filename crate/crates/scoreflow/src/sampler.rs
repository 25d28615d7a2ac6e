//! Stochastic action generation and exact trajectory likelihoods.
//!
//! A policy rolls the flow forward on the uniform grid t_k = k/K with
//! Gaussian transition kernels. The mean is steered by the velocity field
//! plus a scheduled score drift; the standard deviation comes from an
//! independent head (or, for the coupled variants, from the drift schedule
//! itself). Noise draws are recorded so trajectories replay exactly.

use crate::error::{Error, Result};
use crate::flow::{concat_input, VelocityFieldParams};
use crate::nn::Gradient;
use crate::rng::{standard_normal, stream_rng};
use crate::score::{closed_form_score, ControlHeads};

const LN_2PI: f64 = 1.8378770664093453;

/// Which sampler the policy runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerVariant {
    /// Velocity plus learned scheduled score drift, independent learned noise.
    ScoreFlow,
    /// Drift is the raw velocity; only the noise head is learned.
    NoiseOnly,
    /// Score drift pinned at full strength, bypassing the (1−t) decay.
    AlphaOne,
    /// Score drift λ(t)·score with λ(t) = λ_max·(1−t) and std √(2λ(t)).
    ScoreSdeCoupled,
    /// Like ScoreSdeCoupled but λ(t) is predicted by a single net.
    CoupledLearned,
}

impl SamplerVariant {
    pub const ALL: [SamplerVariant; 5] = [
        SamplerVariant::ScoreFlow,
        SamplerVariant::NoiseOnly,
        SamplerVariant::AlphaOne,
        SamplerVariant::ScoreSdeCoupled,
        SamplerVariant::CoupledLearned,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            SamplerVariant::ScoreFlow => "scoreflow",
            SamplerVariant::NoiseOnly => "noise_only",
            SamplerVariant::AlphaOne => "alpha_one",
            SamplerVariant::ScoreSdeCoupled => "score_sde_coupled",
            SamplerVariant::CoupledLearned => "coupled_learned",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown sampler variant '{tag}'")))
    }
}

/// Componentwise action clamping. Intermediate states may roam wider than
/// the final action, which lands in the environment's box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipPolicy {
    pub intermediate_clip: f64,
    pub final_clip: f64,
    pub enabled: bool,
}

impl ClipPolicy {
    pub fn new(intermediate_clip: f64, final_clip: f64, enabled: bool) -> Result<Self> {
        if !(final_clip > 0.0 && intermediate_clip >= final_clip) {
            return Err(Error::Config(format!(
                "clip bounds need 0 < final_clip ≤ intermediate_clip, got {final_clip} and {intermediate_clip}"
            )));
        }
        Ok(ClipPolicy { intermediate_clip, final_clip, enabled })
    }

    pub fn disabled() -> Self {
        ClipPolicy { intermediate_clip: f64::INFINITY, final_clip: f64::INFINITY, enabled: false }
    }

    /// State as consumed by the networks at intermediate steps.
    fn clamp_intermediate(&self, a: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return a.to_vec();
        }
        a.iter().map(|&x| x.clamp(-self.intermediate_clip, self.intermediate_clip)).collect()
    }

    /// Action as handed to the environment.
    pub fn clamp_final(&self, a: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return a.to_vec();
        }
        a.iter().map(|&x| x.clamp(-self.final_clip, self.final_clip)).collect()
    }
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy { intermediate_clip: 3.0, final_clip: 1.0, enabled: true }
    }
}

/// Everything needed to sample actions and differentiate their likelihood.
#[derive(Debug, Clone)]
pub struct FlowPolicy {
    pub velocity: VelocityFieldParams,
    pub heads: ControlHeads,
    pub variant: SamplerVariant,
    pub clip: ClipPolicy,
    /// Integration steps K; the grid is t_k = k/K.
    pub steps: usize,
    /// Peak of the fixed λ(t) = λ_max·(1−t) schedule (coupled variant only).
    pub lambda_max: f64,
    /// Scheduled upper bound handed to the noise head; starts at σ_max.
    pub sigma_bound: f64,
}

impl FlowPolicy {
    pub fn new(
        velocity: VelocityFieldParams,
        heads: ControlHeads,
        variant: SamplerVariant,
        clip: ClipPolicy,
        steps: usize,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let sigma_bound = heads.sigma.sigma_max;
        Ok(FlowPolicy { velocity, heads, variant, clip, steps, lambda_max: 0.1, sigma_bound })
    }

    pub fn action_dim(&self) -> usize {
        self.velocity.action_dim
    }

    fn lambda_at(&self, t: f64) -> f64 {
        self.lambda_max * (1.0 - t)
    }
}

/// One recorded rollout of the sampler. States are stored before clipping so
/// the update identity a^{k+1} = μ^k + σ^k·√Δt·ε_k holds exactly; readers
/// re-apply the stored clip policy where the generation did.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    /// a^0..a^K, pre-clip.
    pub states: Vec<Vec<f64>>,
    /// μ^0..μ^{K−1}.
    pub means: Vec<Vec<f64>>,
    /// σ^0..σ^{K−1}.
    pub stds: Vec<f64>,
    /// ε_0..ε_{K−1}.
    pub noises: Vec<Vec<f64>>,
    /// Σ_k log N(a^{k+1}; μ^k, (σ^k)²·Δt·I), accumulated at generation time.
    pub log_prob: f64,
    pub variant: SamplerVariant,
    pub clip: ClipPolicy,
}

impl FlowTrajectory {
    pub fn steps(&self) -> usize {
        self.means.len()
    }

    pub fn action_dim(&self) -> usize {
        self.states[0].len()
    }

    /// Final action as handed to the environment.
    pub fn final_action(&self) -> Vec<f64> {
        self.clip.clamp_final(self.states.last().expect("nonempty chain"))
    }
}

/// Output of a single transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub log_prob: f64,
}

/// Mean/std of the transition kernel at a (clipped) state. Single source of
/// truth for every variant; sampling, likelihood and gradients all route
/// through here.
fn step_moments(
    policy: &FlowPolicy,
    a: &[f64],
    t: f64,
    s: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let v = policy.velocity.eval(a, t, s)?;
    let (alpha_scaled, sigma) = match policy.variant {
        SamplerVariant::ScoreFlow => (
            policy.heads.alpha.alpha_scaled(t)?,
            policy.heads.sigma.sigma_eval_bounded(a, t, s, policy.sigma_bound)?,
        ),
        SamplerVariant::NoiseOnly => {
            (0.0, policy.heads.sigma.sigma_eval_bounded(a, t, s, policy.sigma_bound)?)
        }
        SamplerVariant::AlphaOne => {
            (1.0, policy.heads.sigma.sigma_eval_bounded(a, t, s, policy.sigma_bound)?)
        }
        SamplerVariant::ScoreSdeCoupled => {
            let lambda = policy.lambda_at(t);
            (lambda, (2.0 * lambda).sqrt())
        }
        SamplerVariant::CoupledLearned => {
            let lambda = policy.heads.alpha.alpha_scaled(t)?;
            (lambda, (2.0 * lambda).sqrt())
        }
    };
    let dt = 1.0 / policy.steps as f64;
    let mean = transition_mean(&v, a, t, alpha_scaled, dt)?;
    Ok((mean, sigma))
}

/// μ = a + [v + α_scaled·score(v, a, t)]·Δt. With α_scaled = 0 the drift is
/// the bare velocity and the expression collapses to the Euler update.
fn transition_mean(v: &[f64], a: &[f64], t: f64, alpha_scaled: f64, dt: f64) -> Result<Vec<f64>> {
    if alpha_scaled == 0.0 {
        return Ok(a.iter().zip(v).map(|(&ai, &vi)| ai + vi * dt).collect());
    }
    let score = closed_form_score(v, a, t)?;
    Ok(a.iter()
        .zip(v)
        .zip(&score)
        .map(|((&ai, &vi), &si)| ai + (vi + alpha_scaled * si) * dt)
        .collect())
}

fn gaussian_step(a_clipped: &[f64], mean: Vec<f64>, sigma: f64, eps: &[f64], dt: f64) -> StepOutput {
    debug_assert_eq!(a_clipped.len(), eps.len());
    let sdt = sigma * dt.sqrt();
    let next: Vec<f64> = mean.iter().zip(eps).map(|(&m, &e)| m + sdt * e).collect();
    let log_prob = gaussian_log_density(&next, &mean, sigma, dt);
    StepOutput { next, mean, std: sigma, log_prob }
}

/// log N(x; μ, σ²·Δt·I). A degenerate σ = 0 transition is deterministic and
/// carries no density term.
fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64, dt: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let var = sigma * sigma * dt;
    let sq: f64 = x.iter().zip(mean).map(|(&xi, &mi)| (xi - mi) * (xi - mi)).sum();
    let d = x.len() as f64;
    -0.5 * d * (LN_2PI + var.ln()) - 0.5 * sq / var
}

/// One transition of the full sampler: scheduled score drift on the mean,
/// learned noise scale, log-density evaluated at the pre-clip sample.
pub fn scoreflow_step(
    velocity: &VelocityFieldParams,
    heads: &ControlHeads,
    sigma_bound: f64,
    a: &[f64],
    t: f64,
    s: &[f64],
    eps: &[f64],
    dt: f64,
) -> Result<StepOutput> {
    let v = velocity.eval(a, t, s)?;
    let alpha_scaled = heads.alpha.alpha_scaled(t)?;
    let sigma = heads.sigma.sigma_eval_bounded(a, t, s, sigma_bound)?;
    let mean = transition_mean(&v, a, t, alpha_scaled, dt)?;
    Ok(gaussian_step(a, mean, sigma, eps, dt))
}

/// One transition with drift v + λ·score and std √(2λ): the noise scale is
/// tied to the drift schedule instead of independently learned.
pub fn score_sde_step(
    velocity: &VelocityFieldParams,
    lambda: f64,
    a: &[f64],
    t: f64,
    s: &[f64],
    eps: &[f64],
    dt: f64,
) -> Result<StepOutput> {
    if lambda < 0.0 {
        return Err(Error::Domain(format!("score-SDE coefficient must be ≥ 0, got {lambda}")));
    }
    let v = velocity.eval(a, t, s)?;
    let mean = transition_mean(&v, a, t, lambda, dt)?;
    Ok(gaussian_step(a, mean, (2.0 * lambda).sqrt(), eps, dt))
}

/// Rolls the sampler from a₀ ~ N(0, I) with fresh noise; deterministic for
/// a given seed.
pub fn sample_action(policy: &FlowPolicy, s: &[f64], seed: u64) -> Result<FlowTrajectory> {
    let d = policy.action_dim();
    let mut rng = stream_rng(seed, &[]);
    let a0: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
    let noises: Vec<Vec<f64>> = (0..policy.steps)
        .map(|_| (0..d).map(|_| standard_normal(&mut rng)).collect())
        .collect();
    sample_action_with_noise(policy, s, a0, &noises)
}

/// Rolls the sampler from caller-supplied start point and noise draws. This
/// is the replay entry: feeding back a trajectory's stored a⁰ and ε's under
/// the generating parameters reproduces it bit for bit.
pub fn sample_action_with_noise(
    policy: &FlowPolicy,
    s: &[f64],
    a0: Vec<f64>,
    noises: &[Vec<f64>],
) -> Result<FlowTrajectory> {
    let k_steps = policy.steps;
    if noises.len() != k_steps {
        return Err(Error::Shape(format!(
            "expected {k_steps} noise draws, got {}",
            noises.len()
        )));
    }
    let d = policy.action_dim();
    if a0.len() != d || noises.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("noise dimension does not match action dimension".into()));
    }
    let dt = 1.0 / k_steps as f64;
    let mut states = Vec::with_capacity(k_steps + 1);
    let mut means = Vec::with_capacity(k_steps);
    let mut stds = Vec::with_capacity(k_steps);
    let mut log_prob = 0.0;
    states.push(a0);
    for (k, eps) in noises.iter().enumerate() {
        let t = k as f64 / k_steps as f64;
        let a = policy.clip.clamp_intermediate(states.last().expect("nonempty"));
        let (mean, sigma) = step_moments(policy, &a, t, s)?;
        let step = gaussian_step(&a, mean, sigma, eps, dt);
        if step.next.iter().any(|x| !x.is_finite()) || !step.log_prob.is_finite() {
            return Err(Error::NonFinite(format!(
                "sampler state at step {k} (variant {})",
                policy.variant.tag()
            )));
        }
        log_prob += step.log_prob;
        states.push(step.next);
        means.push(step.mean);
        stds.push(step.std);
    }
    Ok(FlowTrajectory {
        states,
        means,
        stds,
        noises: noises.to_vec(),
        log_prob,
        variant: policy.variant,
        clip: policy.clip,
    })
}

fn check_trajectory(policy: &FlowPolicy, s: &[f64], traj: &FlowTrajectory) -> Result<()> {
    let d = policy.action_dim();
    if traj.states.iter().any(|a| a.len() != d) {
        return Err(Error::Shape("stored chain dimension does not match policy".into()));
    }
    if s.len() != policy.velocity.obs_dim {
        return Err(Error::Shape(format!(
            "observation has dim {}, policy expects {}",
            s.len(),
            policy.velocity.obs_dim
        )));
    }
    if traj.states.len() != traj.steps() + 1 || traj.steps() != policy.steps {
        return Err(Error::Shape(format!(
            "stored chain has {} transitions, policy integrates {}",
            traj.steps(),
            policy.steps
        )));
    }
    if traj.variant != policy.variant {
        return Err(Error::Config(format!(
            "trajectory was generated by variant {}, policy runs {}",
            traj.variant.tag(),
            policy.variant.tag()
        )));
    }
    Ok(())
}

/// Recomputes the transition moments along a stored chain under the current
/// parameters. With the generating parameters this reproduces the stored
/// means and stds bit for bit.
pub fn replay_moments(
    policy: &FlowPolicy,
    s: &[f64],
    traj: &FlowTrajectory,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_trajectory(policy, s, traj)?;
    let k_steps = traj.steps();
    let mut means = Vec::with_capacity(k_steps);
    let mut stds = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let t = k as f64 / k_steps as f64;
        let a = traj.clip.clamp_intermediate(&traj.states[k]);
        let (mean, sigma) = step_moments(policy, &a, t, s)?;
        means.push(mean);
        stds.push(sigma);
    }
    Ok((means, stds))
}

/// Σ_k log N(a^{k+1}; μ^k, (σ^k)²·Δt·I) with moments recomputed from the
/// current parameters and the stored state chain. This is the quantity the
/// policy-gradient update differentiates.
pub fn trajectory_log_prob(policy: &FlowPolicy, s: &[f64], traj: &FlowTrajectory) -> Result<f64> {
    let (means, stds) = replay_moments(policy, s, traj)?;
    let dt = 1.0 / traj.steps() as f64;
    let mut total = 0.0;
    for (k, (mean, sigma)) in means.iter().zip(&stds).enumerate() {
        total += gaussian_log_density(&traj.states[k + 1], mean, *sigma, dt);
    }
    Ok(total)
}

/// Differential entropy of the trajectory's transition kernels,
/// Σ_k d/2·ln(2πe·(σ^k)²·Δt), recomputed from the current parameters.
pub fn trajectory_entropy(policy: &FlowPolicy, s: &[f64], traj: &FlowTrajectory) -> Result<f64> {
    let (_, stds) = replay_moments(policy, s, traj)?;
    let dt = 1.0 / traj.steps() as f64;
    let d = traj.action_dim() as f64;
    Ok(stds
        .iter()
        .map(|&sigma| 0.5 * d * (LN_2PI + 1.0 + (sigma * sigma * dt).ln()))
        .sum())
}

/// Per-network gradient accumulators for the policy.
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub velocity: Gradient,
    pub alpha: Gradient,
    pub sigma: Gradient,
}

impl PolicyGrads {
    pub fn zeros_like(policy: &FlowPolicy) -> Self {
        PolicyGrads {
            velocity: Gradient::zeros_like(&policy.velocity.net),
            alpha: Gradient::zeros_like(&policy.heads.alpha.net),
            sigma: Gradient::zeros_like(&policy.heads.sigma.net),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.velocity.scale(factor);
        self.alpha.scale(factor);
        self.sigma.scale(factor);
    }

    pub fn is_finite(&self) -> bool {
        self.velocity.is_finite() && self.alpha.is_finite() && self.sigma.is_finite()
    }
}

/// Accumulates d(w_logp·log π + w_entropy·H)/dθ for the trajectory into
/// `grads`, θ ranging over the velocity field and both control heads. The
/// score drift is an algebraic function of the velocity output, so its
/// gradient flows back into v_θ with no stop-gradient.
pub fn trajectory_backward(
    policy: &FlowPolicy,
    s: &[f64],
    traj: &FlowTrajectory,
    w_logp: f64,
    w_entropy: f64,
    grads: &mut PolicyGrads,
) -> Result<()> {
    check_trajectory(policy, s, traj)?;
    let k_steps = traj.steps();
    let dt = 1.0 / k_steps as f64;
    let d = traj.action_dim() as f64;
    for k in 0..k_steps {
        let t = k as f64 / k_steps as f64;
        let a = traj.clip.clamp_intermediate(&traj.states[k]);
        let input = concat_input(&a, t, s);
        let v_trace = policy.velocity.net.forward_trace(&input)?;
        let v = v_trace.output().to_vec();

        let mut alpha_trace = None;
        let mut sigma_trace = None;
        let (alpha_scaled, sigma) = match policy.variant {
            SamplerVariant::ScoreFlow => {
                let (al, tr) = policy.heads.alpha.alpha_scaled_trace(t)?;
                alpha_trace = Some(tr);
                let (sg, tr) = policy.heads.sigma.sigma_trace(&a, t, s, policy.sigma_bound)?;
                sigma_trace = Some(tr);
                (al, sg)
            }
            SamplerVariant::NoiseOnly | SamplerVariant::AlphaOne => {
                let al = if policy.variant == SamplerVariant::AlphaOne { 1.0 } else { 0.0 };
                let (sg, tr) = policy.heads.sigma.sigma_trace(&a, t, s, policy.sigma_bound)?;
                sigma_trace = Some(tr);
                (al, sg)
            }
            SamplerVariant::ScoreSdeCoupled => {
                let lambda = policy.lambda_at(t);
                (lambda, (2.0 * lambda).sqrt())
            }
            SamplerVariant::CoupledLearned => {
                let (lambda, tr) = policy.heads.alpha.alpha_scaled_trace(t)?;
                alpha_trace = Some(tr);
                (lambda, (2.0 * lambda).sqrt())
            }
        };
        if sigma <= 0.0 {
            return Err(Error::Domain(format!(
                "transition std must be positive to differentiate, got {sigma} at step {k}"
            )));
        }
        let mean = transition_mean(&v, &a, t, alpha_scaled, dt)?;
        let var = sigma * sigma * dt;
        let z: Vec<f64> = traj.states[k + 1].iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        let sq: f64 = z.iter().map(|zi| zi * zi).sum();

        // d log π / dμ = z/var; d log π / dσ = −d/σ + ‖z‖²/(σ³Δt); dH/dσ = d/σ
        let dl_dmean: Vec<f64> = z.iter().map(|zi| w_logp * zi / var).collect();
        let dl_dsigma = w_logp * (-d / sigma + sq / (sigma * sigma * sigma * dt))
            + w_entropy * d / sigma;

        // dμ_i/dv_i = Δt·(1 + α_scaled·t/(1−t)): direct drift plus the
        // velocity's appearance inside the score
        let v_factor = dt * (1.0 + alpha_scaled * t / (1.0 - t));
        let upstream_v: Vec<f64> = dl_dmean.iter().map(|g| g * v_factor).collect();
        policy.velocity.net.backward(&v_trace, &upstream_v, &mut grads.velocity);

        match policy.variant {
            SamplerVariant::ScoreFlow => {
                let score = closed_form_score(&v, &a, t)?;
                let dl_dalpha: f64 =
                    dl_dmean.iter().zip(&score).map(|(g, si)| g * si * dt).sum();
                policy.heads.alpha.alpha_backward(
                    alpha_trace.as_ref().expect("trace recorded"),
                    t,
                    dl_dalpha,
                    &mut grads.alpha,
                );
                policy.heads.sigma.sigma_backward(
                    sigma_trace.as_ref().expect("trace recorded"),
                    policy.sigma_bound,
                    dl_dsigma,
                    &mut grads.sigma,
                );
            }
            SamplerVariant::NoiseOnly | SamplerVariant::AlphaOne => {
                policy.heads.sigma.sigma_backward(
                    sigma_trace.as_ref().expect("trace recorded"),
                    policy.sigma_bound,
                    dl_dsigma,
                    &mut grads.sigma,
                );
            }
            SamplerVariant::ScoreSdeCoupled => {}
            SamplerVariant::CoupledLearned => {
                // λ moves both the mean (through the drift) and the std
                // (σ = √(2λ), dσ/dλ = 1/σ)
                let score = closed_form_score(&v, &a, t)?;
                let via_mean: f64 = dl_dmean.iter().zip(&score).map(|(g, si)| g * si * dt).sum();
                let dl_dlambda = via_mean + dl_dsigma / sigma;
                policy.heads.alpha.alpha_backward(
                    alpha_trace.as_ref().expect("trace recorded"),
                    t,
                    dl_dlambda,
                    &mut grads.alpha,
                );
            }
        }
    }
    Ok(())
}
