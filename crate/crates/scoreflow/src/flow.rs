//! Flow-matching pretraining.
//!
//! A policy action is generated by transporting source noise a⁰ ~ N(0, I)
//! along a learned velocity field. Pretraining regresses the field onto the
//! constant target velocity a₁ − a₀ of the linear path
//! a_t = (1−t)·a₀ + t·a₁, conditioned on the observation.

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, cosine_warm_restart_lr, mlp_init, Activation, Gradient, MlpSpec, OptimizerState,
    ParamBundle,
};
use crate::rng::{standard_normal_vec, stream_rng, StreamRng, STREAM_PRETRAIN};
use rand::Rng;

/// Training-time times are drawn from U[0, T_MAX]; the score downstream
/// divides by (1−t), so the immediate neighborhood of t = 1 is excluded at
/// the notional granularity of a 1000-step grid.
pub const T_MAX: f64 = 0.999;

/// Conditional velocity field v(a, t, s): an MLP over the concatenation
/// [a, t, s] with as many outputs as action dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFieldParams {
    pub net: ParamBundle,
    pub action_dim: usize,
    pub obs_dim: usize,
}

impl VelocityFieldParams {
    pub fn init(
        action_dim: usize,
        obs_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut layers: Vec<(usize, Activation)> =
            vec![(hidden_dim, Activation::SiLU); hidden_layers];
        layers.push((action_dim, Activation::Identity));
        let net = mlp_init(&MlpSpec::new(action_dim + 1 + obs_dim, &layers), seed)?;
        Ok(VelocityFieldParams { net, action_dim, obs_dim })
    }

    pub fn eval(&self, a: &[f64], t: f64, s: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(&concat_input(a, t, s))
    }
}

/// Builds the network input [a, t, s]; time enters as the raw scalar.
pub fn concat_input(a: &[f64], t: f64, s: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len() + 1 + s.len());
    x.extend_from_slice(a);
    x.push(t);
    x.extend_from_slice(s);
    x
}

/// One point on the linear interpolation path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPathSample {
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub t: f64,
    pub a_t: Vec<f64>,
    /// Target velocity a₁ − a₀, constant along the path.
    pub target: Vec<f64>,
}

/// Point a_t = (1−t)·a₀ + t·a₁ with its target velocity.
pub fn linear_interpolate(a0: &[f64], a1: &[f64], t: f64) -> Result<FlowPathSample> {
    if a0.len() != a1.len() {
        return Err(Error::Shape(format!("a0 has dim {}, a1 has dim {}", a0.len(), a1.len())));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "interpolation time must lie in [0, 1), got {t} (t = 1 collapses the score denominator)"
        )));
    }
    let a_t = a0.iter().zip(a1).map(|(&x0, &x1)| (1.0 - t) * x0 + t * x1).collect();
    let target = a0.iter().zip(a1).map(|(&x0, &x1)| x1 - x0).collect();
    Ok(FlowPathSample { a0: a0.to_vec(), a1: a1.to_vec(), t, a_t, target })
}

/// Demonstration pairs with action normalization to [−1, 1] per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub observations: Vec<Vec<f64>>,
    /// Actions already mapped into [−1, 1]^d.
    pub actions: Vec<Vec<f64>>,
    pub action_dim: usize,
    pub obs_dim: usize,
    /// Per-dimension midpoint of the raw action range.
    pub action_center: Vec<f64>,
    /// Per-dimension half-range; 1.0 for degenerate (constant) dimensions.
    pub action_scale: Vec<f64>,
}

impl DemoDataset {
    /// Builds a dataset from raw pairs, computing min/max normalization.
    pub fn from_pairs(observations: Vec<Vec<f64>>, raw_actions: Vec<Vec<f64>>) -> Result<Self> {
        if observations.is_empty() || observations.len() != raw_actions.len() {
            return Err(Error::Shape(format!(
                "need equal nonzero counts of observations and actions, got {} and {}",
                observations.len(),
                raw_actions.len()
            )));
        }
        let obs_dim = observations[0].len();
        let action_dim = raw_actions[0].len();
        if observations.iter().any(|o| o.len() != obs_dim)
            || raw_actions.iter().any(|a| a.len() != action_dim)
        {
            return Err(Error::Shape("ragged observation or action rows".into()));
        }
        if raw_actions.iter().any(|a| a.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("demo action".into()));
        }
        let mut lo = raw_actions[0].clone();
        let mut hi = raw_actions[0].clone();
        for a in &raw_actions {
            for (d, &x) in a.iter().enumerate() {
                lo[d] = lo[d].min(x);
                hi[d] = hi[d].max(x);
            }
        }
        let action_center: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| 0.5 * (l + h)).collect();
        let action_scale: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { 0.5 * (h - l) } else { 1.0 })
            .collect();
        let actions = raw_actions
            .iter()
            .map(|a| {
                a.iter()
                    .enumerate()
                    .map(|(d, &x)| (x - action_center[d]) / action_scale[d])
                    .collect()
            })
            .collect();
        Ok(DemoDataset { observations, actions, action_dim, obs_dim, action_center, action_scale })
    }

    /// Builds a dataset whose actions already live in [−1, 1]^d, keeping the
    /// identity transform. Used when the policy acts directly in the
    /// environment's action box.
    pub fn from_pairs_unit(observations: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        if actions.iter().any(|a| a.iter().any(|x| x.abs() > 1.0)) {
            return Err(Error::Domain(
                "unit-box dataset requires actions within [−1, 1]".into(),
            ));
        }
        Self::from_pairs_identity(observations, actions)
    }

    /// Identity transform without the unit-box restriction: actions stay in
    /// natural units. Used when the model should learn the raw distribution,
    /// e.g. velocity fields graded against an analytic score.
    pub fn from_pairs_identity(observations: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        if observations.is_empty() || observations.len() != actions.len() {
            return Err(Error::Shape(format!(
                "need equal nonzero counts of observations and actions, got {} and {}",
                observations.len(),
                actions.len()
            )));
        }
        let obs_dim = observations[0].len();
        let action_dim = actions[0].len();
        if observations.iter().any(|o| o.len() != obs_dim)
            || actions.iter().any(|a| a.len() != action_dim)
        {
            return Err(Error::Shape("ragged observation or action rows".into()));
        }
        Ok(DemoDataset {
            observations,
            actions,
            action_dim,
            obs_dim,
            action_center: vec![0.0; action_dim],
            action_scale: vec![1.0; action_dim],
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Maps a normalized action back to raw environment units.
    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(d, &x)| self.action_center[d] + self.action_scale[d] * x)
            .collect()
    }
}

/// Fixed (t, a₀) draws for one FM batch, exposed so tests can pin them.
#[derive(Debug, Clone)]
pub struct FmDraw {
    pub t: f64,
    pub a0: Vec<f64>,
}

pub fn sample_fm_draws(action_dim: usize, count: usize, rng: &mut StreamRng) -> Vec<FmDraw> {
    (0..count)
        .map(|_| FmDraw { t: rng.gen::<f64>() * T_MAX, a0: standard_normal_vec(rng, action_dim) })
        .collect()
}

/// Flow-matching loss on explicit draws: mean over the batch of
/// ‖v(a_t, t, s) − (a₁ − a₀)‖², plus its parameter gradient.
pub fn fm_loss_with_draws(
    params: &VelocityFieldParams,
    batch: &[(&[f64], &[f64])],
    draws: &[FmDraw],
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Shape("fm batch must be nonempty".into()));
    }
    assert_eq!(batch.len(), draws.len(), "one draw per batch pair");
    let mut grad = Gradient::zeros_like(&params.net);
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (idx, (&(s, a1), draw)) in batch.iter().zip(draws).enumerate() {
        let path = linear_interpolate(&draw.a0, a1, draw.t)?;
        let x = concat_input(&path.a_t, draw.t, s);
        let trace = params.net.forward_trace(&x)?;
        let v = trace.output();
        if v.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite(format!("velocity output on batch sample {idx}")));
        }
        let mut upstream = Vec::with_capacity(v.len());
        for (&vi, &ti) in v.iter().zip(&path.target) {
            let r = vi - ti;
            loss += r * r * inv_b;
            upstream.push(2.0 * r * inv_b);
        }
        params.net.backward(&trace, &upstream, &mut grad);
    }
    Ok((loss, grad))
}

/// Flow-matching loss with internally sampled t ~ U[0, T_MAX], a₀ ~ N(0, I).
pub fn fm_loss(
    params: &VelocityFieldParams,
    batch: &[(&[f64], &[f64])],
    rng: &mut StreamRng,
) -> Result<(f64, Gradient)> {
    let draws = sample_fm_draws(params.action_dim, batch.len(), rng);
    fm_loss_with_draws(params, batch, &draws)
}

/// Deterministic Euler sampling of the learned ODE on the k/K grid,
/// starting from a₀ ~ N(0, I) drawn from `rng`.
pub fn ode_sample(
    params: &VelocityFieldParams,
    s: &[f64],
    k_steps: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if k_steps == 0 {
        return Err(Error::Domain("ode_sample needs at least one step".into()));
    }
    let a0 = standard_normal_vec(rng, params.action_dim);
    ode_sample_from(params, s, k_steps, a0)
}

/// Euler integration from a caller-supplied start point.
pub fn ode_sample_from(
    params: &VelocityFieldParams,
    s: &[f64],
    k_steps: usize,
    mut a: Vec<f64>,
) -> Result<Vec<f64>> {
    let dt = 1.0 / k_steps as f64;
    for k in 0..k_steps {
        let t = k as f64 / k_steps as f64;
        let v = params.eval(&a, t, s)?;
        for (ai, vi) in a.iter_mut().zip(&v) {
            *ai += vi * dt;
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("ode state after step {k}")));
        }
    }
    Ok(a)
}

/// Pretraining hyperparameters at desk scale.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_cycle_steps: u64,
    pub lr_warmup_steps: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 256,
            hidden_dim: 32,
            hidden_layers: 2,
            base_lr: 3e-3,
            min_lr: 1e-4,
            lr_cycle_steps: 2000,
            lr_warmup_steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub params: VelocityFieldParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// FM loss at every optimizer step, in order.
    pub loss_history: Vec<f64>,
}

/// Fits a velocity field to explicit (observation, action) pairs: Adam over
/// FM mini-batches with the cosine warm-restart schedule. Deterministic
/// given (pairs, config).
pub fn fit_velocity_field(
    pairs: &[(&[f64], &[f64])],
    action_dim: usize,
    obs_dim: usize,
    config: &PretrainConfig,
) -> Result<PretrainResult> {
    if pairs.is_empty() {
        return Err(Error::Shape("training pair set is empty".into()));
    }
    let mut params = VelocityFieldParams::init(
        action_dim,
        obs_dim,
        config.hidden_dim,
        config.hidden_layers,
        config.seed,
    )?;
    let mut opt = OptimizerState::new(&params.net);
    let mut rng = stream_rng(config.seed, &[STREAM_PRETRAIN]);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut loss_history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<(&[f64], &[f64])> =
            (0..config.batch_size).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect();
        let (loss, grad) = fm_loss(&params, &batch, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, last_finite: Box::new(params.net) });
        }
        if step == 0 {
            initial_loss = loss;
        }
        final_loss = loss;
        loss_history.push(loss);
        let lr = cosine_warm_restart_lr(
            config.base_lr,
            config.min_lr,
            config.lr_cycle_steps,
            config.lr_warmup_steps,
            step as u64,
        )?;
        adam_step(&mut params.net, &grad, &mut opt, lr)?;
    }
    Ok(PretrainResult { params, initial_loss, final_loss, loss_history })
}

/// Behavior-cloning pretraining on a demo dataset (normalized actions).
pub fn pretrain(dataset: &DemoDataset, config: &PretrainConfig) -> Result<PretrainResult> {
    if dataset.is_empty() {
        return Err(Error::Shape("pretrain dataset is empty".into()));
    }
    let pairs: Vec<(&[f64], &[f64])> = dataset
        .observations
        .iter()
        .zip(&dataset.actions)
        .map(|(o, a)| (o.as_slice(), a.as_slice()))
        .collect();
    fit_velocity_field(&pairs, dataset.action_dim, dataset.obs_dim, config)
}
