//! Score-based drift control.
//!
//! For the linear path the marginal score is an algebraic function of the
//! optimal velocity, s_t(a) = (t·v − a)/(1−t), so a pretrained velocity
//! field yields a score for free. Two small heads modulate how it is used:
//! a time-decayed scheduler α(t) scaling the score drift, and a bounded
//! variance predictor σ(a, t, s) for the sampling noise. The drift and the
//! noise scale share no parameters, which is what makes mean/variance
//! control decoupled downstream.

use crate::error::{Error, Result};
use crate::flow::concat_input;
use crate::nn::{mlp_init, Activation, ForwardTrace, Gradient, MlpSpec, ParamBundle};

/// Floor on the (1−t) denominator; the k/K sampling grid keeps 1−t ≥ 1/K,
/// so this only guards misuse.
pub const T_DENOM_FLOOR: f64 = 1e-6;

/// Score from velocity: (t·v − a)/(1−t) elementwise.
pub fn closed_form_score(v: &[f64], a: &[f64], t: f64) -> Result<Vec<f64>> {
    if v.len() != a.len() {
        return Err(Error::Shape(format!("v has dim {}, a has dim {}", v.len(), a.len())));
    }
    if !(0.0..=1.0 - T_DENOM_FLOOR).contains(&t) {
        return Err(Error::Domain(format!(
            "score time must lie in [0, 1 − {T_DENOM_FLOOR}], got {t}"
        )));
    }
    let inv = 1.0 / (1.0 - t);
    Ok(v.iter().zip(a).map(|(&vi, &ai)| (t * vi - ai) * inv).collect())
}

/// Time-decayed score scheduler: a scalar net on t with Softplus output,
/// multiplied by the hard decay factor (1−t).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSchedulerParams {
    pub net: ParamBundle,
}

impl ScoreSchedulerParams {
    /// Two SiLU hidden layers of `hidden_dim`, Softplus output; the final
    /// layer starts at zero weights and bias −2.0, so a fresh scheduler
    /// applies the small known correction Softplus(−2) ≈ 0.127 before decay.
    pub fn init(hidden_dim: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(
            1,
            &[
                (hidden_dim, Activation::SiLU),
                (hidden_dim, Activation::SiLU),
                (1, Activation::Softplus),
            ],
        )
        .with_zero_init_final();
        Ok(ScoreSchedulerParams { net: mlp_init(&spec, seed)? })
    }

    /// Pre-decay scheduler value α(t) > 0.
    pub fn alpha_raw(&self, t: f64) -> Result<f64> {
        Ok(self.net.forward(&[t])?[0])
    }

    /// Decayed coefficient (1−t)·α(t); strictly positive for t < 1 and
    /// exactly zero at t = 1.
    pub fn alpha_scaled(&self, t: f64) -> Result<f64> {
        assert!((0.0..=1.0).contains(&t), "scheduler time {t} outside [0, 1]");
        Ok((1.0 - t) * self.alpha_raw(t)?)
    }

    /// Forward pass keeping the trace for `alpha_backward`.
    pub fn alpha_scaled_trace(&self, t: f64) -> Result<(f64, ForwardTrace)> {
        assert!((0.0..=1.0).contains(&t), "scheduler time {t} outside [0, 1]");
        let trace = self.net.forward_trace(&[t])?;
        let value = (1.0 - t) * trace.output()[0];
        Ok((value, trace))
    }

    /// Accumulates d(upstream·alpha_scaled)/dψ into `grad`; `upstream` is the
    /// partial w.r.t. the decayed value.
    pub fn alpha_backward(&self, trace: &ForwardTrace, t: f64, upstream: f64, grad: &mut Gradient) {
        self.net.backward(trace, &[upstream * (1.0 - t)], grad);
    }
}

/// Bounded per-step noise scale σ(a, t, s) = σ_min + (σ_hi−σ_min)/2·(y+1)
/// with y the tanh output of a small net over [a, t, s].
#[derive(Debug, Clone, PartialEq)]
pub struct VariancePredictorParams {
    pub net: ParamBundle,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl VariancePredictorParams {
    pub fn init(
        action_dim: usize,
        obs_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        sigma_min: f64,
        sigma_max: f64,
        seed: u64,
    ) -> Result<Self> {
        check_bounds(sigma_min, sigma_max)?;
        let mut layers: Vec<(usize, Activation)> =
            vec![(hidden_dim, Activation::Tanh); hidden_layers];
        layers.push((1, Activation::Tanh));
        let net = mlp_init(&MlpSpec::new(action_dim + 1 + obs_dim, &layers), seed)?;
        Ok(VariancePredictorParams { net, sigma_min, sigma_max })
    }

    /// Noise scale with the configured upper bound.
    pub fn sigma_eval(&self, a: &[f64], t: f64, s: &[f64]) -> Result<f64> {
        self.sigma_eval_bounded(a, t, s, self.sigma_max)
    }

    /// Noise scale with a scheduled (possibly tightened) upper bound.
    pub fn sigma_eval_bounded(&self, a: &[f64], t: f64, s: &[f64], sigma_hi: f64) -> Result<f64> {
        Ok(self.sigma_trace(a, t, s, sigma_hi)?.0)
    }

    /// Forward pass keeping the trace for `sigma_backward`.
    pub fn sigma_trace(
        &self,
        a: &[f64],
        t: f64,
        s: &[f64],
        sigma_hi: f64,
    ) -> Result<(f64, ForwardTrace)> {
        check_bounds(self.sigma_min, sigma_hi)?;
        let trace = self.net.forward_trace(&concat_input(a, t, s))?;
        let y = trace.output()[0];
        let sigma = self.sigma_min + 0.5 * (sigma_hi - self.sigma_min) * (y + 1.0);
        Ok((sigma, trace))
    }

    /// Accumulates d(upstream·σ)/dφ into `grad`.
    pub fn sigma_backward(
        &self,
        trace: &ForwardTrace,
        sigma_hi: f64,
        upstream: f64,
        grad: &mut Gradient,
    ) {
        let dy = 0.5 * (sigma_hi - self.sigma_min);
        self.net.backward(trace, &[upstream * dy], grad);
    }
}

fn check_bounds(sigma_min: f64, sigma_max: f64) -> Result<()> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(Error::Config(format!(
            "sigma bounds need 0 < sigma_min < sigma_max, got sigma_min={sigma_min}, sigma_max={sigma_max}"
        )));
    }
    Ok(())
}

/// The two control heads trained during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlHeads {
    pub alpha: ScoreSchedulerParams,
    pub sigma: VariancePredictorParams,
}

/// Training-time decay of the noise upper bound: hold at σ_max for the first
/// `hold_ratio` share of iterations, then decay linearly so the final
/// iteration lands on mix·σ_min + (1−mix)·σ_max.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBoundSchedule {
    pub hold_ratio: f64,
    pub decay_target_mix: f64,
    pub total_iters: usize,
}

impl NoiseBoundSchedule {
    pub fn effective_sigma_max(&self, iter: usize, sigma_min: f64, sigma_max: f64) -> f64 {
        debug_assert!(iter <= self.total_iters, "iteration {iter} beyond schedule");
        let hold_end = self.hold_ratio * self.total_iters as f64;
        // boundary closed on the hold side
        if iter as f64 <= hold_end || self.total_iters as f64 <= hold_end {
            return sigma_max;
        }
        let target = self.decay_target_mix * sigma_min + (1.0 - self.decay_target_mix) * sigma_max;
        let frac = (iter as f64 - hold_end) / (self.total_iters as f64 - hold_end);
        sigma_max + (target - sigma_max) * frac
    }
}
