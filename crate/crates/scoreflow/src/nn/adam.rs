//! Bias-corrected Adam.

use crate::error::{Error, Result};

use super::{Gradient, LayerGrad, ParamBundle};

/// First/second-moment accumulators for one `ParamBundle`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<LayerGrad>,
    pub v: Vec<LayerGrad>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    /// Fresh zero-moment state with the usual (0.9, 0.999, 1e-8) constants.
    pub fn new(params: &ParamBundle) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect::<Vec<_>>()
        };
        OptimizerState { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn shape_matches(&self, params: &ParamBundle) -> bool {
        self.m.len() == params.layers.len()
            && self
                .m
                .iter()
                .zip(&self.v)
                .zip(&params.layers)
                .all(|((m, v), l)| {
                    m.weights.len() == l.weights.len()
                        && m.bias.len() == l.bias.len()
                        && v.weights.len() == l.weights.len()
                        && v.bias.len() == l.bias.len()
                })
    }
}

/// One Adam update in place. Rejects non-finite gradients before touching
/// either the parameters or the moments.
pub fn adam_step(
    params: &mut ParamBundle,
    grad: &Gradient,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    if !grad.shape_matches(params) || !state.shape_matches(params) {
        return Err(Error::Shape("gradient/optimizer state not congruent with params".into()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient entries; adam update rejected".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (li, layer) in params.layers.iter_mut().enumerate() {
        let g = &grad.layers[li];
        let m = &mut state.m[li];
        let v = &mut state.v[li];
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        };
        for i in 0..layer.weights.len() {
            update(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i]);
        }
        for i in 0..layer.bias.len() {
            update(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
        }
    }
    Ok(())
}
