//! Minimal reverse-mode MLP engine.
//!
//! Fixed feed-forward stacks of affine layers with elementwise activations,
//! exact backprop, Adam, a cosine warm-restart schedule and a central
//! finite-difference gradient checker. All arithmetic is `f64`; the
//! verification suite depends on tight gradient tolerances that 32-bit
//! floats cannot meet.

mod adam;
mod check;
mod schedule;

pub use adam::{adam_step, OptimizerState};
pub use check::finite_diff_check;
pub use schedule::cosine_warm_restart_lr;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream_rng};

/// Elementwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    SiLU,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::SiLU => z * sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative as a function of the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::SiLU => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let y = z.tanh();
                1.0 - y * y
            }
            Activation::Softplus => sigmoid(z),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + e^z).
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Architecture of one MLP: layer widths plus per-layer activations.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// (output width, activation) per layer, in forward order.
    pub layers: Vec<(usize, Activation)>,
    /// Initialize the final layer to zero weights and bias −2.0 instead of
    /// the random init (used by the score-scheduler head so a fresh policy
    /// starts with a small, known drift correction).
    pub zero_init_final: bool,
}

/// Bias the zero-initialized final layer is pinned to.
pub const ZERO_INIT_FINAL_BIAS: f64 = -2.0;

impl MlpSpec {
    pub fn new(input_dim: usize, layers: &[(usize, Activation)]) -> Self {
        MlpSpec { input_dim, layers: layers.to_vec(), zero_init_final: false }
    }

    pub fn with_zero_init_final(mut self) -> Self {
        self.zero_init_final = true;
        self
    }
}

/// One affine layer: `weights` is row-major `[out_dim × in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A trainable parameter set: the layers of one MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub layers: Vec<Layer>,
}

/// Per-entry partials, shape-congruent with a `ParamBundle`.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Saved intermediates from one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    /// Pre-activation vector per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation vector per layer.
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }
}

/// He-style seeded init: weights ~ N(0, 1/fan_in), biases zero. Deterministic
/// in (spec, seed). With `zero_init_final`, the last layer gets exactly zero
/// weights and bias −2.0 in every unit.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamBundle> {
    if spec.layers.is_empty() {
        return Err(Error::Config("mlp spec needs at least one layer".into()));
    }
    if spec.input_dim == 0 || spec.layers.iter().any(|&(w, _)| w == 0) {
        return Err(Error::Config("zero-width layer in mlp spec".into()));
    }
    let mut rng = stream_rng(seed, &[crate::rng::STREAM_NET_INIT]);
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut in_dim = spec.input_dim;
    for (idx, &(out_dim, activation)) in spec.layers.iter().enumerate() {
        let special = spec.zero_init_final && idx == spec.layers.len() - 1;
        let mut weights = vec![0.0; out_dim * in_dim];
        let mut bias = vec![0.0; out_dim];
        if special {
            bias.fill(ZERO_INIT_FINAL_BIAS);
        } else {
            let scale = 1.0 / (in_dim as f64).sqrt();
            for w in weights.iter_mut() {
                *w = scale * standard_normal(&mut rng);
            }
        }
        layers.push(Layer { in_dim, out_dim, weights, bias, activation });
        in_dim = out_dim;
    }
    Ok(ParamBundle { layers })
}

impl ParamBundle {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty bundle").out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Pure forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.affine_then_activate(&x);
        }
        Ok(x)
    }

    /// Forward pass that keeps per-layer intermediates for `backward`.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let z = layer.affine(x);
            let y: Vec<f64> = z.iter().map(|&v| layer.activation.eval(v)).collect();
            pre.push(z);
            post.push(y);
            x = post.last().expect("just pushed");
        }
        Ok(ForwardTrace { input: input.to_vec(), pre, post })
    }

    /// Reverse pass. Accumulates parameter partials into `grad` (so batches
    /// can sum in place) and returns the gradient w.r.t. the input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64], grad: &mut Gradient) -> Vec<f64> {
        assert_eq!(upstream.len(), self.output_dim(), "upstream width mismatch");
        assert!(grad.shape_matches(self), "gradient shape mismatch");
        let mut delta: Vec<f64> = Vec::with_capacity(upstream.len());
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[idx];
            let incoming: &[f64] = if idx + 1 == self.layers.len() { upstream } else { &delta };
            // δ = upstream ⊙ act'(z)
            let local: Vec<f64> = incoming
                .iter()
                .zip(z)
                .map(|(&g, &zi)| g * layer.activation.derivative(zi))
                .collect();
            let x: &[f64] = if idx == 0 { &trace.input } else { &trace.post[idx - 1] };
            let lg = &mut grad.layers[idx];
            for (r, &d) in local.iter().enumerate() {
                lg.bias[r] += d;
                let row = &mut lg.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (wg, &xi) in row.iter_mut().zip(x) {
                    *wg += d * xi;
                }
            }
            // input grad of this layer: Wᵀ δ
            let mut down = vec![0.0; layer.in_dim];
            for (r, &d) in local.iter().enumerate() {
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (dn, &w) in down.iter_mut().zip(row) {
                    *dn += d * w;
                }
            }
            delta = down;
        }
        delta
    }

    /// One-shot gradient of the forward map: forwards internally, then
    /// returns fresh parameter partials plus the input gradient.
    pub fn backprop(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradient, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has width {}, output width is {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let trace = self.forward_trace(input)?;
        let mut grad = Gradient::zeros_like(self);
        let input_grad = self.backward(&trace, upstream, &mut grad);
        Ok((grad, input_grad))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has width {}, first layer expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl Layer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            *o += row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<f64>();
        }
        out
    }

    fn affine_then_activate(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.affine(x);
        for v in z.iter_mut() {
            *v = self.activation.eval(*v);
        }
        z
    }
}

impl Gradient {
    pub fn zeros_like(params: &ParamBundle) -> Self {
        Gradient {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn shape_matches(&self, params: &ParamBundle) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    pub fn scale(&mut self, factor: f64) {
        for lg in &mut self.layers {
            for w in lg.weights.iter_mut() {
                *w *= factor;
            }
            for b in lg.bias.iter_mut() {
                *b *= factor;
            }
        }
    }

    /// self += factor · other; shapes must agree.
    pub fn add_scaled(&mut self, other: &Gradient, factor: f64) {
        assert_eq!(self.layers.len(), other.layers.len(), "gradient shape mismatch");
        for (lg, og) in self.layers.iter_mut().zip(&other.layers) {
            for (w, ow) in lg.weights.iter_mut().zip(&og.weights) {
                *w += factor * ow;
            }
            for (b, ob) in lg.bias.iter_mut().zip(&og.bias) {
                *b += factor * ob;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|lg| {
                lg.weights.iter().chain(&lg.bias).map(|&g| g * g).sum::<f64>()
            })
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|lg| lg.weights.iter().chain(&lg.bias).all(|g| g.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|lg| lg.weights.iter().chain(&lg.bias).all(|&g| g == 0.0))
    }
}

/// Rescales `parts` in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(parts: &mut [&mut Gradient], max_norm: f64) -> f64 {
    let norm = parts.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for g in parts.iter_mut() {
            g.scale(factor);
        }
    }
    norm
}

/// Entry-wise parameter access shared by Adam and the finite-difference
/// checker: visits every (param, grad-slot) pair in a fixed order.
pub(crate) fn entry_count(params: &ParamBundle) -> usize {
    params.param_count()
}

pub(crate) fn get_entry(params: &ParamBundle, mut idx: usize) -> f64 {
    for layer in &params.layers {
        if idx < layer.weights.len() {
            return layer.weights[idx];
        }
        idx -= layer.weights.len();
        if idx < layer.bias.len() {
            return layer.bias[idx];
        }
        idx -= layer.bias.len();
    }
    panic!("entry index out of range");
}

pub(crate) fn set_entry(params: &mut ParamBundle, mut idx: usize, value: f64) {
    for layer in &mut params.layers {
        if idx < layer.weights.len() {
            layer.weights[idx] = value;
            return;
        }
        idx -= layer.weights.len();
        if idx < layer.bias.len() {
            layer.bias[idx] = value;
            return;
        }
        idx -= layer.bias.len();
    }
    panic!("entry index out of range");
}

pub(crate) fn grad_entry(grad: &Gradient, mut idx: usize) -> f64 {
    for lg in &grad.layers {
        if idx < lg.weights.len() {
            return lg.weights[idx];
        }
        idx -= lg.weights.len();
        if idx < lg.bias.len() {
            return lg.bias[idx];
        }
        idx -= lg.bias.len();
    }
    panic!("entry index out of range");
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOFTPLUS_MINUS_2: f64 = 0.126_928_011_042_972_5;

    fn two_layer_silu() -> ParamBundle {
        mlp_init(
            &MlpSpec::new(3, &[(4, Activation::SiLU), (2, Activation::Identity)]),
            11,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::new(3, &[(4, Activation::SiLU), (2, Activation::Identity)]);
        let a = mlp_init(&spec, 42).unwrap();
        let b = mlp_init(&spec, 42).unwrap();
        assert_eq!(a, b, "same spec and seed must give bit-identical bundles");
        let c = mlp_init(&spec, 43).unwrap();
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn zero_init_final_pins_last_layer() {
        let spec = MlpSpec::new(1, &[(16, Activation::SiLU), (16, Activation::SiLU), (1, Activation::Softplus)])
            .with_zero_init_final();
        let params = mlp_init(&spec, 5).unwrap();
        let last = params.layers.last().unwrap();
        assert!(last.weights.iter().all(|&w| w == 0.0));
        assert!(last.bias.iter().all(|&b| b == ZERO_INIT_FINAL_BIAS));
        // Output pre-activation is −2.0 for every input, so the Softplus
        // output is ln(1+e^{−2}) regardless of t.
        for t in [0.0, 0.3, 0.9] {
            let out = params.forward(&[t]).unwrap();
            assert!((out[0] - SOFTPLUS_MINUS_2).abs() < 1e-15, "got {}", out[0]);
        }
    }

    #[test]
    fn single_layer_matches_manual_matrix_product() {
        let spec = MlpSpec::new(3, &[(2, Activation::Identity)]);
        let params = mlp_init(&spec, 9).unwrap();
        let x = [0.5, -1.25, 2.0];
        let got = params.forward(&x).unwrap();
        let layer = &params.layers[0];
        for r in 0..2 {
            let mut manual = layer.bias[r];
            for c in 0..3 {
                manual += layer.weights[r * 3 + c] * x[c];
            }
            assert_eq!(got[r], manual, "row {r} disagrees with manual Wx+b");
        }
    }

    #[test]
    fn zero_params_identity_gives_zero_output() {
        let layer = Layer {
            in_dim: 3,
            out_dim: 2,
            weights: vec![0.0; 6],
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        };
        let params = ParamBundle { layers: vec![layer] };
        assert_eq!(params.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_softplus_unit_at_minus_two() {
        let layer = Layer {
            in_dim: 1,
            out_dim: 1,
            weights: vec![0.0],
            bias: vec![-2.0],
            activation: Activation::Softplus,
        };
        let params = ParamBundle { layers: vec![layer] };
        let out = params.forward(&[3.7]).unwrap();
        assert!((out[0] - SOFTPLUS_MINUS_2).abs() < 1e-15);
    }

    #[test]
    fn two_layer_silu_matches_stepwise_evaluation() {
        let params = two_layer_silu();
        let x = [0.2, -0.7, 1.1];
        let got = params.forward(&x).unwrap();
        // Independent step-by-step evaluation with scalar math.
        let l0 = &params.layers[0];
        let mut hidden = [0.0; 4];
        for r in 0..4 {
            let mut z = l0.bias[r];
            for c in 0..3 {
                z += l0.weights[r * 3 + c] * x[c];
            }
            hidden[r] = z / (1.0 + (-z).exp());
        }
        let l1 = &params.layers[1];
        for r in 0..2 {
            let mut z = l1.bias[r];
            for c in 0..4 {
                z += l1.weights[r * 4 + c] * hidden[c];
            }
            assert!((got[r] - z).abs() < 1e-15, "output {r}: {} vs {}", got[r], z);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = two_layer_silu();
        assert!(matches!(params.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backprop_linear_layer_outer_product() {
        let spec = MlpSpec::new(3, &[(2, Activation::Identity)]);
        let params = mlp_init(&spec, 17).unwrap();
        let x = [1.0, -2.0, 0.5];
        let g = [0.3, -1.1];
        let (grad, input_grad) = params.backprop(&x, &g).unwrap();
        let lg = &grad.layers[0];
        for r in 0..2 {
            assert_eq!(lg.bias[r], g[r], "bias grad is the upstream gradient");
            for c in 0..3 {
                assert_eq!(lg.weights[r * 3 + c], g[r] * x[c], "weight grad is g ⊗ x");
            }
        }
        let layer = &params.layers[0];
        for c in 0..3 {
            let expect = g[0] * layer.weights[c] + g[1] * layer.weights[3 + c];
            assert!((input_grad[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params = two_layer_silu();
        let (grad, input_grad) = params.backprop(&[0.4, 0.1, -0.9], &[0.0, 0.0]).unwrap();
        assert!(grad.is_zero());
        assert!(input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_loss_gradient_matches_finite_differences() {
        // loss(params) = ‖f(x)‖² on a 2-layer net; backprop upstream 2·f(x).
        let params = two_layer_silu();
        let x = [0.3, -0.8, 0.6];
        let out = params.forward(&x).unwrap();
        let upstream: Vec<f64> = out.iter().map(|&o| 2.0 * o).collect();
        let (grad, _) = params.backprop(&x, &upstream).unwrap();
        let err = finite_diff_check(
            |p: &ParamBundle| {
                let o = p.forward(&x)?;
                Ok(o.iter().map(|&v| v * v).sum())
            },
            &params,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn tanh_and_softplus_gradients_match_finite_differences() {
        let spec = MlpSpec::new(2, &[(5, Activation::Tanh), (1, Activation::Softplus)]);
        let params = mlp_init(&spec, 3).unwrap();
        let x = [0.9, -0.4];
        let out = params.forward(&x).unwrap();
        let (grad, _) = params.backprop(&x, &[2.0 * out[0]]).unwrap();
        let err = finite_diff_check(
            |p: &ParamBundle| {
                let o = p.forward(&x)?;
                Ok(o[0] * o[0])
            },
            &params,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_accumulates_across_backward_calls() {
        let params = two_layer_silu();
        let x = [0.1, 0.2, 0.3];
        let trace = params.forward_trace(&x).unwrap();
        let mut grad = Gradient::zeros_like(&params);
        params.backward(&trace, &[1.0, 0.0], &mut grad);
        params.backward(&trace, &[1.0, 0.0], &mut grad);
        let (single, _) = params.backprop(&x, &[2.0, 0.0]).unwrap();
        for (a, b) in grad.layers.iter().zip(&single.layers) {
            for (ga, gb) in a.weights.iter().zip(&b.weights) {
                assert!((ga - gb).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clip_global_norm_rescales_jointly() {
        let params = two_layer_silu();
        let mut g1 = Gradient::zeros_like(&params);
        let mut g2 = Gradient::zeros_like(&params);
        g1.layers[0].weights[0] = 3.0;
        g2.layers[1].bias[0] = 4.0;
        let norm = clip_global_norm(&mut [&mut g1, &mut g2], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after = (g1.sq_norm() + g2.sq_norm()).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        assert!((g1.layers[0].weights[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_width_layer_rejected() {
        let spec = MlpSpec::new(3, &[(0, Activation::Identity)]);
        assert!(matches!(mlp_init(&spec, 0), Err(Error::Config(_))));
    }
}
