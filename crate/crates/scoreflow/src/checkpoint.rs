//! Binary checkpoints.
//!
//! Layout: 8-byte magic `SCOREFLW`, little-endian u32 format version, then
//! length-prefixed little-endian f64 arrays in this fixed order:
//!
//!  1. config text: `[byte_len]`, then the UTF-8 bytes packed 8 per f64
//!  2. policy scalars: `[action_dim, obs_dim, steps, variant_tag,
//!     lambda_max, sigma_bound, clip_intermediate, clip_final,
//!     clip_enabled, sigma_min, sigma_max]`
//!  3. four nets (velocity, scheduler, variance, critic), each as a
//!     structure array `[n_layers, (in_dim, out_dim, activation_tag)…]`
//!     followed by per-layer weight and bias arrays
//!  4. schedule: `[hold_ratio, decay_target_mix, total_iters, iter]`
//!  5. normalization stats: action_center array, action_scale array
//!  6. reward stat: `[count, mean, m2]`
//!  7. four optimizer states in net order, each as
//!     `[step, beta1, beta2, eps]` then per-layer m/v weight and bias arrays
//!
//! Every f64 is written and read as raw bits, so roundtrips are bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::VelocityFieldParams;
use crate::nn::{Activation, Layer, OptimizerState, ParamBundle};
use crate::ppo::{ActorOptimizers, CriticParams, RunningStd};
use crate::sampler::{ClipPolicy, FlowPolicy, SamplerVariant};
use crate::score::{ControlHeads, NoiseBoundSchedule, ScoreSchedulerParams, VariancePredictorParams};

const MAGIC: &[u8; 8] = b"SCOREFLW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: FlowPolicy,
    pub critic: CriticParams,
    pub actor_opt: ActorOptimizers,
    pub critic_opt: OptimizerState,
    pub schedule: NoiseBoundSchedule,
    /// Iterations of fine-tuning already applied (schedule position).
    pub iter: u64,
    pub action_center: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub reward_stat: RunningStd,
    pub config_text: String,
}

impl Checkpoint {
    /// A checkpoint straight out of pretraining: fresh optimizers, schedule
    /// at iteration zero.
    pub fn fresh(
        policy: FlowPolicy,
        critic: CriticParams,
        schedule: NoiseBoundSchedule,
        action_center: Vec<f64>,
        action_scale: Vec<f64>,
        config_text: String,
    ) -> Self {
        let actor_opt = ActorOptimizers::new(&policy);
        let critic_opt = OptimizerState::new(&critic.net);
        Checkpoint {
            policy,
            critic,
            actor_opt,
            critic_opt,
            schedule,
            iter: 0,
            action_center,
            action_scale,
            reward_stat: RunningStd::default(),
            config_text,
        }
    }
}

fn variant_tag(v: SamplerVariant) -> f64 {
    SamplerVariant::ALL.iter().position(|x| *x == v).expect("variant in ALL") as f64
}

fn variant_from_tag(tag: f64) -> Result<SamplerVariant> {
    SamplerVariant::ALL
        .get(tag as usize)
        .copied()
        .filter(|_| tag.fract() == 0.0 && tag >= 0.0)
        .ok_or_else(|| Error::Config(format!("checkpoint: unknown variant tag {tag}")))
}

fn activation_tag(a: Activation) -> f64 {
    match a {
        Activation::Identity => 0.0,
        Activation::SiLU => 1.0,
        Activation::Tanh => 2.0,
        Activation::Softplus => 3.0,
    }
}

fn activation_from_tag(tag: f64) -> Result<Activation> {
    match tag as u64 {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::SiLU),
        2 => Ok(Activation::Tanh),
        3 => Ok(Activation::Softplus),
        _ => Err(Error::Config(format!("checkpoint: unknown activation tag {tag}"))),
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn array(&mut self, values: &[f64]) {
        self.buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn text(&mut self, s: &str) {
        let bytes = s.as_bytes();
        self.array(&[bytes.len() as f64]);
        let packed: Vec<f64> = bytes
            .chunks(8)
            .map(|chunk| {
                let mut word = [0u8; 8];
                word[..chunk.len()].copy_from_slice(chunk);
                f64::from_le_bytes(word)
            })
            .collect();
        self.array(&packed);
    }

    fn net(&mut self, net: &ParamBundle) {
        let mut structure = vec![net.layers.len() as f64];
        for layer in &net.layers {
            structure.push(layer.in_dim as f64);
            structure.push(layer.out_dim as f64);
            structure.push(activation_tag(layer.activation));
        }
        self.array(&structure);
        for layer in &net.layers {
            self.array(&layer.weights);
            self.array(&layer.bias);
        }
    }

    fn optimizer(&mut self, opt: &OptimizerState) {
        self.array(&[opt.step as f64, opt.beta1, opt.beta2, opt.eps]);
        for (m, v) in opt.m.iter().zip(&opt.v) {
            self.array(&m.weights);
            self.array(&m.bias);
            self.array(&v.weights);
            self.array(&v.bias);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn array(&mut self) -> Result<Vec<f64>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        let raw = self.take(len * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn text(&mut self) -> Result<String> {
        let header = self.array()?;
        if header.len() != 1 {
            return Err(Error::Config("checkpoint: malformed text header".into()));
        }
        let byte_len = header[0] as usize;
        let packed = self.array()?;
        if packed.len() != byte_len.div_ceil(8) {
            return Err(Error::Config("checkpoint: text length mismatch".into()));
        }
        let mut bytes = Vec::with_capacity(byte_len);
        for word in packed {
            bytes.extend_from_slice(&word.to_le_bytes());
        }
        bytes.truncate(byte_len);
        String::from_utf8(bytes).map_err(|_| Error::Config("checkpoint: config text is not UTF-8".into()))
    }

    fn index(&self, structure: &[f64], i: usize) -> Result<f64> {
        structure
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config("checkpoint: malformed net structure".into()))
    }

    fn net(&mut self) -> Result<ParamBundle> {
        let structure = self.array()?;
        let n_layers = self.index(&structure, 0)? as usize;
        if structure.len() != 1 + 3 * n_layers {
            return Err(Error::Config("checkpoint: malformed net structure".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let in_dim = self.index(&structure, 1 + 3 * l)? as usize;
            let out_dim = self.index(&structure, 2 + 3 * l)? as usize;
            let activation = activation_from_tag(self.index(&structure, 3 + 3 * l)?)?;
            let weights = self.array()?;
            let bias = self.array()?;
            if weights.len() != in_dim * out_dim || bias.len() != out_dim {
                return Err(Error::Config("checkpoint: layer size mismatch".into()));
            }
            layers.push(Layer { in_dim, out_dim, weights, bias, activation });
        }
        Ok(ParamBundle { layers })
    }

    fn optimizer(&mut self, net: &ParamBundle) -> Result<OptimizerState> {
        let scalars = self.array()?;
        if scalars.len() != 4 {
            return Err(Error::Config("checkpoint: malformed optimizer header".into()));
        }
        let mut opt = OptimizerState::new(net);
        opt.step = scalars[0] as u64;
        opt.beta1 = scalars[1];
        opt.beta2 = scalars[2];
        opt.eps = scalars[3];
        for l in 0..net.layers.len() {
            opt.m[l].weights = self.array()?;
            opt.m[l].bias = self.array()?;
            opt.v[l].weights = self.array()?;
            opt.v[l].bias = self.array()?;
            let layer = &net.layers[l];
            if opt.m[l].weights.len() != layer.weights.len()
                || opt.m[l].bias.len() != layer.bias.len()
                || opt.v[l].weights.len() != layer.weights.len()
                || opt.v[l].bias.len() != layer.bias.len()
            {
                return Err(Error::Config("checkpoint: optimizer size mismatch".into()));
            }
        }
        Ok(opt)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.text(&checkpoint.config_text);
    let policy = &checkpoint.policy;
    let clip = policy.clip;
    w.array(&[
        policy.velocity.action_dim as f64,
        policy.velocity.obs_dim as f64,
        policy.steps as f64,
        variant_tag(policy.variant),
        policy.lambda_max,
        policy.sigma_bound,
        clip.intermediate_clip,
        clip.final_clip,
        if clip.enabled { 1.0 } else { 0.0 },
        policy.heads.sigma.sigma_min,
        policy.heads.sigma.sigma_max,
    ]);
    w.net(&policy.velocity.net);
    w.net(&policy.heads.alpha.net);
    w.net(&policy.heads.sigma.net);
    w.net(&checkpoint.critic.net);
    w.array(&[
        checkpoint.schedule.hold_ratio,
        checkpoint.schedule.decay_target_mix,
        checkpoint.schedule.total_iters as f64,
        checkpoint.iter as f64,
    ]);
    w.array(&checkpoint.action_center);
    w.array(&checkpoint.action_scale);
    let (count, mean, m2) = checkpoint.reward_stat.state();
    w.array(&[count as f64, mean, m2]);
    w.optimizer(&checkpoint.actor_opt.velocity);
    w.optimizer(&checkpoint.actor_opt.alpha);
    w.optimizer(&checkpoint.actor_opt.sigma);
    w.optimizer(&checkpoint.critic_opt);
    std::fs::write(path, &w.buf).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("checkpoint '{}': {e}", path.display())))
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("checkpoint '{}': {e}", path.display())))
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let config_text = r.text()?;
    let scalars = r.array()?;
    if scalars.len() != 11 {
        return Err(Error::Config("checkpoint: malformed policy scalars".into()));
    }
    let action_dim = scalars[0] as usize;
    let obs_dim = scalars[1] as usize;
    let steps = scalars[2] as usize;
    let variant = variant_from_tag(scalars[3])?;
    let lambda_max = scalars[4];
    let sigma_bound = scalars[5];
    let clip = ClipPolicy::new(scalars[6], scalars[7], scalars[8] != 0.0)?;
    let (sigma_min, sigma_max) = (scalars[9], scalars[10]);
    let velocity_net = r.net()?;
    let alpha_net = r.net()?;
    let sigma_net = r.net()?;
    let critic_net = r.net()?;
    let schedule_raw = r.array()?;
    if schedule_raw.len() != 4 {
        return Err(Error::Config("checkpoint: malformed schedule record".into()));
    }
    let action_center = r.array()?;
    let action_scale = r.array()?;
    let stat_raw = r.array()?;
    if stat_raw.len() != 3 {
        return Err(Error::Config("checkpoint: malformed reward stat".into()));
    }

    let velocity = VelocityFieldParams { net: velocity_net, action_dim, obs_dim };
    let heads = ControlHeads {
        alpha: ScoreSchedulerParams { net: alpha_net },
        sigma: VariancePredictorParams { net: sigma_net, sigma_min, sigma_max },
    };
    let mut policy = FlowPolicy::new(velocity, heads, variant, clip, steps)?;
    policy.lambda_max = lambda_max;
    policy.sigma_bound = sigma_bound;
    let critic = CriticParams { net: critic_net };

    let actor_opt = ActorOptimizers {
        velocity: r.optimizer(&policy.velocity.net)?,
        alpha: r.optimizer(&policy.heads.alpha.net)?,
        sigma: r.optimizer(&policy.heads.sigma.net)?,
    };
    let critic_opt = r.optimizer(&critic.net)?;
    if r.pos != bytes.len() {
        return Err(Error::Config("checkpoint: trailing bytes".into()));
    }

    Ok(Checkpoint {
        policy,
        critic,
        actor_opt,
        critic_opt,
        schedule: NoiseBoundSchedule {
            hold_ratio: schedule_raw[0],
            decay_target_mix: schedule_raw[1],
            total_iters: schedule_raw[2] as usize,
        },
        iter: schedule_raw[3] as u64,
        action_center,
        action_scale,
        reward_stat: RunningStd::from_state(stat_raw[0] as u64, stat_raw[1], stat_raw[2]),
        config_text,
    })
}
