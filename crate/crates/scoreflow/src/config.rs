//! Run configuration: a flat text format of dotted `key = value` lines.
//!
//! Every tunable in the system is addressable; unknown keys are rejected so
//! typos cannot silently fall back to defaults. `explicit` records which
//! keys a file actually set.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::env::PointMassConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::flow::PretrainConfig;
use crate::ppo::PPOConfig;
use crate::sampler::{ClipPolicy, SamplerVariant};
use crate::score::NoiseBoundSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSection {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_warmup: u64,
}

impl Default for FlowSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        FlowSection {
            hidden_dim: p.hidden_dim,
            hidden_layers: p.hidden_layers,
            steps: p.steps,
            batch_size: p.batch_size,
            base_lr: p.base_lr,
            min_lr: p.min_lr,
            lr_warmup: p.lr_warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSection {
    pub alpha_hidden_dim: usize,
    pub sigma_hidden_dim: usize,
    pub sigma_hidden_layers: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            alpha_hidden_dim: 16,
            sigma_hidden_dim: 32,
            sigma_hidden_layers: 1,
            sigma_min: 0.1,
            sigma_max: 0.24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub variant: SamplerVariant,
    pub steps: usize,
    pub lambda_max: f64,
    pub clip_intermediate: f64,
    pub clip_final: f64,
    pub clip_enabled: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            variant: SamplerVariant::ScoreFlow,
            steps: 4,
            lambda_max: 0.1,
            clip_intermediate: 3.0,
            clip_final: 1.0,
            clip_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub hold_ratio: f64,
    pub decay_target_mix: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { hold_ratio: 0.35, decay_target_mix: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSection {
    pub n_iters: usize,
    pub n_envs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub lr_min: f64,
    pub lr_warmup: usize,
    pub critic_warmup_iters: usize,
    pub critic_hidden_dim: usize,
    pub critic_hidden_layers: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            n_iters: f.n_iters,
            n_envs: f.n_envs,
            actor_lr: f.actor_lr,
            critic_lr: f.critic_lr,
            lr_min: f.lr_min,
            lr_warmup: f.lr_warmup,
            critic_warmup_iters: f.critic_warmup_iters,
            critic_hidden_dim: 64,
            critic_hidden_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSection {
    pub episodes: usize,
    /// When set, demos are loaded from this CSV instead of being scripted.
    pub path: Option<PathBuf>,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection { episodes: 16, path: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub flow: FlowSection,
    pub score: ScoreSection,
    pub sampler: SamplerSection,
    pub ppo: PPOConfig,
    pub env: PointMassConfig,
    pub schedule: ScheduleSection,
    pub finetune: FinetuneSection,
    pub demos: DemoSection,
    pub eval: EvalSection,
    /// Keys a config file set explicitly (everything else is a default).
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("out"),
            flow: FlowSection::default(),
            score: ScoreSection::default(),
            sampler: SamplerSection::default(),
            ppo: PPOConfig::default(),
            env: PointMassConfig::default(),
            schedule: ScheduleSection::default(),
            finetune: FinetuneSection::default(),
            demos: DemoSection::default(),
            eval: EvalSection::default(),
            explicit: BTreeSet::new(),
        }
    }
}

impl PartialEq for RunConfig {
    /// Equality of effective settings; provenance is metadata.
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.seeds == other.seeds
            && self.out_dir == other.out_dir
            && self.flow == other.flow
            && self.score == other.score
            && self.sampler == other.sampler
            && self.ppo == other.ppo
            && self.env == other.env
            && self.schedule == other.schedule
            && self.finetune == other.finetune
            && self.demos == other.demos
            && self.eval == other.eval
    }
}

fn parse_f64(key: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| Error::Config(format!("key '{key}': expected a number, got '{raw}'")))
}

fn parse_usize(key: &str, raw: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| Error::Config(format!("key '{key}': expected a non-negative integer, got '{raw}'")))
}

fn parse_u64(key: &str, raw: &str) -> Result<u64> {
    raw.parse::<u64>()
        .map_err(|_| Error::Config(format!("key '{key}': expected a non-negative integer, got '{raw}'")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected true or false, got '{raw}'"))),
    }
}

fn parse_seed_list(key: &str, raw: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>> =
        raw.split(',').map(|part| parse_u64(key, part.trim())).collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("key '{key}': needs at least one seed")));
    }
    Ok(seeds)
}

impl RunConfig {
    /// Parses the dotted key = value text format. Later lines override
    /// earlier ones; `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (line_no, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", line_no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            config.set(key, value)?;
            config.explicit.insert(key.to_string());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("config '{}': {e}", path.display())))
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "seeds" => self.seeds = parse_seed_list(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "flow.hidden_dim" => self.flow.hidden_dim = parse_usize(key, v)?,
            "flow.hidden_layers" => self.flow.hidden_layers = parse_usize(key, v)?,
            "flow.steps" => self.flow.steps = parse_usize(key, v)?,
            "flow.batch_size" => self.flow.batch_size = parse_usize(key, v)?,
            "flow.base_lr" => self.flow.base_lr = parse_f64(key, v)?,
            "flow.min_lr" => self.flow.min_lr = parse_f64(key, v)?,
            "flow.lr_warmup" => self.flow.lr_warmup = parse_u64(key, v)?,
            "score.alpha_hidden_dim" => self.score.alpha_hidden_dim = parse_usize(key, v)?,
            "score.sigma_hidden_dim" => self.score.sigma_hidden_dim = parse_usize(key, v)?,
            "score.sigma_hidden_layers" => self.score.sigma_hidden_layers = parse_usize(key, v)?,
            "score.sigma_min" => self.score.sigma_min = parse_f64(key, v)?,
            "score.sigma_max" => self.score.sigma_max = parse_f64(key, v)?,
            "sampler.variant" => self.sampler.variant = SamplerVariant::parse(v)?,
            "sampler.steps" => self.sampler.steps = parse_usize(key, v)?,
            "sampler.lambda_max" => self.sampler.lambda_max = parse_f64(key, v)?,
            "sampler.clip_intermediate" => self.sampler.clip_intermediate = parse_f64(key, v)?,
            "sampler.clip_final" => self.sampler.clip_final = parse_f64(key, v)?,
            "sampler.clip_enabled" => self.sampler.clip_enabled = parse_bool(key, v)?,
            "ppo.clip_eps" => self.ppo.clip_eps = parse_f64(key, v)?,
            "ppo.gamma" => self.ppo.gamma = parse_f64(key, v)?,
            "ppo.gae_lambda" => self.ppo.gae_lambda = parse_f64(key, v)?,
            "ppo.epochs" => self.ppo.epochs = parse_usize(key, v)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse_f64(key, v)?,
            "ppo.bc_coef" => self.ppo.bc_coef = parse_f64(key, v)?,
            "ppo.critic_coef" => self.ppo.critic_coef = parse_f64(key, v)?,
            "ppo.target_kl" => self.ppo.target_kl = parse_f64(key, v)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = parse_f64(key, v)?,
            "ppo.reward_norm" => self.ppo.reward_norm = parse_bool(key, v)?,
            "ppo.bc_batch_size" => self.ppo.bc_batch_size = parse_usize(key, v)?,
            "ppo.minibatch_size" => self.ppo.minibatch_size = parse_usize(key, v)?,
            "env.horizon" => self.env.horizon = parse_usize(key, v)?,
            "env.action_scale" => self.env.action_scale = parse_f64(key, v)?,
            "env.arena_bound" => self.env.arena_bound = parse_f64(key, v)?,
            "schedule.hold_ratio" => self.schedule.hold_ratio = parse_f64(key, v)?,
            "schedule.decay_target_mix" => self.schedule.decay_target_mix = parse_f64(key, v)?,
            "finetune.n_iters" => self.finetune.n_iters = parse_usize(key, v)?,
            "finetune.n_envs" => self.finetune.n_envs = parse_usize(key, v)?,
            "finetune.actor_lr" => self.finetune.actor_lr = parse_f64(key, v)?,
            "finetune.critic_lr" => self.finetune.critic_lr = parse_f64(key, v)?,
            "finetune.lr_min" => self.finetune.lr_min = parse_f64(key, v)?,
            "finetune.lr_warmup" => self.finetune.lr_warmup = parse_usize(key, v)?,
            "finetune.critic_warmup_iters" => {
                self.finetune.critic_warmup_iters = parse_usize(key, v)?
            }
            "finetune.critic_hidden_dim" => self.finetune.critic_hidden_dim = parse_usize(key, v)?,
            "finetune.critic_hidden_layers" => {
                self.finetune.critic_hidden_layers = parse_usize(key, v)?
            }
            "demos.episodes" => self.demos.episodes = parse_usize(key, v)?,
            "demos.path" => {
                self.demos.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "eval.episodes" => self.eval.episodes = parse_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score.sigma_min > 0.0 && self.score.sigma_min < self.score.sigma_max) {
            return Err(Error::Config(format!(
                "score.sigma_min ({}) must be positive and below score.sigma_max ({})",
                self.score.sigma_min, self.score.sigma_max
            )));
        }
        self.ppo.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if !(self.sampler.lambda_max >= 0.0) {
            return Err(Error::Config("sampler.lambda_max must be non-negative".into()));
        }
        ClipPolicy::new(
            self.sampler.clip_intermediate,
            self.sampler.clip_final,
            self.sampler.clip_enabled,
        )?;
        if self.env.horizon == 0 {
            return Err(Error::Config("env.horizon must be at least 1".into()));
        }
        if !(self.env.action_scale > 0.0 && self.env.arena_bound > 0.0) {
            return Err(Error::Config("env.action_scale and env.arena_bound must be positive".into()));
        }
        for (key, x) in [
            ("schedule.hold_ratio", self.schedule.hold_ratio),
            ("schedule.decay_target_mix", self.schedule.decay_target_mix),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Config(format!("{key} must lie in [0, 1], got {x}")));
            }
        }
        if self.finetune.n_envs == 0 {
            return Err(Error::Config("finetune.n_envs must be at least 1".into()));
        }
        for (key, lr) in [
            ("flow.base_lr", self.flow.base_lr),
            ("flow.min_lr", self.flow.min_lr),
            ("finetune.actor_lr", self.finetune.actor_lr),
            ("finetune.critic_lr", self.finetune.critic_lr),
            ("finetune.lr_min", self.finetune.lr_min),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{key} must be a positive number, got {lr}")));
            }
        }
        if self.flow.hidden_dim == 0
            || self.score.alpha_hidden_dim == 0
            || self.score.sigma_hidden_dim == 0
            || self.finetune.critic_hidden_dim == 0
        {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        if self.flow.batch_size == 0 {
            return Err(Error::Config("flow.batch_size must be at least 1".into()));
        }
        if self.demos.episodes == 0 && self.demos.path.is_none() {
            return Err(Error::Config(
                "demos.episodes must be at least 1 when no demos.path is given".into(),
            ));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }

    /// Canonical full rendering: every key, one per line, in a fixed order.
    /// `parse(to_text(c))` reproduces `c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds =
            self.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "seeds = {seeds}");
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "flow.hidden_dim = {}", self.flow.hidden_dim);
        let _ = writeln!(s, "flow.hidden_layers = {}", self.flow.hidden_layers);
        let _ = writeln!(s, "flow.steps = {}", self.flow.steps);
        let _ = writeln!(s, "flow.batch_size = {}", self.flow.batch_size);
        let _ = writeln!(s, "flow.base_lr = {}", self.flow.base_lr);
        let _ = writeln!(s, "flow.min_lr = {}", self.flow.min_lr);
        let _ = writeln!(s, "flow.lr_warmup = {}", self.flow.lr_warmup);
        let _ = writeln!(s, "score.alpha_hidden_dim = {}", self.score.alpha_hidden_dim);
        let _ = writeln!(s, "score.sigma_hidden_dim = {}", self.score.sigma_hidden_dim);
        let _ = writeln!(s, "score.sigma_hidden_layers = {}", self.score.sigma_hidden_layers);
        let _ = writeln!(s, "score.sigma_min = {}", self.score.sigma_min);
        let _ = writeln!(s, "score.sigma_max = {}", self.score.sigma_max);
        let _ = writeln!(s, "sampler.variant = {}", self.sampler.variant.tag());
        let _ = writeln!(s, "sampler.steps = {}", self.sampler.steps);
        let _ = writeln!(s, "sampler.lambda_max = {}", self.sampler.lambda_max);
        let _ = writeln!(s, "sampler.clip_intermediate = {}", self.sampler.clip_intermediate);
        let _ = writeln!(s, "sampler.clip_final = {}", self.sampler.clip_final);
        let _ = writeln!(s, "sampler.clip_enabled = {}", self.sampler.clip_enabled);
        let _ = writeln!(s, "ppo.clip_eps = {}", self.ppo.clip_eps);
        let _ = writeln!(s, "ppo.gamma = {}", self.ppo.gamma);
        let _ = writeln!(s, "ppo.gae_lambda = {}", self.ppo.gae_lambda);
        let _ = writeln!(s, "ppo.epochs = {}", self.ppo.epochs);
        let _ = writeln!(s, "ppo.entropy_coef = {}", self.ppo.entropy_coef);
        let _ = writeln!(s, "ppo.bc_coef = {}", self.ppo.bc_coef);
        let _ = writeln!(s, "ppo.critic_coef = {}", self.ppo.critic_coef);
        let _ = writeln!(s, "ppo.target_kl = {}", self.ppo.target_kl);
        let _ = writeln!(s, "ppo.max_grad_norm = {}", self.ppo.max_grad_norm);
        let _ = writeln!(s, "ppo.reward_norm = {}", self.ppo.reward_norm);
        let _ = writeln!(s, "ppo.bc_batch_size = {}", self.ppo.bc_batch_size);
        let _ = writeln!(s, "ppo.minibatch_size = {}", self.ppo.minibatch_size);
        let _ = writeln!(s, "env.horizon = {}", self.env.horizon);
        let _ = writeln!(s, "env.action_scale = {}", self.env.action_scale);
        let _ = writeln!(s, "env.arena_bound = {}", self.env.arena_bound);
        let _ = writeln!(s, "schedule.hold_ratio = {}", self.schedule.hold_ratio);
        let _ = writeln!(s, "schedule.decay_target_mix = {}", self.schedule.decay_target_mix);
        let _ = writeln!(s, "finetune.n_iters = {}", self.finetune.n_iters);
        let _ = writeln!(s, "finetune.n_envs = {}", self.finetune.n_envs);
        let _ = writeln!(s, "finetune.actor_lr = {}", self.finetune.actor_lr);
        let _ = writeln!(s, "finetune.critic_lr = {}", self.finetune.critic_lr);
        let _ = writeln!(s, "finetune.lr_min = {}", self.finetune.lr_min);
        let _ = writeln!(s, "finetune.lr_warmup = {}", self.finetune.lr_warmup);
        let _ = writeln!(s, "finetune.critic_warmup_iters = {}", self.finetune.critic_warmup_iters);
        let _ = writeln!(s, "finetune.critic_hidden_dim = {}", self.finetune.critic_hidden_dim);
        let _ = writeln!(s, "finetune.critic_hidden_layers = {}", self.finetune.critic_hidden_layers);
        let _ = writeln!(s, "demos.episodes = {}", self.demos.episodes);
        let _ = writeln!(
            s,
            "demos.path = {}",
            self.demos.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "eval.episodes = {}", self.eval.episodes);
        s
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.flow.steps,
            batch_size: self.flow.batch_size,
            hidden_dim: self.flow.hidden_dim,
            hidden_layers: self.flow.hidden_layers,
            base_lr: self.flow.base_lr,
            min_lr: self.flow.min_lr,
            lr_cycle_steps: self.flow.steps.max(1) as u64,
            lr_warmup_steps: self.flow.lr_warmup,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            n_iters: self.finetune.n_iters,
            n_envs: self.finetune.n_envs,
            env: self.env,
            ppo: self.ppo.clone(),
            schedule: NoiseBoundSchedule {
                hold_ratio: self.schedule.hold_ratio,
                decay_target_mix: self.schedule.decay_target_mix,
                total_iters: self.finetune.n_iters.max(1),
            },
            actor_lr: self.finetune.actor_lr,
            critic_lr: self.finetune.critic_lr,
            lr_min: self.finetune.lr_min,
            lr_warmup: self.finetune.lr_warmup,
            critic_warmup_iters: self.finetune.critic_warmup_iters,
        }
    }

    pub fn clip_policy(&self) -> Result<ClipPolicy> {
        ClipPolicy::new(
            self.sampler.clip_intermediate,
            self.sampler.clip_final,
            self.sampler.clip_enabled,
        )
    }
}
