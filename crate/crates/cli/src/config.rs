//! Flat `key = value` run configuration with dotted keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use mecdiff::diffusion::PretrainConfig;
use mecdiff::{DenoiserConfig, Error, NoiseSchedule, RLConfig, Result, SampleConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_drop_prob: f64,
    pub ema_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub normalize: bool,
    pub clip_sigmas: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub k_mc: usize,
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub rl: RLConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig { hidden_dims: vec![64, 64], time_embed_dim: 32, cond_drop_prob: 0.1, ema_decay: 0.999 },
            schedule: ScheduleConfig { t_max: 1000, beta_min: 1e-4, beta_max: 0.02 },
            pretrain: PretrainConfig::default(),
            rl: RLConfig::default(),
            sample: SampleConfig { n_steps: 50, guidance: 7.0, eta: 0.0, record_trajectory: false, seed: 0 },
            data: DataConfig { normalize: true, clip_sigmas: 5.0 },
            eval: EvalConfig { k: 5, k_mc: 100 },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let rl = &mut self.rl;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.hidden_dims" => self.model.hidden_dims = list(key, v)?,
            "model.time_embed_dim" => self.model.time_embed_dim = parse(key, v)?,
            "model.cond_drop_prob" => self.model.cond_drop_prob = parse(key, v)?,
            "model.ema_decay" => self.model.ema_decay = parse(key, v)?,
            "schedule.t_max" => self.schedule.t_max = parse(key, v)?,
            "schedule.beta_min" => self.schedule.beta_min = parse(key, v)?,
            "schedule.beta_max" => self.schedule.beta_max = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.grad_clip" => self.pretrain.grad_clip = parse(key, v)?,
            "rl.lambda_x" => rl.lambda_x = parse(key, v)?,
            "rl.lambda_y" => rl.lambda_y = parse(key, v)?,
            "rl.k_reward" => rl.k_reward = parse(key, v)?,
            "rl.policy_updates" => rl.policy_updates = parse(key, v)?,
            "rl.ratio_clip" => rl.ratio_clip = parse(key, v)?,
            "rl.grad_accum" => rl.grad_accum = parse(key, v)?,
            "rl.grad_clip" => rl.grad_clip = parse(key, v)?,
            "rl.guidance_train" => rl.guidance_train = parse(key, v)?,
            "rl.buffer_capacity" => rl.buffer_capacity = parse(key, v)?,
            "rl.total_steps" => rl.total_steps = parse(key, v)?,
            "rl.batch_size" => rl.batch_size = parse(key, v)?,
            "rl.lr" => rl.lr = parse(key, v)?,
            "rl.consistency_lr" => rl.consistency_lr = parse(key, v)?,
            "rl.consistency_updates" => rl.consistency_updates = parse(key, v)?,
            "rl.cond_drop_prob" => rl.cond_drop_prob = parse(key, v)?,
            "rl.ddim_steps" => rl.ddim_steps = parse(key, v)?,
            "rl.eta_train" => rl.eta_train = parse(key, v)?,
            "rl.baseline" => rl.baseline = parse(key, v)?,
            "rl.baseline_momentum" => rl.baseline_momentum = parse(key, v)?,
            "rl.nll_weighting" => rl.nll_weighting = parse(key, v)?,
            "rl.common_reward_noise" => rl.common_reward_noise = parse(key, v)?,
            "sample.n_steps" => self.sample.n_steps = parse(key, v)?,
            "sample.guidance" => self.sample.guidance = parse(key, v)?,
            "sample.eta" => self.sample.eta = parse(key, v)?,
            "data.normalize" => self.data.normalize = parse(key, v)?,
            "data.clip_sigmas" => self.data.clip_sigmas = parse(key, v)?,
            "eval.k" => self.eval.k = parse(key, v)?,
            "eval.k_mc" => self.eval.k_mc = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let rl = &self.rl;
        let baseline = match rl.baseline {
            mecdiff::mec::BaselineMode::None => "none",
            mecdiff::mec::BaselineMode::RunningMean => "running_mean",
            mecdiff::mec::BaselineMode::BatchMean => "batch_mean",
        };
        let weighting = match rl.nll_weighting {
            mecdiff::NllWeighting::Vlb => "vlb",
            mecdiff::NllWeighting::Uniform => "uniform",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("model.hidden_dims", join(&self.model.hidden_dims)),
            ("model.time_embed_dim", self.model.time_embed_dim.to_string()),
            ("model.cond_drop_prob", self.model.cond_drop_prob.to_string()),
            ("model.ema_decay", self.model.ema_decay.to_string()),
            ("schedule.t_max", self.schedule.t_max.to_string()),
            ("schedule.beta_min", self.schedule.beta_min.to_string()),
            ("schedule.beta_max", self.schedule.beta_max.to_string()),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.grad_clip", self.pretrain.grad_clip.to_string()),
            ("rl.lambda_x", rl.lambda_x.to_string()),
            ("rl.lambda_y", rl.lambda_y.to_string()),
            ("rl.k_reward", rl.k_reward.to_string()),
            ("rl.policy_updates", rl.policy_updates.to_string()),
            ("rl.ratio_clip", rl.ratio_clip.to_string()),
            ("rl.grad_accum", rl.grad_accum.to_string()),
            ("rl.grad_clip", rl.grad_clip.to_string()),
            ("rl.guidance_train", rl.guidance_train.to_string()),
            ("rl.buffer_capacity", rl.buffer_capacity.to_string()),
            ("rl.total_steps", rl.total_steps.to_string()),
            ("rl.batch_size", rl.batch_size.to_string()),
            ("rl.lr", rl.lr.to_string()),
            ("rl.consistency_lr", rl.consistency_lr.to_string()),
            ("rl.consistency_updates", rl.consistency_updates.to_string()),
            ("rl.cond_drop_prob", rl.cond_drop_prob.to_string()),
            ("rl.ddim_steps", rl.ddim_steps.to_string()),
            ("rl.eta_train", rl.eta_train.to_string()),
            ("rl.baseline", baseline.to_string()),
            ("rl.baseline_momentum", rl.baseline_momentum.to_string()),
            ("rl.nll_weighting", weighting.to_string()),
            ("rl.common_reward_noise", rl.common_reward_noise.to_string()),
            ("sample.n_steps", self.sample.n_steps.to_string()),
            ("sample.guidance", self.sample.guidance.to_string()),
            ("sample.eta", self.sample.eta.to_string()),
            ("data.normalize", self.data.normalize.to_string()),
            ("data.clip_sigmas", self.data.clip_sigmas.to_string()),
            ("eval.k", self.eval.k.to_string()),
            ("eval.k_mc", self.eval.k_mc.to_string()),
        ]
    }

    /// `key = value` text that [`RunConfig::apply_text`] reads back unchanged.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.rl.validate()?;
        self.schedule()?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) || !(self.pretrain.grad_clip > 0.0) {
            return Err(Error::Config("pretrain batch_size, lr and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.ema_decay) {
            return Err(Error::Config("model.ema_decay must lie in [0, 1)".into()));
        }
        self.denoiser(1).validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.t_max, self.schedule.beta_min, self.schedule.beta_max)
    }

    pub fn denoiser(&self, data_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            data_dim,
            cond_dim: None,
            hidden_dims: self.model.hidden_dims.clone(),
            time_embed_dim: self.model.time_embed_dim,
            cond_drop_prob: self.model.cond_drop_prob,
        }
    }

    /// Help text listing every key and its default.
    pub fn keys_help() -> String {
        let mut s = String::from("Configuration keys (file: one `key = value` per line, `#` comments):\n");
        for (k, v) in Self::default().entries() {
            s.push_str(&format!("  {k:<26} default {v}\n"));
        }
        s
    }
}
