//! Flat `key = value` run configuration.
//!
//! One field per line, `#` starts a comment line, unknown keys are errors.
//! Defaults follow the full-scale experiment: radius-10 maze, d = 128
//! network, 3,000 episodes over sequence lengths 5, 45, and 75, five runs
//! each.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::env::{EnvConfig, LandmarkArc};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Everything a training or evaluation invocation needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // Environment.
    pub maze_radius: f64,
    pub platform_radius: f64,
    pub platform_spawn_radius: f64,
    pub landmark_start: f64,
    pub fov: f64,
    pub num_rays: usize,
    pub forward_step: f64,
    pub turn_step: f64,
    pub max_steps: u32,
    pub reward_platform: f64,
    pub reward_collision: f64,
    pub reward_step: f64,
    // Model.
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    /// Defaults to 1 / (2 * maze_radius) unless set explicitly.
    pub distance_scale: Option<f64>,
    // Training.
    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync_interval: u64,
    pub warmup_transitions: usize,
    pub updates_per_env_step: u32,
    pub episodes: usize,
    pub replay_capacity: usize,
    pub clip_global_norm: Option<f64>,
    // Harness.
    pub seq_lens: Vec<usize>,
    pub runs: usize,
    pub eval_episodes: usize,
    pub ema_alpha: f64,
    pub oscillation_window: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            maze_radius: env.maze_radius,
            platform_radius: env.platform_radius,
            platform_spawn_radius: env.platform_spawn_radius,
            landmark_start: env.landmark_arc.start,
            fov: env.fov,
            num_rays: env.num_rays,
            forward_step: env.forward_step,
            turn_step: env.turn_step,
            max_steps: env.max_steps,
            reward_platform: env.reward_platform,
            reward_collision: env.reward_collision,
            reward_step: env.reward_step,
            embed_dim: model.embed_dim,
            num_layers: model.num_layers,
            num_heads: model.num_heads,
            ffn_dim: model.ffn_dim,
            dropout_p: model.dropout_p,
            distance_scale: None,
            batch_size: train.batch_size,
            gamma: train.gamma,
            lr: train.lr,
            eps_start: train.eps_start,
            eps_end: train.eps_end,
            eps_decay_steps: train.eps_decay_steps,
            target_sync_interval: train.target_sync_interval,
            warmup_transitions: train.warmup_transitions,
            updates_per_env_step: train.updates_per_env_step,
            episodes: train.episodes,
            replay_capacity: train.replay_capacity,
            clip_global_norm: None,
            seq_lens: vec![5, 45, 75],
            runs: 5,
            eval_episodes: 100,
            ema_alpha: 0.05,
            oscillation_window: 20,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            maze_radius: self.maze_radius,
            platform_radius: self.platform_radius,
            platform_spawn_radius: self.platform_spawn_radius,
            landmark_arc: LandmarkArc {
                start: self.landmark_start,
                len: TAU / 8.0,
            },
            fov: self.fov,
            num_rays: self.num_rays,
            forward_step: self.forward_step,
            turn_step: self.turn_step,
            max_steps: self.max_steps,
            reward_platform: self.reward_platform,
            reward_collision: self.reward_collision,
            reward_step: self.reward_step,
        }
    }

    pub fn model_config(&self, seq_len: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            num_actions: 4,
            max_seq_len: seq_len,
            dropout_p: self.dropout_p,
            obs_dim: 2 * self.num_rays,
            distance_scale: self
                .distance_scale
                .unwrap_or(1.0 / (2.0 * self.maze_radius)),
        }
    }

    pub fn train_config(&self, seq_len: usize, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            seq_len,
            batch_size: self.batch_size,
            gamma: self.gamma,
            lr: self.lr,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_decay_steps: self.eps_decay_steps,
            target_sync_interval: self.target_sync_interval,
            warmup_transitions: self.warmup_transitions,
            updates_per_env_step: self.updates_per_env_step,
            episodes: self.episodes,
            replay_capacity: self.replay_capacity,
            rng_seed,
            clip_global_norm: self.clip_global_norm,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env_config().map_err_key("environment")?;
        if self.seq_lens.is_empty() {
            return Err(key_err("seq_len", "at least one sequence length required"));
        }
        for &n in &self.seq_lens {
            self.model_config(n)
                .validate()
                .map_err(|e| key_err("model", &e.to_string()))?;
            self.train_config(n, 0)
                .validate()
                .map_err(|e| key_err("training", &e.to_string()))?;
        }
        if self.runs == 0 {
            return Err(key_err("runs", "must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(key_err("eval_episodes", "must be positive"));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(key_err("ema_alpha", "must lie in (0, 1]"));
        }
        if self.oscillation_window < 2 {
            return Err(key_err("oscillation_window", "must be at least 2"));
        }
        Ok(())
    }
}

trait MapErrKey {
    fn map_err_key(self, key: &str) -> Result<(), HarnessError>;
}

impl MapErrKey for EnvConfig {
    fn map_err_key(self, key: &str) -> Result<(), HarnessError> {
        self.validate().map_err(|e| key_err(key, &e.to_string()))
    }
}

fn key_err(key: &str, message: &str) -> HarnessError {
    HarnessError::Config {
        key: Some(key.to_string()),
        message: message.to_string(),
    }
}

pub fn parse_config_file(path: &Path) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Parse `key = value` lines over the defaults. Unknown keys are errors that
/// name the key.
pub fn parse_config_str(text: &str) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Config {
                key: None,
                message: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
            });
        };
        apply_field(&mut cfg, key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), HarnessError> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
        value.parse().map_err(|_| key_err(key, &format!("cannot parse `{value}`")))
    }
    match key {
        "maze_radius" => cfg.maze_radius = parse(key, value)?,
        "platform_radius" => cfg.platform_radius = parse(key, value)?,
        "platform_spawn_radius" => cfg.platform_spawn_radius = parse(key, value)?,
        "landmark_start" => cfg.landmark_start = parse(key, value)?,
        "fov" => cfg.fov = parse(key, value)?,
        "num_rays" => cfg.num_rays = parse(key, value)?,
        "forward_step" => cfg.forward_step = parse(key, value)?,
        "turn_step" => cfg.turn_step = parse(key, value)?,
        "max_steps" => cfg.max_steps = parse(key, value)?,
        "reward_platform" => cfg.reward_platform = parse(key, value)?,
        "reward_collision" => cfg.reward_collision = parse(key, value)?,
        "reward_step" => cfg.reward_step = parse(key, value)?,
        "embed_dim" => cfg.embed_dim = parse(key, value)?,
        "num_layers" => cfg.num_layers = parse(key, value)?,
        "num_heads" => cfg.num_heads = parse(key, value)?,
        "ffn_dim" => cfg.ffn_dim = parse(key, value)?,
        "dropout_p" => cfg.dropout_p = parse(key, value)?,
        "distance_scale" => cfg.distance_scale = Some(parse(key, value)?),
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "gamma" => cfg.gamma = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "eps_start" => cfg.eps_start = parse(key, value)?,
        "eps_end" => cfg.eps_end = parse(key, value)?,
        "eps_decay_steps" => cfg.eps_decay_steps = parse(key, value)?,
        "target_sync_interval" => cfg.target_sync_interval = parse(key, value)?,
        "warmup_transitions" => cfg.warmup_transitions = parse(key, value)?,
        "updates_per_env_step" => cfg.updates_per_env_step = parse(key, value)?,
        "episodes" => cfg.episodes = parse(key, value)?,
        "replay_capacity" => cfg.replay_capacity = parse(key, value)?,
        "clip_global_norm" => cfg.clip_global_norm = Some(parse(key, value)?),
        "seq_len" => {
            cfg.seq_lens = value
                .split(',')
                .map(|s| parse::<usize>(key, s.trim()))
                .collect::<Result<_, _>>()?;
        }
        "runs" => cfg.runs = parse(key, value)?,
        "eval_episodes" => cfg.eval_episodes = parse(key, value)?,
        "ema_alpha" => cfg.ema_alpha = parse(key, value)?,
        "oscillation_window" => cfg.oscillation_window = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "out_dir" => cfg.out_dir = PathBuf::from(value),
        unknown => {
            return Err(HarnessError::Config {
                key: Some(unknown.to_string()),
                message: "unknown config key".to_string(),
            })
        }
    }
    Ok(())
}
