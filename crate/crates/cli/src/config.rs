//! Flat `key = value` run configuration.
//!
//! Every tunable lives under a dotted key. Values are resolved in the order
//! default, file, environment (seed only), command-line flags; later sources
//! win.

use std::fmt;
use std::str::FromStr;

use trajformer_core::infer::PresenceRule;
use trajformer_core::ingest::DomainConfig;
use trajformer_core::net::ModelConfig;
use trajformer_core::noise::NoiseConfig;
use trajformer_core::syngen::SynConfig;
use trajformer_core::train::TrainConfig;

pub const SEED_ENV: &str = "TRAJFORMER_SEED";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown key `{key}` (line {line}); valid keys:\n  {}", valid_keys().join("\n  "))]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub site: String,
    pub domain: DomainConfig,
    pub syn: SynConfig,
    pub syn_duration: f64,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub presence: PresenceRule,
    pub test_fraction: f64,
    pub eval_max_samples: usize,
    pub rollout_loops: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let domain = DomainConfig::default();
        let model = ModelConfig {
            max_slots: domain.max_slots,
            hist_len: domain.hist_len,
            pred_len: domain.pred_len,
            ..ModelConfig::desk()
        };
        RunConfig {
            seed: 7,
            site: "syn".into(),
            domain,
            syn: SynConfig::default(),
            syn_duration: 6000.0,
            noise: NoiseConfig::default(),
            model,
            train: TrainConfig::default(),
            finetune: TrainConfig {
                total_steps: 4000,
                warmup_steps: 2000,
                epochs: 15,
                ..TrainConfig::default()
            },
            presence: PresenceRule::default(),
            test_fraction: 0.1,
            eval_max_samples: 0,
            rollout_loops: 20,
        }
    }
}

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

macro_rules! fields {
    ($($key:literal => $($path:ident).+ : $ty:ty),* $(,)?) => {
        &[$(Field {
            key: $key,
            get: |c| c.$($path).+.to_string(),
            set: |c, v| {
                c.$($path).+ = parse::<$ty>(v)?;
                Ok(())
            },
        }),*]
    };
}

static FIELDS: &[Field] = fields! {
    "seed" => seed: u64,
    "site" => site: String,
    "domain.length" => domain.length: f64,
    "domain.width" => domain.width: f64,
    "domain.max_slots" => domain.max_slots: usize,
    "domain.hist_len" => domain.hist_len: usize,
    "domain.pred_len" => domain.pred_len: usize,
    "domain.stride" => domain.stride: usize,
    "domain.dt" => domain.dt: f64,
    "domain.len_cap" => domain.len_cap: f64,
    "domain.wid_cap" => domain.wid_cap: f64,
    "syn.lanes" => syn.lanes: usize,
    "syn.lane_width" => syn.lane_width: f64,
    "syn.road_len" => syn.road_len: f64,
    "syn.dt_raw" => syn.dt_raw: f64,
    "syn.v_free" => syn.v_free: f64,
    "syn.min_gap" => syn.min_gap: f64,
    "syn.reaction" => syn.reaction: f64,
    "syn.spawn_rate" => syn.spawn_rate: f64,
    "syn.lane_change_prob" => syn.lane_change_prob: f64,
    "syn.speed_spread" => syn.speed_spread: f64,
    "syn.truck_share" => syn.truck_share: f64,
    "syn.duration" => syn_duration: f64,
    "noise.mask_rate" => noise.mask_rate: f64,
    "noise.lambda" => noise.lambda: f64,
    "noise.p_mask" => noise.p_mask: f64,
    "noise.p_swap" => noise.p_swap: f64,
    "noise.swap_pairs" => noise.swap_pairs: usize,
    "model.d_model" => model.d_model: usize,
    "model.n_heads" => model.n_heads: usize,
    "model.n_enc" => model.n_enc: usize,
    "model.n_dec" => model.n_dec: usize,
    "model.d_ff" => model.d_ff: usize,
    "model.dropout" => model.dropout: f64,
    "model.paper_cross_wiring" => model.paper_cross_wiring: bool,
    "model.aux_head" => model.aux_head: bool,
    "train.base_lr" => train.base_lr: f64,
    "train.warmup_steps" => train.warmup_steps: u64,
    "train.total_steps" => train.total_steps: u64,
    "train.batch_size" => train.batch_size: usize,
    "train.epochs" => train.epochs: usize,
    "train.beta1" => train.beta1: f64,
    "train.beta2" => train.beta2: f64,
    "train.eps" => train.eps: f64,
    "train.clip_norm" => train.clip_norm: f64,
    "train.aux_denoise_loss" => train.aux_denoise_loss: bool,
    "finetune.base_lr" => finetune.base_lr: f64,
    "finetune.warmup_steps" => finetune.warmup_steps: u64,
    "finetune.total_steps" => finetune.total_steps: u64,
    "finetune.batch_size" => finetune.batch_size: usize,
    "finetune.epochs" => finetune.epochs: usize,
    "presence.eps_w" => presence.eps_w: f64,
    "presence.eps_h" => presence.eps_h: f64,
    "split.test_fraction" => test_fraction: f64,
    "eval.max_samples" => eval_max_samples: usize,
    "rollout.loops" => rollout_loops: usize,
};

pub fn valid_keys() -> Vec<&'static str> {
    FIELDS.iter().map(|f| f.key).collect()
}

fn field(key: &str) -> Option<&'static Field> {
    FIELDS.iter().find(|f| f.key == key)
}

/// Splits `key = value`; blank lines and `#` comments yield `None`.
fn split_line(line: &str, no: usize) -> Result<Option<(&str, &str)>, ConfigError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok(Some((k.trim(), v.trim()))),
        _ => Err(ConfigError::Syntax {
            line: no,
            text: line.to_string(),
        }),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        field(key).map(|f| (f.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let f = field(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.to_string(),
            line: 0,
        })?;
        (f.set)(self, value).map_err(|reason| ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        })
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(line, i + 1)? {
                if field(k).is_none() {
                    return Err(ConfigError::UnknownKey {
                        key: k.to_string(),
                        line: i + 1,
                    });
                }
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    /// Resolves the layered configuration.
    pub fn resolve(file: Option<&str>, env_seed: Option<&str>, flags: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        if let Some(seed) = env_seed {
            cfg.set("seed", seed)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies shared values into the per-module configs.
    pub fn sync(&mut self) {
        self.syn.seed = self.seed;
        self.noise.seed = self.seed;
        self.train.seed = self.seed;
        self.model.max_slots = self.domain.max_slots;
        self.model.hist_len = self.domain.hist_len;
        self.model.pred_len = self.domain.pred_len;
        let ft = self.finetune;
        self.finetune = TrainConfig {
            base_lr: ft.base_lr,
            warmup_steps: ft.warmup_steps,
            total_steps: ft.total_steps,
            batch_size: ft.batch_size,
            epochs: ft.epochs,
            ..self.train
        };
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: trajformer_core::Error| ConfigError::Invalid(e.to_string());
        self.domain.validate().map_err(wrap)?;
        self.syn.validate().map_err(wrap)?;
        self.noise.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.finetune.validate().map_err(wrap)?;
        self.presence.validate().map_err(wrap)?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ConfigError::Invalid("split.test_fraction must lie in [0, 1)".into()));
        }
        if !(self.syn_duration > 0.0) {
            return Err(ConfigError::Invalid("syn.duration must be > 0".into()));
        }
        if self.rollout_loops == 0 {
            return Err(ConfigError::Invalid("rollout.loops must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key in registry order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        FIELDS
            .iter()
            .map(|f| format!("{} = {}\n", f.key, (f.get)(self)))
            .collect()
    }
}

/// Parses a `--set key=value` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::resolve(None, None, &[]).unwrap();
        assert_eq!(c.model.max_slots, 10);
        assert_eq!(c.model.d_model, 64);
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("train.base_lr", "0.003").unwrap();
        c.set("model.aux_head", "true").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::resolve(Some("train.lr = 1"), None, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
        assert!(msg.contains("train.base_lr"));
    }

    #[test]
    fn syntax_and_value_errors() {
        assert!(matches!(
            RunConfig::resolve(Some("seed 3"), None, &[]),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            RunConfig::resolve(Some("seed = x"), None, &[]),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = RunConfig::resolve(Some("# hello\n\n  seed = 11  \n"), None, &[]).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.train.seed, 11);
    }

    #[test]
    fn env_seed_sits_between_file_and_flags() {
        let flags = vec![("seed".to_string(), "3".to_string())];
        assert_eq!(RunConfig::resolve(Some("seed = 1"), Some("2"), &[]).unwrap().seed, 2);
        assert_eq!(RunConfig::resolve(Some("seed = 1"), Some("2"), &flags).unwrap().seed, 3);
    }

    #[test]
    fn finetune_inherits_optimizer_settings() {
        let c = RunConfig::resolve(Some("train.beta2 = 0.95\nfinetune.base_lr = 0.002"), None, &[]).unwrap();
        assert_eq!(c.finetune.beta2, 0.95);
        assert_eq!(c.finetune.base_lr, 0.002);
    }
}
