//! Every tunable knob in one flat, `key=value` addressable struct.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AdamWConfig, FocalParams};
use crate::proposal::pair_feature_width;
use crate::scene::GeneratorConfig;
use crate::train::{ModelSetup, ScoreStrategy, TrainConfig, Variant};
use crate::transformer::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("{path}:{line}: expected `key=value`")]
    Syntax { path: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,

    pub scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub generator: GeneratorConfig,

    pub variant: Variant,
    pub top_k: usize,
    pub train_pairs: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_dep: usize,
    pub d_lay: usize,
    pub d_ling: usize,
    pub ffn_hidden: usize,
    pub ipn_hidden: usize,
    pub pre_norm: bool,
    pub prior: f64,

    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub max_neg_ratio: f64,
    pub w_proposal: f64,
    pub w_cls: f64,
    pub iou_thr: f64,
    pub score_floor: f64,
    pub scoring: ScoreStrategy,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            threads: 1,
            scenes: 500,
            val_scenes: 100,
            test_scenes: 100,
            generator: GeneratorConfig::default(),
            variant: Variant::Full,
            top_k: 32,
            train_pairs: 32,
            layers: 6,
            d_model: 128,
            heads: 1,
            d_dep: 32,
            d_lay: 32,
            d_ling: 300,
            ffn_hidden: 256,
            ipn_hidden: 128,
            pre_norm: false,
            prior: 0.1,
            gamma: train.focal.gamma,
            alpha: train.focal.alpha,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            batch: train.batch,
            epochs: train.epochs,
            max_neg_ratio: train.max_neg_ratio,
            w_proposal: train.w_proposal,
            w_cls: train.w_cls,
            iou_thr: train.iou_thr,
            score_floor: train.score_floor,
            scoring: train.scoring,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            msg: "expected a boolean".into(),
        }),
    }
}

macro_rules! knobs {
    ($self:ident, $key:ident, $value:ident; $($name:literal => $field:expr, $kind:ident;)*) => {
        fn set_inner(&mut $self, $key: &str, $value: &str) -> Result<(), ConfigError> {
            match $key {
                $($name => { $field = knobs!(@parse $kind, $key, $value); })*
                _ => return Err(ConfigError::UnknownKey($key.to_string())),
            }
            Ok(())
        }

        fn entries_inner(&$self) -> Vec<(&'static str, String)> {
            vec![$(($name, knobs!(@show $kind, $field)),)*]
        }
    };
    (@parse bool, $key:ident, $value:ident) => { parse_bool($key, $value)? };
    (@parse val, $key:ident, $value:ident) => { parse($key, $value)? };
    (@show bool, $field:expr) => { $field.to_string() };
    (@show val, $field:expr) => { $field.to_string() };
}

impl RunConfig {
    knobs! { self, key, value;
        "seed" => self.seed, val;
        "threads" => self.threads, val;
        "scenes" => self.scenes, val;
        "val_scenes" => self.val_scenes, val;
        "test_scenes" => self.test_scenes, val;
        "min_instances" => self.generator.min_instances, val;
        "max_instances" => self.generator.max_instances, val;
        "min_humans" => self.generator.min_humans, val;
        "max_humans" => self.generator.max_humans, val;
        "num_object_classes" => self.generator.num_object_classes, val;
        "num_interactions" => self.generator.num_interactions, val;
        "grid_h" => self.generator.grid_h, val;
        "grid_w" => self.generator.grid_w, val;
        "d_app" => self.generator.d_app, val;
        "d_grid" => self.generator.d_grid, val;
        "app_noise" => self.generator.app_noise, val;
        "state_strength" => self.generator.state_strength, val;
        "grid_noise" => self.generator.grid_noise, val;
        "jitter" => self.generator.jitter, val;
        "near_dist" => self.generator.near_dist, val;
        "hold_overlap" => self.generator.hold_overlap, val;
        "p_active" => self.generator.p_active, val;
        "p_near" => self.generator.p_near, val;
        "p_inside" => self.generator.p_inside, val;
        "p_marker" => self.generator.p_marker, val;
        "p_stray_marker" => self.generator.p_stray_marker, val;
        "world_seed" => self.generator.world_seed, val;
        "positive_rate_min" => self.generator.positive_rate_band.0, val;
        "positive_rate_max" => self.generator.positive_rate_band.1, val;
        "context_margin" => self.generator.context_margin, val;
        "variant" => self.variant, val;
        "top_k" => self.top_k, val;
        "train_pairs" => self.train_pairs, val;
        "layers" => self.layers, val;
        "d_model" => self.d_model, val;
        "heads" => self.heads, val;
        "d_dep" => self.d_dep, val;
        "d_lay" => self.d_lay, val;
        "d_ling" => self.d_ling, val;
        "ffn_hidden" => self.ffn_hidden, val;
        "ipn_hidden" => self.ipn_hidden, val;
        "pre_norm" => self.pre_norm, bool;
        "prior" => self.prior, val;
        "gamma" => self.gamma, val;
        "alpha" => self.alpha, val;
        "lr" => self.lr, val;
        "beta1" => self.beta1, val;
        "beta2" => self.beta2, val;
        "adam_eps" => self.adam_eps, val;
        "weight_decay" => self.weight_decay, val;
        "batch" => self.batch, val;
        "epochs" => self.epochs, val;
        "max_neg_ratio" => self.max_neg_ratio, val;
        "w_proposal" => self.w_proposal, val;
        "w_cls" => self.w_cls, val;
        "iou_thr" => self.iou_thr, val;
        "score_floor" => self.score_floor, val;
        "scoring" => self.scoring, val;
    }

    /// Sets one knob. `k` is an alias setting both `top_k` and `train_pairs`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim();
        if key == "k" {
            self.set_inner("top_k", value)?;
            return self.set_inner("train_pairs", value);
        }
        self.set_inner(&key.replace('-', "_"), value)
    }

    /// `(key, value)` for every knob, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        self.entries_inner()
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
        let mut out = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_string(),
                line: k + 1,
            })?;
            out.insert(key.trim().to_string(), (k + 1, value.trim().to_string()));
        }
        Ok(out)
    }

    /// Applies a config file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<Vec<String>, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let entries = Self::parse_kv(&text, &path.display().to_string())?;
        let mut keys = Vec::new();
        for (key, (_, value)) in entries {
            self.set(&key, &value)?;
            keys.push(key);
        }
        Ok(keys)
    }

    pub fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            top_k: self.top_k,
            train_pairs: self.train_pairs,
            max_neg_ratio: self.max_neg_ratio,
            focal: FocalParams {
                gamma: self.gamma,
                alpha: self.alpha,
            },
            adam: self.adam(),
            batch: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            w_proposal: self.w_proposal,
            w_cls: self.w_cls,
            iou_thr: self.iou_thr,
            score_floor: self.score_floor,
            scoring: self.scoring,
        }
    }

    pub fn model_setup(&self) -> ModelSetup {
        let g = &self.generator;
        ModelSetup {
            num_object_classes: g.num_object_classes,
            d_app: g.d_app,
            d_ling: self.d_ling,
            ipn_hidden: self.ipn_hidden,
            grid_h: g.grid_h,
            grid_w: g.grid_w,
            model: ModelConfig {
                pair_width: pair_feature_width(g.d_app, self.d_ling),
                d_grid: g.d_grid,
                d_model: self.d_model,
                heads: self.heads,
                d_dep: self.d_dep,
                d_lay: self.d_lay,
                ffn_hidden: self.ffn_hidden,
                num_layers: self.layers,
                num_classes: g.num_interactions,
                pre_norm: self.pre_norm,
                prior: self.prior,
            },
        }
    }

    /// Generator settings with `num_scenes` set for one split.
    pub fn split_generator(&self, num_scenes: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_scenes,
            ..self.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.top_k < 1 {
            return bad("top_k must be at least 1".into());
        }
        if self.train_pairs < 1 {
            return bad("train_pairs must be at least 1".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive".into());
        }
        if self.threads < 1 {
            return bad("threads must be at least 1".into());
        }
        self.generator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_setup().validate().map_err(ConfigError::Invalid)?;
        self.train_config().validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}
