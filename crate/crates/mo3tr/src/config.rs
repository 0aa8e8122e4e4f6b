//! Flat `key=value` run configuration with dotted sections.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset=desk
//! seed=7
//! model.d_z=32
//! train.stage2_epochs=40
//! ```
//!
//! `preset` is applied before every other key wherever it appears. Unknown
//! keys and unparsable values are schema errors, raised before any work.

use crate::error::{CliError, Result};
use mo3tr_core::model::{FilterMode, ModelConfig, QueryMode};
use mo3tr_core::training::{TrackletRefresh, TrainingConfig};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Root seed; component seeds are derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainingConfig,
    /// `None` means the model's full temporal window.
    pub history_cap: Option<usize>,
    pub filter: Option<FilterMode>,
    /// `None` means the filter's default threshold.
    pub filter_threshold: Option<f64>,
    pub iou_threshold: f64,
    pub ablate_caps: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "model.d_z",
    "model.heads",
    "model.ffn_hidden",
    "model.temporal_layers",
    "model.encoder_layers",
    "model.decoder_layers",
    "model.num_queries",
    "model.query_mode",
    "model.grid_h",
    "model.grid_w",
    "model.channels",
    "model.alignment_width",
    "model.right_align",
    "model.patience",
    "train.stage1_epochs",
    "train.stage2_epochs",
    "train.learning_rate",
    "train.lr_decay_epochs",
    "train.lr_decay_factor",
    "train.history_min",
    "train.history_max",
    "train.random_len",
    "train.horizon",
    "train.rollout_weight",
    "train.background_weight",
    "train.termination_weight",
    "train.cost_l1",
    "train.cost_giou",
    "train.fn_drop",
    "train.fp_insert",
    "train.fp_track",
    "train.closed_loop",
    "train.grad_clip",
    "train.cell_loss_weight",
    "train.tracklet_refresh",
    "track.history_cap",
    "track.filter",
    "track.filter_threshold",
    "eval.iou_threshold",
    "ablate.caps",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk, 0)
    }
}

/// Deterministic per-component seed.
pub fn derive_seed(root: u64, component: u64) -> u64 {
    let mut z = root ^ component.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MODEL_SEED: u64 = 1;
const TRAIN_SEED: u64 = 2;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Schema(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Schema(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn schema(e: mo3tr_core::Error) -> CliError {
    CliError::Schema(match e {
        mo3tr_core::Error::Config(m) => m,
        other => other.to_string(),
    })
}

/// Parses `1,10,20,30`.
pub fn parse_caps(key: &str, value: &str) -> Result<Vec<usize>> {
    let caps: Vec<usize> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    if caps.is_empty() || caps.contains(&0) {
        return Err(CliError::Schema(format!("{key}: caps must be positive, got {value:?}")));
    }
    Ok(caps)
}

impl RunConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (mut model, mut train) = match preset {
            Preset::Desk => (ModelConfig::desk(), TrainingConfig::desk()),
            Preset::Paper => (ModelConfig::paper(), TrainingConfig::paper()),
        };
        model.seed = derive_seed(seed, MODEL_SEED);
        train.seed = derive_seed(seed, TRAIN_SEED);
        Self {
            preset,
            seed,
            model,
            train,
            history_cap: None,
            filter: None,
            filter_threshold: None,
            iou_threshold: 0.5,
            ablate_caps: vec![1, 10, 20, 30],
        }
    }

    /// Applies `key=value` lines from a file body, then `overrides`.
    pub fn load(text: Option<(&Path, &str)>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some((path, body)) = text {
            for (n, raw) in body.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Schema(format!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1))
                })?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Schema(format!("override: expected key=value, got {o:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Schema(format!("unknown config key {k:?}")));
            }
        }
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            None => Preset::Desk,
            Some((_, v)) if v == "desk" => Preset::Desk,
            Some((_, v)) if v == "paper" => Preset::Paper,
            Some((_, v)) => return Err(CliError::Schema(format!("preset: expected desk or paper, got {v:?}"))),
        };
        let seed = match pairs.iter().rev().find(|(k, _)| k == "seed") {
            Some((k, v)) => parse(k, v)?,
            None => 0,
        };
        let mut cfg = Self::preset(preset, seed);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" | "seed" => {}
            "model.d_z" => m.d_model = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.ffn_hidden" => m.ffn_hidden = parse(key, v)?,
            "model.temporal_layers" => m.temporal_layers = parse(key, v)?,
            "model.encoder_layers" => m.encoder_layers = parse(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, v)?,
            "model.num_queries" => m.num_queries = parse(key, v)?,
            "model.query_mode" => m.query_mode = QueryMode::parse(v).map_err(schema)?,
            "model.grid_h" => m.grid_h = parse(key, v)?,
            "model.grid_w" => m.grid_w = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.alignment_width" => m.temporal_window = parse(key, v)?,
            "model.right_align" => m.right_align = parse_bool(key, v)?,
            "model.patience" => m.patience = parse(key, v)?,
            "train.stage1_epochs" => t.stage1_epochs = parse(key, v)?,
            "train.stage2_epochs" => t.stage2_epochs = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.lr_decay_epochs" => t.lr_decay_epochs = parse(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.history_min" => t.history_len_min = parse(key, v)?,
            "train.history_max" => t.history_len_max = parse(key, v)?,
            "train.random_len" => t.random_len = parse_bool(key, v)?,
            "train.horizon" => t.future_horizon = parse(key, v)?,
            "train.rollout_weight" => t.rollout_weight = parse(key, v)?,
            "train.background_weight" => t.background_weight = parse(key, v)?,
            "train.termination_weight" => t.termination_weight = parse(key, v)?,
            "train.cost_l1" => t.cost.alpha_l1 = parse(key, v)?,
            "train.cost_giou" => t.cost.alpha_giou = parse(key, v)?,
            "train.fn_drop" => t.fn_drop = parse(key, v)?,
            "train.fp_insert" => t.fp_insert = parse(key, v)?,
            "train.fp_track" => t.fp_track = parse(key, v)?,
            "train.closed_loop" => t.closed_loop = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.cell_loss_weight" => t.cell_loss_weight = parse(key, v)?,
            "train.tracklet_refresh" => t.tracklet_refresh = TrackletRefresh::parse(v).map_err(schema)?,
            "track.history_cap" => {
                self.history_cap = match v {
                    "full" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "track.filter" => {
                self.filter = match v {
                    "none" => None,
                    _ => Some(FilterMode::parse(v).map_err(schema)?),
                }
            }
            "track.filter_threshold" => {
                self.filter_threshold = match v {
                    "default" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "eval.iou_threshold" => self.iou_threshold = parse(key, v)?,
            "ablate.caps" => self.ablate_caps = parse_caps(key, v)?,
            _ => return Err(CliError::Schema(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(schema)?;
        self.train.validate(self.model.temporal_window).map_err(schema)?;
        if let Some(cap) = self.history_cap {
            if cap == 0 || cap > self.model.temporal_window {
                return Err(CliError::Schema(format!(
                    "track.history_cap must lie in 1..={}, got {cap}",
                    self.model.temporal_window
                )));
            }
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(CliError::Schema(format!(
                "eval.iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    pub fn history_cap(&self) -> usize {
        self.history_cap.unwrap_or(self.model.temporal_window)
    }

    /// Value of `key` as it would be written back.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "preset" => self.preset.as_str().into(),
            "seed" => self.seed.to_string(),
            "model.d_z" => m.d_model.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.ffn_hidden" => m.ffn_hidden.to_string(),
            "model.temporal_layers" => m.temporal_layers.to_string(),
            "model.encoder_layers" => m.encoder_layers.to_string(),
            "model.decoder_layers" => m.decoder_layers.to_string(),
            "model.num_queries" => m.num_queries.to_string(),
            "model.query_mode" => m.query_mode.as_str().into(),
            "model.grid_h" => m.grid_h.to_string(),
            "model.grid_w" => m.grid_w.to_string(),
            "model.channels" => m.channels.to_string(),
            "model.alignment_width" => m.temporal_window.to_string(),
            "model.right_align" => m.right_align.to_string(),
            "model.patience" => m.patience.to_string(),
            "train.stage1_epochs" => t.stage1_epochs.to_string(),
            "train.stage2_epochs" => t.stage2_epochs.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.lr_decay_epochs" => t.lr_decay_epochs.to_string(),
            "train.lr_decay_factor" => t.lr_decay_factor.to_string(),
            "train.history_min" => t.history_len_min.to_string(),
            "train.history_max" => t.history_len_max.to_string(),
            "train.random_len" => t.random_len.to_string(),
            "train.horizon" => t.future_horizon.to_string(),
            "train.rollout_weight" => t.rollout_weight.to_string(),
            "train.background_weight" => t.background_weight.to_string(),
            "train.termination_weight" => t.termination_weight.to_string(),
            "train.cost_l1" => t.cost.alpha_l1.to_string(),
            "train.cost_giou" => t.cost.alpha_giou.to_string(),
            "train.fn_drop" => t.fn_drop.to_string(),
            "train.fp_insert" => t.fp_insert.to_string(),
            "train.fp_track" => t.fp_track.to_string(),
            "train.closed_loop" => t.closed_loop.to_string(),
            "train.grad_clip" => t.grad_clip.to_string(),
            "train.cell_loss_weight" => t.cell_loss_weight.to_string(),
            "train.tracklet_refresh" => t.tracklet_refresh.as_str().into(),
            "track.history_cap" => self.history_cap.map_or("full".into(), |c| c.to_string()),
            "track.filter" => match self.filter {
                None => "none".into(),
                Some(FilterMode::CenterDistance) => "cd".into(),
                Some(FilterMode::Iou) => "iou".into(),
            },
            "track.filter_threshold" => self.filter_threshold.map_or("default".into(), |v| v.to_string()),
            "eval.iou_threshold" => self.iou_threshold.to_string(),
            "ablate.caps" => self.ablate_caps.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            _ => return None,
        })
    }

    /// The effective configuration, one `key=value` per line, reloadable
    /// with [`RunConfig::load`].
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).unwrap_or_default());
        }
        out
    }

    /// Fails when `other` (e.g. a checkpoint's model) differs in any
    /// architectural field.
    pub fn check_model(&self, other: &ModelConfig) -> Result<()> {
        let mine = &self.model;
        let fields = [
            ("model.d_z", mine.d_model, other.d_model),
            ("model.heads", mine.heads, other.heads),
            ("model.ffn_hidden", mine.ffn_hidden, other.ffn_hidden),
            ("model.temporal_layers", mine.temporal_layers, other.temporal_layers),
            ("model.encoder_layers", mine.encoder_layers, other.encoder_layers),
            ("model.decoder_layers", mine.decoder_layers, other.decoder_layers),
            ("model.num_queries", mine.num_queries, other.num_queries),
            ("model.grid_h", mine.grid_h, other.grid_h),
            ("model.grid_w", mine.grid_w, other.grid_w),
            ("model.channels", mine.channels, other.channels),
        ];
        for (name, a, b) in fields {
            if a != b {
                return Err(CliError::DimensionMismatch(format!("{name} is {a} in the config but {b} in the checkpoint")));
            }
        }
        if mine.query_mode != other.query_mode {
            return Err(CliError::DimensionMismatch(format!(
                "model.query_mode is {} in the config but {} in the checkpoint",
                mine.query_mode.as_str(),
                other.query_mode.as_str()
            )));
        }
        Ok(())
    }
}
