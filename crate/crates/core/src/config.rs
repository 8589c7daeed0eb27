//! Model and training configuration, readable from `key=value` text.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Pruning;

/// Single-flag removals of model components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Use the standard two-sublayer transformer block instead of the
    /// single simplified residual.
    pub no_residual_simplify: bool,
    pub layer_norm_instead: bool,
    /// Replace the attention-weighted sentence vector with the max pool.
    pub no_entity_aware: bool,
    /// Drop the self-attention term from the entity-aware scores.
    pub no_self_attention: bool,
    /// Classify from the sentence vector alone.
    pub no_entity_pools_ffnn: bool,
    /// Feed a linear projection of the input to the GCN stack.
    pub no_bilstm: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = [
        "no_residual_simplify",
        "layer_norm_instead",
        "no_entity_aware",
        "no_self_attention",
        "no_entity_pools_ffnn",
        "no_bilstm",
    ];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "no_residual_simplify" => &mut self.no_residual_simplify,
            "layer_norm_instead" => &mut self.layer_norm_instead,
            "no_entity_aware" => &mut self.no_entity_aware,
            "no_self_attention" => &mut self.no_self_attention,
            "no_entity_pools_ffnn" => &mut self.no_entity_pools_ffnn,
            "no_bilstm" => &mut self.no_bilstm,
            other => return Err(Error::config(format!("unknown ablation flag {other:?}"))),
        };
        *slot = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        Some(match name {
            "no_residual_simplify" => self.no_residual_simplify,
            "layer_norm_instead" => self.layer_norm_instead,
            "no_entity_aware" => self.no_entity_aware,
            "no_self_attention" => self.no_self_attention,
            "no_entity_pools_ffnn" => self.no_entity_pools_ffnn,
            "no_bilstm" => self.no_bilstm,
            _ => return None,
        })
    }

    /// Parses a comma-separated flag list such as `no_bilstm,no_entity_aware`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            a.set(name, true)?;
        }
        Ok(a)
    }

    pub fn active(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .copied()
            .filter(|n| self.get(n) == Some(true))
            .collect()
    }
}

/// What the self-attention branch reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionInput {
    Embeddings,
    Bilstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// `lr_e = lr0 · decay^e`.
    Epoch,
    /// Multiply by `decay` whenever the dev metric fails to improve.
    Plateau,
}

/// Dev metric used for model selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    MicroF1,
    MacroF1,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_word: usize,
    pub d_ner: usize,
    pub d_pos: usize,
    pub d_p: usize,
    pub d_h: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub d_gcn: usize,
    pub d_ffn: usize,
    pub lstm_layers: usize,
    pub gcn_layers: usize,
    pub pruning: Pruning,
    /// Relative offsets in attention are clipped to `±rel_clip`.
    pub rel_clip: usize,
    pub dropout: f64,
    pub beta: f64,
    pub lr: f64,
    pub decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub norm_momentum: f64,
    pub embed_init: f64,
    pub min_count: usize,
    pub negative_label: String,
    pub metric: Metric,
    pub ablations: Ablations,
    pub attention_input: AttentionInput,
    /// Concatenate position embeddings into the encoder input too.
    pub position_in_input: bool,
    /// Restrict entity-aware attention to tokens kept by pruning.
    pub mask_pruned_attention: bool,
    /// Remove the skip connection(s) of the attention block entirely.
    pub residual_off: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_word: 300,
            d_ner: 30,
            d_pos: 30,
            d_p: 30,
            d_h: 200,
            d_attn: 130,
            heads: 3,
            d_gcn: 200,
            d_ffn: 200,
            lstm_layers: 1,
            gcn_layers: 2,
            pruning: Pruning::Hops(1),
            rel_clip: 10,
            dropout: 0.5,
            beta: 1e-3,
            lr: 0.3,
            decay: 0.9,
            schedule: Schedule::Epoch,
            epochs: 100,
            batch_size: 50,
            clip_norm: 5.0,
            seed: 1,
            norm_momentum: 0.1,
            embed_init: 1.0,
            min_count: 1,
            negative_label: "no_relation".into(),
            metric: Metric::MicroF1,
            ablations: Ablations::default(),
            attention_input: AttentionInput::Embeddings,
            position_in_input: false,
            mask_pruned_attention: false,
            residual_off: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
}

impl ModelConfig {
    /// Small widths that train in seconds on one core. Small corpora give
    /// few updates per epoch, so minibatches are smaller, the decay slower
    /// and regularization lighter; everything else as in the default.
    pub fn desk() -> Self {
        ModelConfig {
            d_word: 32,
            d_ner: 4,
            d_pos: 4,
            d_p: 4,
            d_h: 32,
            d_attn: 24,
            heads: 3,
            d_gcn: 32,
            d_ffn: 32,
            dropout: 0.1,
            beta: 0.0,
            decay: 0.95,
            batch_size: 5,
            ..Default::default()
        }
    }

    /// Applies `key=value` lines (blank lines and `#` comments skipped).
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key=value", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("config line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => match v {
                "default" => *self = ModelConfig::default(),
                "desk" => *self = ModelConfig::desk(),
                _ => return Err(Error::config(format!("unknown preset {v:?}"))),
            },
            "d_word" => self.d_word = parse_num(key, v)?,
            "d_ner" => self.d_ner = parse_num(key, v)?,
            "d_pos" => self.d_pos = parse_num(key, v)?,
            "d_p" => self.d_p = parse_num(key, v)?,
            "d_h" => self.d_h = parse_num(key, v)?,
            "d_attn" => self.d_attn = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "d_gcn" => self.d_gcn = parse_num(key, v)?,
            "d_ffn" => self.d_ffn = parse_num(key, v)?,
            "lstm_layers" => self.lstm_layers = parse_num(key, v)?,
            "gcn_layers" => self.gcn_layers = parse_num(key, v)?,
            "k" | "pruning" => self.pruning = Pruning::parse(v)?,
            "rel_clip" => self.rel_clip = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "decay" => self.decay = parse_num(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "epoch" => Schedule::Epoch,
                    "plateau" => Schedule::Plateau,
                    _ => return Err(Error::config(format!("unknown schedule {v:?}"))),
                }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "norm_momentum" => self.norm_momentum = parse_num(key, v)?,
            "embed_init" => self.embed_init = parse_num(key, v)?,
            "min_count" => self.min_count = parse_num(key, v)?,
            "negative_label" => self.negative_label = v.to_string(),
            "metric" => {
                self.metric = match v {
                    "micro_f1" => Metric::MicroF1,
                    "macro_f1" => Metric::MacroF1,
                    "accuracy" => Metric::Accuracy,
                    _ => return Err(Error::config(format!("unknown metric {v:?}"))),
                }
            }
            "ablate" => self.ablations = Ablations::parse_list(v)?,
            "attention_input" => {
                self.attention_input = match v {
                    "embeddings" => AttentionInput::Embeddings,
                    "bilstm" => AttentionInput::Bilstm,
                    _ => return Err(Error::config(format!("unknown attention_input {v:?}"))),
                }
            }
            "position_in_input" => self.position_in_input = parse_bool(key, v)?,
            "mask_pruned_attention" => self.mask_pruned_attention = parse_bool(key, v)?,
            "residual_off" => self.residual_off = parse_bool(key, v)?,
            other if Ablations::NAMES.contains(&other) => self.ablations.set(other, parse_bool(key, v)?)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `key=value` lines; `from_kv` of the result gives back
    /// an equal config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        put("d_word", self.d_word.to_string());
        put("d_ner", self.d_ner.to_string());
        put("d_pos", self.d_pos.to_string());
        put("d_p", self.d_p.to_string());
        put("d_h", self.d_h.to_string());
        put("d_attn", self.d_attn.to_string());
        put("heads", self.heads.to_string());
        put("d_gcn", self.d_gcn.to_string());
        put("d_ffn", self.d_ffn.to_string());
        put("lstm_layers", self.lstm_layers.to_string());
        put("gcn_layers", self.gcn_layers.to_string());
        put("k", self.pruning.to_string());
        put("rel_clip", self.rel_clip.to_string());
        put("dropout", format!("{:?}", self.dropout));
        put("beta", format!("{:?}", self.beta));
        put("lr", format!("{:?}", self.lr));
        put("decay", format!("{:?}", self.decay));
        put(
            "schedule",
            match self.schedule {
                Schedule::Epoch => "epoch",
                Schedule::Plateau => "plateau",
            }
            .into(),
        );
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("clip_norm", format!("{:?}", self.clip_norm));
        put("seed", self.seed.to_string());
        put("norm_momentum", format!("{:?}", self.norm_momentum));
        put("embed_init", format!("{:?}", self.embed_init));
        put("min_count", self.min_count.to_string());
        put("negative_label", self.negative_label.clone());
        put(
            "metric",
            match self.metric {
                Metric::MicroF1 => "micro_f1",
                Metric::MacroF1 => "macro_f1",
                Metric::Accuracy => "accuracy",
            }
            .into(),
        );
        for name in Ablations::NAMES {
            put(name, self.ablations.get(name).unwrap().to_string());
        }
        put(
            "attention_input",
            match self.attention_input {
                AttentionInput::Embeddings => "embeddings",
                AttentionInput::Bilstm => "bilstm",
            }
            .into(),
        );
        put("position_in_input", self.position_in_input.to_string());
        put("mask_pruned_attention", self.mask_pruned_attention.to_string());
        put("residual_off", self.residual_off.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_word", self.d_word),
            ("d_ner", self.d_ner),
            ("d_pos", self.d_pos),
            ("d_p", self.d_p),
            ("d_h", self.d_h),
            ("d_attn", self.d_attn),
            ("heads", self.heads),
            ("d_gcn", self.d_gcn),
            ("d_ffn", self.d_ffn),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.heads > self.d_attn {
            return Err(Error::config(format!(
                "{} heads cannot split an attention width of {}",
                self.heads, self.d_attn
            )));
        }
        if self.lstm_layers != 1 {
            return Err(Error::config("only a single BiLSTM layer is supported"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (name, v) in [("beta", self.beta), ("lr", self.lr), ("clip_norm", self.clip_norm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::config("norm_momentum outside [0, 1]"));
        }
        if !(self.embed_init > 0.0 && self.embed_init.is_finite()) {
            return Err(Error::config("embed_init must be positive"));
        }
        Ok(())
    }

    /// Per-head widths: the first `d_attn mod heads` heads get one extra unit.
    pub fn head_widths(&self) -> Vec<usize> {
        let base = self.d_attn / self.heads;
        let extra = self.d_attn % self.heads;
        (0..self.heads).map(|a| base + usize::from(a < extra)).collect()
    }

    /// Encoder input width.
    pub fn d_in(&self) -> usize {
        let mut d = self.d_word + self.d_ner + self.d_pos;
        if self.position_in_input {
            d += 2 * self.d_p;
        }
        d
    }

    /// Learning rate in effect for `epoch` (0-based) under the epoch schedule.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}
