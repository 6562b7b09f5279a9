//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Every key has a default except the two paths.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{LossConfig, ModelConfig, PriorLayer};
use crate::decode::SearchConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    /// Desk-scale defaults: `d_model = 128`, everything else as in the
    /// reference setup.
    fn default() -> Self {
        let mut c = Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            train_count: 2000,
            dev_count: 200,
            test_count: 200,
            data_dir: None,
            out_dir: None,
        };
        c.model.encoder.d_model = 128;
        c.sync();
        c
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl Value for PriorLayer {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "first" => Some(PriorLayer::First),
            "final" => Some(PriorLayer::Final),
            _ => None,
        }
    }
    fn show(&self) -> String {
        match self {
            PriorLayer::First => "first".into(),
            PriorLayer::Final => "final".into(),
        }
    }
}

fn parse<T: Value>(key: &str, value: &str) -> Result<T> {
    T::parse(value).ok_or_else(|| Error::config(format!("bad value `{value}` for `{key}`")))
}

macro_rules! keys {
    ($($key:literal => [$($path:tt)+]),* $(,)?) => {
        /// Every recognized key, in file order.
        pub const KEYS: &[&str] = &[$($key,)* "data_dir", "out_dir"];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($path)+ = parse(key, value)?,)*
                    "data_dir" => self.data_dir = Some(value.to_string()),
                    "out_dir" => self.out_dir = Some(value.to_string()),
                    _ => return Err(Error::config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Every non-path key with its current value.
            pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($path)+.show()),)*]
            }
        }
    };
}

keys! {
    "seed" => [train.seed],
    "train_count" => [train_count],
    "dev_count" => [dev_count],
    "test_count" => [test_count],
    "lexicon_size" => [synth.lexicon_size],
    "d_x" => [synth.d_x],
    "seg_len_min" => [synth.seg_len_range.0],
    "seg_len_max" => [synth.seg_len_range.1],
    "segs_min" => [synth.segs_per_clip_range.0],
    "segs_max" => [synth.segs_per_clip_range.1],
    "noise_sigma" => [synth.noise_sigma],
    "reorder_prob" => [synth.reorder_prob],
    "d_model" => [model.encoder.d_model],
    "enc_layers" => [model.encoder.layers],
    "enc_heads" => [model.encoder.heads],
    "conv_kernel" => [model.encoder.conv_kernel],
    "dropout" => [model.encoder.dropout],
    "segments" => [model.segmentation.segments],
    "gamma" => [model.segmentation.gamma],
    "seg_hidden" => [model.segmentation.mlp_hidden],
    "sinkhorn_iters" => [model.routing.sinkhorn_iters],
    "monotonic_bias_eta" => [model.routing.monotonic_bias_eta],
    "eps_num" => [model.routing.eps_num],
    "thoughts" => [model.think.thoughts],
    "think_layers" => [model.think.layers],
    "think_heads" => [model.think.heads],
    "lambda_p" => [model.think.lambda_p],
    "use_content_bias" => [model.think.use_content_bias],
    "use_log_prior_bias" => [model.think.use_log_prior_bias],
    "dec_layers" => [model.decoder.layers],
    "dec_heads" => [model.decoder.heads],
    "lambda_w" => [model.decoder.lambda_w],
    "use_prior" => [model.decoder.use_prior],
    "prior_layer" => [model.decoder.prior_layer],
    "label_smoothing" => [loss.label_smoothing],
    "delta" => [loss.delta],
    "lambda_mono" => [loss.lambda_mono],
    "lambda_cont" => [loss.lambda_cont],
    "regularize_all_layers" => [loss.regularize_all_layers],
    "lr" => [train.lr],
    "beta1" => [train.beta1],
    "beta2" => [train.beta2],
    "adam_eps" => [train.adam_eps],
    "weight_decay" => [train.weight_decay],
    "batch_size" => [train.batch_size],
    "warmup_steps" => [train.warmup_steps],
    "plateau_factor" => [train.plateau_factor],
    "plateau_patience" => [train.plateau_patience],
    "stop_lr" => [train.stop_lr],
    "max_epochs" => [train.max_epochs],
    "eval_every" => [train.eval_every],
    "max_grad_norm" => [train.max_grad_norm],
    "target_dev_acc" => [train.target_dev_acc],
    "max_steps" => [train.max_steps],
    "eval_bleu" => [train.eval_bleu],
    "max_decode_len" => [train.max_decode_len],
    "beam" => [search.beam],
    "len_penalty" => [search.len_penalty],
}

impl RunConfig {
    /// Reference-scale preset (`d_model = 256`).
    pub fn reference() -> Self {
        let mut c = Self::default();
        c.model.encoder.d_model = 256;
        c
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key = value` lines.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        self.sync();
        self.validate()
    }

    /// Copies data-derived sizes and shared settings into the sub-configs.
    pub fn sync(&mut self) {
        self.synth.seed = self.train.seed;
        self.model.encoder.d_x = self.synth.d_x;
        self.model.decoder.vocab_size = self.synth.vocab_size();
        self.model.segmentation.eps_num = self.model.routing.eps_num;
        self.search.max_len = self.train.max_decode_len;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Snapshot for checkpoints.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Rebuilds a config from a checkpoint snapshot.
    pub fn from_snapshot(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    /// Config file text listing every key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
