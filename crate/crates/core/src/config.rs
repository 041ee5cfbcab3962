//! Experiment configuration, presets and the resolved-config hash.
//!
//! A user document is deep-merged over its preset, then deserialised with
//! unknown keys rejected. The hash is SHA-256 over the canonical JSON of the
//! resolved configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::contrast::LossConfig;
use crate::encoder::EncoderDecoderConfig;
use crate::error::{bail, Error, Result};
use crate::synth::SynthParams;
use crate::views::ViewPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes generated in total; the last `eval.n_test` are held out.
    pub n_scenes: usize,
    pub n_sequences: usize,
    pub sequence_length: usize,
    pub max_speed: i32,
    pub synth: SynthParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_encoder: f32,
    pub lr_decoder: f32,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub checkpoint_every: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthLoss {
    #[default]
    Huber,
    L1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteWeighting {
    Uniform,
    #[default]
    Similarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_test: usize,
    pub probe_epochs: usize,
    pub probe_lr: f32,
    pub probe_batch: usize,
    pub probe_momentum: f32,
    pub probe_weight_decay: f32,
    pub depth_loss: DepthLoss,
    pub huber_delta: f32,
    /// Evaluate probes after 4× bilinear upsampling of the logits instead of
    /// at the embedding stride.
    pub upsample_eval: bool,
    pub knn_k: usize,
    pub window: usize,
    pub weighting: VoteWeighting,
    pub retrieval_top_k: usize,
    /// Distractor bank size for the constraint-satisfaction diagnostic.
    pub distractors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub data: DataConfig,
    pub views: ViewPolicy,
    pub model: EncoderDecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Runnable small-scale defaults.
    pub fn desk() -> Self {
        ExperimentConfig {
            preset: "desk".into(),
            data: DataConfig {
                n_scenes: 600,
                n_sequences: 8,
                sequence_length: 10,
                max_speed: 2,
                synth: SynthParams::default(),
            },
            views: ViewPolicy::default(),
            model: EncoderDecoderConfig {
                stage_depth: 1,
                fpn_dim: 64,
                decoder_dim: 64,
                ..EncoderDecoderConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig {
                iterations: 4000,
                batch_size: 8,
                lr_encoder: 1e-3,
                lr_decoder: 1e-3,
                sgd_momentum: 0.9,
                weight_decay: 1e-4,
                seed: 0,
                checkpoint_every: 500,
            },
            eval: EvalConfig {
                n_test: 100,
                probe_epochs: 30,
                probe_lr: 0.05,
                probe_batch: 256,
                probe_momentum: 0.9,
                probe_weight_decay: 1e-4,
                depth_loss: DepthLoss::Huber,
                huber_delta: 1.0,
                upsample_eval: false,
                knn_k: 5,
                window: 7,
                weighting: VoteWeighting::Similarity,
                retrieval_top_k: 5,
                distractors: 4096,
            },
        }
    }

    /// Full-scale hyperparameters. Valid as configuration; not meant to run
    /// on a desk machine.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = "paper".into();
        c.data.synth.size = 256;
        c.views.out_size = [224, 224];
        c.views.stride = 4;
        c.views.min_matches = 32;
        c.model = EncoderDecoderConfig {
            stage_channels: vec![256, 512, 1024, 2048, 2048],
            stage_depth: 2,
            fpn_dim: 256,
            decoder_dim: 128,
            emb_dim: 128,
            out_stride: 4,
            groups: 32,
            padding: Default::default(),
        };
        c.loss = LossConfig {
            tau: 0.07,
            loss_scale: 10.0,
            n_positive: 32,
            queue_capacity: 65_536,
            momentum: 0.999,
        };
        c.train.lr_encoder = 3e-7;
        c.train.lr_decoder = 3e-3;
        c.train.batch_size = 128;
        c.train.iterations = 6_000_000;
        c.train.checkpoint_every = 10_000;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => bail!(Config, "unknown preset {other:?} (expected \"desk\" or \"paper\")"),
        }
    }

    /// Merges `doc` over the preset it names (or `fallback_preset`).
    pub fn from_value(doc: Value, fallback_preset: &str) -> Result<Self> {
        if !doc.is_object() {
            bail!(Config, "configuration must be a JSON object");
        }
        let name = match doc.get("preset") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => bail!(Config, "\"preset\" must be a string"),
            None => fallback_preset.to_string(),
        };
        let mut base = serde_json::to_value(Self::preset(&name)?)?;
        merge(&mut base, doc);
        let cfg: ExperimentConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback_preset: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(doc, fallback_preset)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.views.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 || t.checkpoint_every == 0 {
            bail!(Config, "iterations, batch_size and checkpoint_every must be at least 1");
        }
        for (name, v) in [
            ("lr_encoder", t.lr_encoder),
            ("lr_decoder", t.lr_decoder),
            ("sgd_momentum", t.sgd_momentum),
            ("weight_decay", t.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!(Config, "{name} must be a finite non-negative number");
            }
        }
        if self.views.stride != self.model.out_stride {
            bail!(
                Config,
                "view stride {} differs from encoder output stride {}",
                self.views.stride,
                self.model.out_stride
            );
        }
        let d = self.model.deepest_stride();
        if self.views.out_size.iter().any(|s| s % d != 0) {
            bail!(Config, "view size {:?} not divisible by encoder stride {d}", self.views.out_size);
        }
        if self.views.min_matches < self.loss.n_positive {
            bail!(
                Config,
                "min_matches {} is below n_positive {}",
                self.views.min_matches,
                self.loss.n_positive
            );
        }
        if self.data.synth.size % d != 0 {
            bail!(Config, "scene size {} not divisible by encoder stride {d}", self.data.synth.size);
        }
        if self.eval.n_test == 0 || self.eval.n_test >= self.data.n_scenes {
            bail!(Config, "n_test must lie in 1..n_scenes");
        }
        if self.eval.knn_k == 0 || self.eval.window == 0 || self.eval.probe_batch == 0 {
            bail!(Config, "knn_k, window and probe_batch must be at least 1");
        }
        if self.data.sequence_length < 2 {
            bail!(Config, "sequence_length must be at least 2");
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursive object merge; non-object values in `over` replace `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
