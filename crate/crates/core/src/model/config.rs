use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceiver::PerceiverConfig;
use crate::vqformer::VQFormerConfig;

/// Which parameter groups receive gradient updates. The encoder stub is
/// always frozen and has no flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainable {
    pub tokenizer: bool,
    pub perceiver: bool,
    pub vqformer: bool,
    pub decoder: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            tokenizer: true,
            perceiver: true,
            vqformer: true,
            decoder: false,
        }
    }
}

/// Every dimension and hyperparameter of the pipeline. All keys are required
/// in JSON and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub perceiver: PerceiverConfig,
    pub vqformer: VQFormerConfig,
    /// Size of the token vocabulary, including `<pad>` (0) and `<unk>` (1).
    pub vocab_size: usize,
    /// Known words, assigned ids from 2 upward.
    pub vocab: Vec<String>,
    /// Question tokens beyond this count are dropped.
    pub max_text_len: usize,
    /// Answer tokens beyond this count are dropped; also the greedy decode length.
    pub answer_len: usize,
    /// Width of one raw frame feature vector in a video file.
    pub raw_dim: usize,
    /// Width of the frozen embedding space used for frame sampling.
    pub sampler_dim: usize,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub trainable: Trainable,
}

impl PipelineConfig {
    /// Full-scale model dimensions and fine-tuning hyperparameters.
    pub fn full_scale() -> Self {
        PipelineConfig {
            perceiver: PerceiverConfig::default(),
            vqformer: VQFormerConfig::default(),
            vocab_size: 32000,
            vocab: Vec::new(),
            max_text_len: 64,
            answer_len: 16,
            raw_dim: 1024,
            sampler_dim: 768,
            label_smoothing: 0.1,
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            trainable: Trainable::default(),
        }
    }

    /// Small configuration that trains in seconds on one core.
    pub fn desk() -> Self {
        let words = [
            "what", "is", "the", "man", "woman", "doing", "color", "of", "shirt", "red", "blue",
            "green", "running", "cooking", "dancing", "please", "be", "critical", "a", "dog",
        ];
        PipelineConfig {
            perceiver: PerceiverConfig {
                frames: 4,
                patches: 3,
                dim: 8,
                latents: 4,
                layers: 1,
                heads: 2,
                head_dim: 4,
            },
            vqformer: VQFormerConfig {
                dim: 8,
                text_dim: 16,
                heads: 2,
                head_dim: 4,
                s_q: 2.0,
            },
            vocab_size: words.len() + 2,
            vocab: words.iter().map(|w| w.to_string()).collect(),
            max_text_len: 16,
            answer_len: 4,
            raw_dim: 6,
            sampler_dim: 768,
            label_smoothing: 0.1,
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            trainable: Trainable::default(),
        }
    }

    /// Smallest configuration exercised by gradient checks.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.perceiver = PerceiverConfig {
            frames: 2,
            patches: 2,
            dim: 3,
            latents: 2,
            layers: 1,
            heads: 1,
            head_dim: 2,
        };
        cfg.vqformer = VQFormerConfig {
            dim: 3,
            text_dim: 4,
            heads: 1,
            head_dim: 2,
            s_q: 8.0,
        };
        cfg.vocab = ["what", "red"].iter().map(|s| s.to_string()).collect();
        cfg.vocab_size = 5;
        cfg.max_text_len = 4;
        cfg.answer_len = 3;
        cfg.raw_dim = 3;
        cfg.sampler_dim = 4;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.perceiver.validate()?;
        self.vqformer.validate()?;
        if self.perceiver.dim != self.vqformer.dim {
            return Err(Error::contract(format!(
                "perceiver width {} differs from vqformer width {}",
                self.perceiver.dim, self.vqformer.dim
            )));
        }
        if self.vocab_size < self.vocab.len() + 2 {
            return Err(Error::contract(format!(
                "vocab_size {} cannot hold {} words plus <pad> and <unk>",
                self.vocab_size,
                self.vocab.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for w in &self.vocab {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary word {w:?}")));
            }
            if !seen.insert(w.to_lowercase()) {
                return Err(Error::contract(format!("duplicate vocabulary word {w:?}")));
            }
        }
        for (name, v) in [
            ("max_text_len", self.max_text_len),
            ("answer_len", self.answer_len),
            ("raw_dim", self.raw_dim),
            ("sampler_dim", self.sampler_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be >= 1")));
            }
        }
        if self.perceiver.frames < 2 {
            return Err(Error::contract("training sampling needs at least 2 frames"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::contract(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
