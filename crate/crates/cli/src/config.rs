use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokenfuse::data::Tokenizer;
use tokenfuse::fuser::Routing;
use tokenfuse::infer::GenerationConfig;
use tokenfuse::lm::{LmConfig, PretrainConfig};
use tokenfuse::train::{OptimConfig, SamplerKind, TrainConfig};
use tokenfuse::{Error, Result};

/// Flat run configuration. Every key is optional in the file; missing keys
/// take the library defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory holding data, checkpoints, metrics and analysis.
    pub out: PathBuf,

    pub train_examples: usize,
    pub held_out_examples: usize,
    /// Held-out examples per domain used by `eval` and `analyze`; 0 means all.
    pub eval_examples: usize,

    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub feedforward_mult: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub checkpoint_every: usize,

    pub n1_steps: usize,
    pub n2_steps: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub per_domain_batch: usize,
    pub sampler: SamplerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,

    pub max_new_tokens: usize,
    pub temperature: f64,
    /// 0 keeps every candidate.
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        let pre = PretrainConfig::default();
        let tr = TrainConfig::default();
        let gen = GenerationConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            train_examples: 2000,
            held_out_examples: 200,
            eval_examples: 0,
            vocab_size: lm.vocab_size,
            d_model: lm.d_model,
            n_layers: lm.n_layers,
            n_heads: lm.n_heads,
            max_seq_len: lm.max_seq_len,
            feedforward_mult: lm.feedforward_mult,
            pretrain_steps: pre.steps,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            checkpoint_every: 100,
            n1_steps: tr.n1_steps,
            n2_steps: tr.n2_steps,
            lr1: tr.lr1,
            lr2: tr.lr2,
            per_domain_batch: tr.per_domain_batch,
            sampler: tr.sampler,
            weight_decay: tr.optim.weight_decay,
            beta1: tr.optim.beta1,
            beta2: tr.optim.beta2,
            eps: tr.optim.eps,
            clip_norm: tr.optim.clip_norm.unwrap_or(0.0),
            max_new_tokens: gen.max_new_tokens,
            temperature: gen.temperature,
            top_k: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            feedforward_mult: self.feedforward_mult,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            optim: self.optim(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            n1_steps: self.n1_steps,
            n2_steps: self.n2_steps,
            lr1: self.lr1,
            lr2: self.lr2,
            per_domain_batch: self.per_domain_batch,
            optim: self.optim(),
            seed: self.seed,
            sampler: self.sampler,
        }
    }

    pub fn generation(&self, routing: Routing) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_k: (self.top_k > 0).then_some(self.top_k),
            seed: self.seed,
            routing,
            ..Default::default()
        }
    }

    /// Checks every derived config so bad values fail before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != Tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "vocab_size must equal the tokenizer's {}, got {}",
                Tokenizer.vocab_size(),
                self.vocab_size
            )));
        }
        if self.train_examples == 0 || self.held_out_examples == 0 {
            return Err(Error::Config("train_examples and held_out_examples must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("out must name a directory".into()));
        }
        self.lm().validate()?;
        self.pretrain().validate()?;
        self.train().validate()?;
        self.generation(Routing::Gate).validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn specialist_path(&self, domain: tokenfuse::data::Domain) -> PathBuf {
        self.out.join("specialists").join(format!("{domain}.ckpt"))
    }

    pub fn fused_path(&self) -> PathBuf {
        self.out.join("fused.ckpt")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.out.join("analysis")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig {
            seed: 9,
            sampler: SamplerKind::Mixed,
            ..Default::default()
        };
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c: RunConfig = toml::from_str("d_model = 32\nn_heads = 4").unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.n_layers, RunConfig::default().n_layers);
        assert!(toml::from_str::<RunConfig>("d_modle = 32").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            RunConfig { vocab_size: 50, ..Default::default() },
            RunConfig { n_heads: 3, ..Default::default() },
            RunConfig { lr1: 0.0, ..Default::default() },
            RunConfig { temperature: -1.0, ..Default::default() },
            RunConfig { train_examples: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
