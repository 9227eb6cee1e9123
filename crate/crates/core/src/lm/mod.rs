//! Decoder-only character-level language model used as one specialist.
//!
//! Pre-norm residual blocks (RMSNorm, causal multi-head attention, ReLU MLP),
//! learned absolute position embeddings, untied zero-initialized output head.

mod cache;
mod eval;
mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use cache::KvCache;
pub use eval::{perplexity, ResponseScorer};
pub(crate) use eval::rows_nll;
pub use pretrain::{pretrain_specialist, PretrainConfig, PretrainRun};

use crate::checkpoint::Checkpoint;
use crate::data::{Domain, PromptTemplate, Tokenizer};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::ParamSet;

/// Std of token embeddings at init.
pub const EMBED_STD: f64 = 0.5;
/// Std of position embeddings at init.
pub const POS_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub feedforward_mult: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: Tokenizer.vocab_size(),
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            feedforward_mult: 4,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("feedforward_mult", self.feedforward_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        self.d_model * self.feedforward_mult
    }
}

const PER_LAYER: usize = 8;
const ATTN_NORM: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const MLP_NORM: usize = 5;
const W1: usize = 6;
const W2: usize = 7;

fn layer_idx(layer: usize, which: usize) -> usize {
    2 + layer * PER_LAYER + which
}

/// Hidden states and logits for every input position.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialistOutput {
    /// `[T, d_model]` final-norm output, the input of the LM head.
    pub hidden: Tensor,
    /// `[T, vocab_size]`
    pub logits: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Specialist {
    pub config: LmConfig,
    pub params: ParamSet,
    pub domain: Domain,
    pub template: PromptTemplate,
}

impl Specialist {
    /// Fresh model using the domain's default template.
    pub fn init(config: &LmConfig, domain: Domain, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.d_ff();
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut p = ParamSet::new();
        p.push("tok_emb", Tensor::randn(&[config.vocab_size, d], EMBED_STD, &mut rng));
        p.push("pos_emb", Tensor::randn(&[config.max_seq_len, d], POS_STD, &mut rng));
        let std_in = 1.0 / (d as f64).sqrt();
        for l in 0..config.n_layers {
            p.push(format!("layers.{l}.attn_norm"), Tensor::full(&[d], 1.0));
            for name in ["wq", "wk", "wv"] {
                p.push(format!("layers.{l}.{name}"), Tensor::randn(&[d, d], std_in, &mut rng));
            }
            p.push(format!("layers.{l}.wo"), Tensor::randn(&[d, d], std_in * residual_scale, &mut rng));
            p.push(format!("layers.{l}.mlp_norm"), Tensor::full(&[d], 1.0));
            p.push(format!("layers.{l}.w1"), Tensor::randn(&[d, ff], std_in, &mut rng));
            let std_ff = 1.0 / (ff as f64).sqrt();
            p.push(format!("layers.{l}.w2"), Tensor::randn(&[ff, d], std_ff * residual_scale, &mut rng));
        }
        p.push("final_norm", Tensor::full(&[d], 1.0));
        // zero head: an untrained model predicts the uniform distribution
        p.push("head", Tensor::zeros(&[d, config.vocab_size]));
        Ok(Specialist {
            config: config.clone(),
            params: p,
            domain,
            template: PromptTemplate::for_domain(domain),
        })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length { len: 0, max: self.config.max_seq_len });
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `params` are this model's parameter
    /// leaves as returned by [`ParamSet::to_graph`].
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], tokens: &[usize]) -> Result<ForwardVars> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.embedding(params[0], tokens)?;
        let pos = g.embedding(params[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..c.n_layers {
            let w = |i| params[layer_idx(l, i)];
            let h = g.rmsnorm(x, w(ATTN_NORM))?;
            let q = g.matmul(h, w(WQ))?;
            let k = g.matmul(h, w(WK))?;
            let v = g.matmul(h, w(WV))?;
            let a = g.causal_self_attention(q, k, v, c.n_heads)?;
            let o = g.matmul(a, w(WO))?;
            x = g.add(x, o)?;
            let h = g.rmsnorm(x, w(MLP_NORM))?;
            let up = g.matmul(h, w(W1))?;
            let act = g.relu(up)?;
            let down = g.matmul(act, w(W2))?;
            x = g.add(x, down)?;
        }
        let n = params.len();
        let hidden = g.rmsnorm(x, params[n - 2])?;
        let logits = g.matmul(hidden, params[n - 1])?;
        Ok(ForwardVars { hidden, logits })
    }

    /// Gradient-free forward over a whole sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<SpecialistOutput> {
        let mut g = Graph::new();
        let params = self.params.to_graph(&mut g, false)?;
        let out = self.forward_graph(&mut g, &params, tokens)?;
        Ok(SpecialistOutput {
            hidden: g.value(out.hidden).clone(),
            logits: g.value(out.logits).clone(),
        })
    }

    /// Tokens of `instruction` rendered through this specialist's template.
    pub fn prompt_tokens(&self, instruction: &str) -> Result<Vec<usize>> {
        Tokenizer.encode(&self.template.render_prompt(instruction))
    }

    pub fn meta(&self) -> serde_json::Value {
        json!({
            "config": self.config,
            "domain": self.domain,
            "template": self.template,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = self.meta();
        meta["kind"] = json!("specialist");
        let mut ck = Checkpoint::new(meta);
        self.params.write_into(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "specialist" {
            return Err(Error::Checkpoint(format!("expected a specialist checkpoint, got {}", ck.meta["kind"])));
        }
        Specialist::from_meta(&ck.meta, ck, "")
    }

    pub(crate) fn from_meta(meta: &serde_json::Value, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let parse = |key: &str| meta.get(key).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks {key}")));
        let config: LmConfig =
            serde_json::from_value(parse("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let domain: Domain =
            serde_json::from_value(parse("domain")?).map_err(|e| Error::Checkpoint(format!("domain: {e}")))?;
        let template: PromptTemplate =
            serde_json::from_value(parse("template")?).map_err(|e| Error::Checkpoint(format!("template: {e}")))?;
        let mut spec = Specialist::init(&config, domain, 0)?;
        spec.template = template;
        spec.params.read_from(ck, prefix)?;
        if !spec.params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(spec)
    }
}
