use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{LmConfig, Specialist};
use crate::checkpoint::Checkpoint;
use crate::data::{mixed_batches, DomainCorpus, MixedSampler};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor};
use crate::train::{apply_update, divergence, GradAccumulator, OptimConfig, OptimizerState};

/// Next-token pre-training schedule for a single specialist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            lr: 3e-3,
            batch_size: 16,
            optim: OptimConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Resumable pre-training loop. Loss covers every next-token prediction of
/// the template-rendered example (prompt, response and EOS).
pub struct PretrainRun<'a> {
    corpus: &'a DomainCorpus,
    cfg: PretrainConfig,
    seed: u64,
    specialist: Specialist,
    state: OptimizerState,
    sampler: MixedSampler,
    step: usize,
}

impl<'a> PretrainRun<'a> {
    pub fn new(corpus: &'a DomainCorpus, lm: &LmConfig, cfg: &PretrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if corpus.train.is_empty() {
            return Err(Error::Sampler(format!("{} corpus is empty", corpus.domain)));
        }
        let specialist = Specialist::init(lm, corpus.domain, seed)?;
        let state = OptimizerState::new(specialist.params.tensors());
        Ok(PretrainRun {
            corpus,
            cfg: cfg.clone(),
            seed,
            sampler: mixed_batches(std::slice::from_ref(corpus), cfg.batch_size, seed.wrapping_add(1))?,
            specialist,
            state,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn specialist(&self) -> &Specialist {
        &self.specialist
    }

    /// One optimizer step; returns the mean batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.sampler.next().expect("sampler is infinite");
        let mut acc = GradAccumulator::new(self.specialist.params.tensors());
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for r in &batch {
            let w = self.specialist.wrap(&self.corpus.train[r.index])?;
            let tokens = &w.per_specialist_tokens[0];
            let inputs = &tokens[..tokens.len() - 1];
            let mut g = Graph::new();
            let vars = self.specialist.params.to_graph(&mut g, true)?;
            let loss = self
                .specialist
                .forward_graph(&mut g, &vars, inputs)
                .and_then(|out| g.cross_entropy(out.logits, &tokens[1..], &vec![true; inputs.len()]))
                .map_err(|e| divergence(e, "pretrain", self.step))?;
            total += g.value(loss).item();
            let mut grads = g.backward(loss).map_err(|e| divergence(e, "pretrain", self.step))?;
            acc.take_from(&mut grads, &vars, scale);
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                stage: "pretrain".into(),
                step: self.step,
                loss: mean,
            });
        }
        let lr = crate::train::cosine_lr(self.step, self.cfg.steps, self.cfg.lr);
        let group = vec![(&mut self.specialist.params, &mut self.state, acc.finish())];
        apply_update(group, lr, &self.cfg.optim)
            .map_err(|e| divergence(e, "pretrain", self.step))?;
        self.step += 1;
        Ok(mean)
    }

    /// Trains until `until` steps (capped at the configured total) have run.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(usize, f64)) -> Result<()> {
        while self.step < until.min(self.cfg.steps) {
            let loss = self.train_step()?;
            on_step(self.step, loss);
        }
        Ok(())
    }

    pub fn finish(self) -> Specialist {
        self.specialist
    }

    /// Parameters, optimizer moments and loop position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.specialist.to_checkpoint();
        ck.meta["pretrain"] = json!({
            "config": self.cfg,
            "seed": self.seed,
            "step": self.step,
            "optim_step": self.state.step,
        });
        let names = self.specialist.params.names();
        for (name, (m, v)) in names.iter().zip(self.state.m.iter().zip(&self.state.v)) {
            ck.push(format!("optim.m.{name}"), m.clone());
            ck.push(format!("optim.v.{name}"), v.clone());
        }
        ck
    }

    pub fn resume(ck: &Checkpoint, corpus: &'a DomainCorpus) -> Result<Self> {
        let specialist = Specialist::from_checkpoint(ck)?;
        if specialist.domain != corpus.domain {
            return Err(Error::Checkpoint(format!(
                "checkpoint is a {} specialist, corpus is {}",
                specialist.domain, corpus.domain
            )));
        }
        let meta = ck
            .meta
            .get("pretrain")
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no pre-training state".into()))?;
        let cfg: PretrainConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Checkpoint(format!("pretrain config: {e}")))?;
        let field = |k: &str| meta[k].as_u64().ok_or_else(|| Error::Checkpoint(format!("pretrain.{k} missing")));
        let (seed, step, optim_step) = (field("seed")?, field("step")? as usize, field("optim_step")?);
        let mut run = PretrainRun::new(corpus, &specialist.config, &cfg, seed)?;
        run.specialist = specialist;
        let moment = |kind: &str, name: &str| -> Result<Tensor> {
            ck.get(&format!("optim.{kind}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optim.{kind}.{name}")))
        };
        let names = run.specialist.params.names().to_vec();
        run.state.m = names.iter().map(|n| moment("m", n)).collect::<Result<_>>()?;
        run.state.v = names.iter().map(|n| moment("v", n)).collect::<Result<_>>()?;
        run.state.step = optim_step;
        for _ in 0..step {
            run.sampler.next();
        }
        run.step = step;
        Ok(run)
    }
}

pub fn pretrain_specialist(
    corpus: &DomainCorpus,
    lm: &LmConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Specialist> {
    let mut run = PretrainRun::new(corpus, lm, cfg, seed)?;
    run.run_until(cfg.steps, |_, _| {})?;
    Ok(run.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, Domain};
    use crate::lm::tests::tiny_config;
    use crate::lm::{perplexity, ResponseScorer};

    fn cfg(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            lr: 1e-2,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_is_init() {
        let c = synth_corpus(Domain::Text, 20, 5, 0).unwrap();
        let s = pretrain_specialist(&c, &tiny_config(), &cfg(0), 7).unwrap();
        assert_eq!(s, Specialist::init(&tiny_config(), Domain::Text, 7).unwrap());
    }

    #[test]
    fn deterministic_and_learns() {
        let c = synth_corpus(Domain::Math, 40, 10, 0).unwrap();
        let a = pretrain_specialist(&c, &tiny_config(), &cfg(30), 7).unwrap();
        let b = pretrain_specialist(&c, &tiny_config(), &cfg(30), 7).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let init = Specialist::init(&tiny_config(), Domain::Math, 7).unwrap();
        assert!(perplexity(&a, &c.held_out).unwrap() < perplexity(&init, &c.held_out).unwrap());
        let (nll, n) = a.response_nll(&c.held_out[0]).unwrap();
        assert!(nll > 0.0 && n > 1);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let c = synth_corpus(Domain::Code, 30, 5, 0).unwrap();
        let full = pretrain_specialist(&c, &tiny_config(), &cfg(12), 3).unwrap();
        let mut run = PretrainRun::new(&c, &tiny_config(), &cfg(12), 3).unwrap();
        run.run_until(5, |_, _| {}).unwrap();
        let bytes = run.checkpoint().to_bytes();
        drop(run);
        let mut resumed = PretrainRun::resume(&Checkpoint::from_bytes(&bytes).unwrap(), &c).unwrap();
        assert_eq!(resumed.step(), 5);
        resumed.run_until(usize::MAX, |_, _| {}).unwrap();
        assert!(resumed.is_done());
        assert_eq!(resumed.finish().params.checksum(), full.params.checksum());
    }

    #[test]
    fn bad_config() {
        let c = synth_corpus(Domain::Code, 30, 5, 0).unwrap();
        let bad = PretrainConfig { lr: 0.0, ..cfg(1) };
        assert!(matches!(PretrainRun::new(&c, &tiny_config(), &bad, 0), Err(Error::Config(_))));
    }
}
