//! Fused autoregressive generation.
//!
//! Two paths produce the same token stream: [`generate`] recomputes every
//! specialist over its whole context at each step, while [`orchestrate`]
//! drives one [`Engine`] per specialist through a step/resume protocol in
//! which engines only emit `(hidden, logits)` and never pick tokens.

use std::time::{Duration, Instant};

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::fuser::{FusedModel, Routing};
use crate::gate::GateNetwork;
use crate::lm::{KvCache, Specialist};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedily.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub stop_token: usize,
    pub seed: u64,
    pub routing: Routing,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 64,
            temperature: 0.0,
            top_k: None,
            stop_token: Tokenizer::EOS,
            seed: 0,
            routing: Routing::Gate,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step record for traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: usize,
    pub weights: Vec<f64>,
    /// Specialist holding the largest weight at this step.
    pub top_specialist: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, including the stop token if one was produced.
    pub tokens: Vec<usize>,
    pub trace: Vec<StepTrace>,
    pub stopped: bool,
    pub elapsed: Duration,
}

impl Generation {
    /// Generated text without the stop token.
    pub fn text(&self) -> String {
        Tokenizer.decode(&self.tokens)
    }

    pub fn tokens_per_sec(&self) -> f64 {
        self.tokens.len() as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

/// Next-token choice from fused logits.
pub struct Selector {
    temperature: f64,
    top_k: Option<usize>,
    rng: ChaCha8Rng,
}

impl Selector {
    pub fn new(cfg: &GenerationConfig) -> Self {
        Selector {
            temperature: cfg.temperature,
            top_k: cfg.top_k,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn select(&mut self, logits: &[f64]) -> Result<usize> {
        if self.temperature == 0.0 {
            return Ok(argmax(logits));
        }
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(self.top_k.unwrap_or(logits.len()).min(logits.len()));
        let scaled: Vec<f64> = order.iter().map(|&i| logits[i] / self.temperature).collect();
        let probs = crate::numcore::softmax(&scaled)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(format!("sampling weights: {e}")))?;
        Ok(order[dist.sample(&mut self.rng)])
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Output of one engine step: the newest position's hidden state and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineOutput {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Fuses one position across specialists. Both generation paths call this,
/// so their arithmetic is identical.
pub fn fuse_position(gate: &GateNetwork, routing: Routing, outputs: &[EngineOutput]) -> Result<(Vec<f64>, Vec<f64>)> {
    routing.check(outputs.len())?;
    let scores = outputs
        .iter()
        .map(|o| {
            let h = Tensor::new(vec![1, o.hidden.len()], o.hidden.clone())?;
            Ok(gate.score(&h)?.data()[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights = routing.weights(&scores)?;
    let v = outputs[0].logits.len();
    let mut fused = vec![0.0; v];
    for (o, w) in outputs.iter().zip(&weights) {
        if o.logits.len() != v {
            return Err(Error::Dimension("engines disagree on vocabulary size".into()));
        }
        fused.iter_mut().zip(&o.logits).for_each(|(f, x)| *f += w * x);
    }
    Ok((fused, weights))
}

fn check_prompt(len: usize, max_seq_len: usize, cfg: &GenerationConfig) -> Result<()> {
    if len == 0 {
        return Err(Error::Length { len: 0, max: max_seq_len });
    }
    if len + cfg.max_new_tokens > max_seq_len {
        return Err(Error::Length {
            len: len + cfg.max_new_tokens,
            max: max_seq_len,
        });
    }
    Ok(())
}

/// Cache-free fused generation: every step re-runs each specialist over its
/// full templated context.
pub fn generate(model: &FusedModel, instruction: &str, cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    let mut contexts = model
        .specialists
        .iter()
        .map(|s| s.prompt_tokens(instruction))
        .collect::<Result<Vec<_>>>()?;
    for c in &contexts {
        check_prompt(c.len(), model.max_seq_len(), cfg)?;
    }
    let started = Instant::now();
    let mut selector = Selector::new(cfg);
    let mut out = Generation {
        tokens: Vec::new(),
        trace: Vec::new(),
        stopped: false,
        elapsed: Duration::ZERO,
    };
    for _ in 0..cfg.max_new_tokens {
        let outputs = model
            .specialists
            .iter()
            .zip(&contexts)
            .map(|(s, c)| last_position(s, c))
            .collect::<Result<Vec<_>>>()?;
        let (fused, weights) = fuse_position(&model.gate, cfg.routing, &outputs)?;
        let token = selector.select(&fused)?;
        out.tokens.push(token);
        out.trace.push(StepTrace {
            token,
            top_specialist: argmax(&weights),
            weights,
        });
        if token == cfg.stop_token {
            out.stopped = true;
            break;
        }
        contexts.iter_mut().for_each(|c| c.push(token));
    }
    out.elapsed = started.elapsed();
    Ok(out)
}

/// One specialist generating alone under its own template, cache-free.
pub fn generate_single(spec: &Specialist, instruction: &str, cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    let mut context = spec.prompt_tokens(instruction)?;
    check_prompt(context.len(), spec.config.max_seq_len, cfg)?;
    let started = Instant::now();
    let mut selector = Selector::new(cfg);
    let mut out = Generation {
        tokens: Vec::new(),
        trace: Vec::new(),
        stopped: false,
        elapsed: Duration::ZERO,
    };
    for _ in 0..cfg.max_new_tokens {
        let o = last_position(spec, &context)?;
        let token = selector.select(&o.logits)?;
        out.tokens.push(token);
        out.trace.push(StepTrace {
            token,
            weights: vec![1.0],
            top_specialist: 0,
        });
        if token == cfg.stop_token {
            out.stopped = true;
            break;
        }
        context.push(token);
    }
    out.elapsed = started.elapsed();
    Ok(out)
}

fn last_position(spec: &Specialist, tokens: &[usize]) -> Result<EngineOutput> {
    let out = spec.forward(tokens)?;
    let t = tokens.len() - 1;
    Ok(EngineOutput {
        hidden: out.hidden.row(t).to_vec(),
        logits: out.logits.row(t).to_vec(),
    })
}

/// A generation session that advances one position per `step` and waits
/// for the externally chosen token in `resume`.
pub trait Engine {
    fn step(&mut self) -> Result<EngineOutput>;
    fn resume(&mut self, token: usize) -> Result<()>;
    /// Response tokens consumed so far.
    fn consumed(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HandleState {
    ReadyToStep,
    AwaitingResume,
    Finished,
    Killed,
}

/// In-process engine around one specialist with a KV cache.
pub struct EngineHandle<'a> {
    spec: &'a Specialist,
    cache: KvCache,
    pending: Vec<usize>,
    state: HandleState,
    consumed: usize,
    stop_token: usize,
}

impl<'a> EngineHandle<'a> {
    /// Session primed with `instruction` rendered through the specialist's
    /// own template.
    pub fn new(spec: &'a Specialist, instruction: &str, cfg: &GenerationConfig) -> Result<Self> {
        let pending = spec.prompt_tokens(instruction)?;
        check_prompt(pending.len(), spec.config.max_seq_len, cfg)?;
        Ok(EngineHandle {
            spec,
            cache: spec.new_cache(),
            pending,
            state: HandleState::ReadyToStep,
            consumed: 0,
            stop_token: cfg.stop_token,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state == HandleState::Finished
    }

    /// Simulates an engine crash: every later call fails.
    pub fn kill(&mut self) {
        self.state = HandleState::Killed;
    }
}

impl Engine for EngineHandle<'_> {
    fn step(&mut self) -> Result<EngineOutput> {
        match self.state {
            HandleState::ReadyToStep => {}
            HandleState::AwaitingResume => return Err(Error::State("step before resume".into())),
            HandleState::Finished => return Err(Error::State("step on a finished engine".into())),
            HandleState::Killed => return Err(Error::State("engine is down".into())),
        }
        let mut last = None;
        for &t in &self.pending {
            last = Some(self.spec.step(&mut self.cache, t)?);
        }
        self.pending.clear();
        let (hidden, logits) = last.ok_or_else(|| Error::State("nothing to feed".into()))?;
        self.state = HandleState::AwaitingResume;
        Ok(EngineOutput { hidden, logits })
    }

    fn resume(&mut self, token: usize) -> Result<()> {
        match self.state {
            HandleState::AwaitingResume => {}
            HandleState::Killed => return Err(Error::State("engine is down".into())),
            _ => return Err(Error::State("resume without a pending step".into())),
        }
        self.consumed += 1;
        if token == self.stop_token {
            self.state = HandleState::Finished;
        } else {
            self.pending.push(token);
            self.state = HandleState::ReadyToStep;
        }
        Ok(())
    }

    fn consumed(&self) -> usize {
        self.consumed
    }
}

/// Lockstep loop: step every engine, fuse, select, broadcast the token.
/// `on_token` sees each step as soon as it is chosen. Engine failures abort
/// with [`Error::Engine`] naming the engine.
pub fn orchestrate<E: Engine>(
    engines: &mut [E],
    gate: &GateNetwork,
    cfg: &GenerationConfig,
    mut on_token: impl FnMut(&StepTrace) -> Result<()>,
) -> Result<Generation> {
    cfg.validate()?;
    if engines.is_empty() {
        return Err(Error::Config("no engines".into()));
    }
    let started = Instant::now();
    let mut selector = Selector::new(cfg);
    let mut out = Generation {
        tokens: Vec::new(),
        trace: Vec::new(),
        stopped: false,
        elapsed: Duration::ZERO,
    };
    let wrap = |index: usize, e: Error| Error::Engine {
        index,
        cause: Box::new(e),
    };
    for _ in 0..cfg.max_new_tokens {
        let consumed = engines[0].consumed();
        if let Some(i) = engines.iter().position(|e| e.consumed() != consumed) {
            return Err(wrap(i, Error::State(format!("engine out of lockstep: {} vs {consumed}", engines[i].consumed()))));
        }
        let outputs = engines
            .iter_mut()
            .enumerate()
            .map(|(i, e)| e.step().map_err(|err| wrap(i, err)))
            .collect::<Result<Vec<_>>>()?;
        let (fused, weights) = fuse_position(gate, cfg.routing, &outputs)?;
        let token = selector.select(&fused)?;
        let trace = StepTrace {
            token,
            top_specialist: argmax(&weights),
            weights,
        };
        on_token(&trace)?;
        out.tokens.push(token);
        out.trace.push(trace);
        for (i, e) in engines.iter_mut().enumerate() {
            e.resume(token).map_err(|err| wrap(i, err))?;
        }
        if token == cfg.stop_token {
            out.stopped = true;
            break;
        }
    }
    out.elapsed = started.elapsed();
    Ok(out)
}

/// Builds one handle per specialist of `model` and runs [`orchestrate`].
pub fn orchestrate_model(
    model: &FusedModel,
    instruction: &str,
    cfg: &GenerationConfig,
    on_token: impl FnMut(&StepTrace) -> Result<()>,
) -> Result<Generation> {
    let mut handles = model
        .specialists
        .iter()
        .map(|s| EngineHandle::new(s, instruction, cfg))
        .collect::<Result<Vec<_>>>()?;
    orchestrate(&mut handles, &model.gate, cfg, on_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuser::tests::random_model;

    fn greedy(n: usize) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: n,
            ..Default::default()
        }
    }

    #[test]
    fn orchestrated_matches_monolithic() {
        let m = random_model(1);
        for prompt in ["Compute: 3+4", "The dog", "fn f(x)"] {
            let a = generate(&m, prompt, &greedy(12)).unwrap();
            let b = orchestrate_model(&m, prompt, &greedy(12), |_| Ok(())).unwrap();
            assert_eq!(a.tokens, b.tokens);
            for (x, y) in a.trace.iter().zip(&b.trace) {
                for (p, q) in x.weights.iter().zip(&y.weights) {
                    assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn forced_routing_matches_single_specialist() {
        let m = random_model(2);
        for s in 0..3 {
            let cfg = GenerationConfig {
                routing: Routing::Forced(s),
                ..greedy(10)
            };
            let fused = generate(&m, "Compute: 1+1", &cfg).unwrap();
            let alone = generate_single(&m.specialists[s], "Compute: 1+1", &greedy(10)).unwrap();
            assert_eq!(fused.tokens, alone.tokens);
        }
    }

    #[test]
    fn single_engine_is_degenerate_fusion() {
        let m = random_model(3);
        let spec = &m.specialists[1];
        let mut handles = vec![EngineHandle::new(spec, "while x", &greedy(8)).unwrap()];
        let out = orchestrate(&mut handles, &m.gate, &greedy(8), |_| Ok(())).unwrap();
        assert_eq!(out.tokens, generate_single(spec, "while x", &greedy(8)).unwrap().tokens);
        assert!(out.trace.iter().all(|t| t.weights == [1.0]));
    }

    #[test]
    fn deterministic_and_sampled() {
        let m = random_model(4);
        assert_eq!(generate(&m, "Hi", &greedy(6)).unwrap().tokens, generate(&m, "Hi", &greedy(6)).unwrap().tokens);
        let cfg = GenerationConfig {
            temperature: 1.0,
            top_k: Some(5),
            seed: 9,
            ..greedy(6)
        };
        let a = generate(&m, "Hi", &cfg).unwrap();
        assert_eq!(a.tokens, generate(&m, "Hi", &cfg).unwrap().tokens);
        assert_eq!(a.tokens, orchestrate_model(&m, "Hi", &cfg, |_| Ok(())).unwrap().tokens);
    }

    #[test]
    fn protocol_discipline() {
        let m = random_model(5);
        let mut h = EngineHandle::new(&m.specialists[0], "a", &greedy(4)).unwrap();
        let a = h.step().unwrap();
        assert!(matches!(h.step(), Err(Error::State(_))));
        h.resume(7).unwrap();
        h.step().unwrap();
        h.resume(Tokenizer::EOS).unwrap();
        assert!(h.is_finished());
        assert!(matches!(h.step(), Err(Error::State(_))));
        assert!(matches!(h.resume(1), Err(Error::State(_))));
        let mut twin = EngineHandle::new(&m.specialists[0], "a", &greedy(4)).unwrap();
        assert_eq!(twin.step().unwrap(), a);
    }

    struct Flaky<'a> {
        inner: EngineHandle<'a>,
        die_at: usize,
    }

    impl Engine for Flaky<'_> {
        fn step(&mut self) -> Result<EngineOutput> {
            if self.inner.consumed() == self.die_at {
                self.inner.kill();
            }
            self.inner.step()
        }
        fn resume(&mut self, token: usize) -> Result<()> {
            self.inner.resume(token)
        }
        fn consumed(&self) -> usize {
            self.inner.consumed()
        }
    }

    #[test]
    fn engine_failure_is_reported_with_index() {
        let m = random_model(6);
        let cfg = GenerationConfig {
            stop_token: usize::MAX,
            ..greedy(8)
        };
        let mut engines: Vec<Flaky> = m
            .specialists
            .iter()
            .enumerate()
            .map(|(i, s)| Flaky {
                inner: EngineHandle::new(s, "x", &cfg).unwrap(),
                die_at: if i == 2 { 3 } else { usize::MAX },
            })
            .collect();
        let mut streamed = 0;
        let err = orchestrate(&mut engines, &m.gate, &cfg, |_| {
            streamed += 1;
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Engine { index: 2, .. }), "{err}");
        assert_eq!(streamed, 3);
    }

    #[test]
    fn context_overflow() {
        let m = random_model(7);
        let long = "x".repeat(155);
        assert!(matches!(generate(&m, &long, &greedy(10)), Err(Error::Length { .. })));
        assert!(matches!(
            EngineHandle::new(&m.specialists[0], &long, &greedy(10)),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn selector_respects_top_k() {
        let cfg = GenerationConfig {
            temperature: 2.0,
            top_k: Some(2),
            ..Default::default()
        };
        let mut sel = Selector::new(&cfg);
        let logits = [0.0, 5.0, 4.9, -1.0, 3.0];
        for _ in 0..200 {
            let t = sel.select(&logits).unwrap();
            assert!(t == 1 || t == 2);
        }
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
