//! S specialists plus one shared gate, fused on response positions only.

use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{wrap_example, PromptTemplate, Tokenizer, TrainingExample, WrappedExample};
use crate::error::{Error, Result};
use crate::gate::{fuse_logits, softmax_rows, GateNetwork, GateWeights};
use crate::lm::{ForwardVars, ResponseScorer, Specialist};
use crate::numcore::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub specialists: Vec<Specialist>,
    pub gate: GateNetwork,
}

/// Where fusion weights come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// Softmax of the gate scores.
    #[default]
    Gate,
    /// Weight 1 on one specialist, bypassing the gate.
    Forced(usize),
}

impl Routing {
    pub fn check(self, specialists: usize) -> Result<()> {
        match self {
            Routing::Forced(s) if s >= specialists => {
                Err(Error::Config(format!("forced specialist {s} of {specialists}")))
            }
            _ => Ok(()),
        }
    }

    /// Weights for one position given its S gate scores.
    pub fn weights(self, scores: &[f64]) -> Result<Vec<f64>> {
        match self {
            Routing::Gate => crate::numcore::softmax(scores),
            Routing::Forced(s) => {
                let mut w = vec![0.0; scores.len()];
                w[s] = 1.0;
                Ok(w)
            }
        }
    }
}

/// Fused forward result over the R response positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedOutput {
    /// `[R, V]`
    pub fused_logits: Tensor,
    pub weights: GateWeights,
    /// Each specialist's `[R, V]` logits, kept only on request.
    pub specialist_logits: Option<Vec<Tensor>>,
}

impl FusedModel {
    pub fn new(specialists: Vec<Specialist>, gate: GateNetwork) -> Result<Self> {
        if specialists.len() < 2 {
            return Err(Error::Config(format!("fusion needs at least 2 specialists, got {}", specialists.len())));
        }
        let c0 = &specialists[0].config;
        for (i, s) in specialists.iter().enumerate() {
            let c = &s.config;
            if c.vocab_size != c0.vocab_size || c.d_model != c0.d_model || c.max_seq_len != c0.max_seq_len {
                return Err(Error::Config(format!("specialist {i} config differs from specialist 0")));
            }
        }
        if gate.d_model() != c0.d_model {
            return Err(Error::Config(format!("gate width {} vs d_model {}", gate.d_model(), c0.d_model)));
        }
        Ok(FusedModel { specialists, gate })
    }

    /// Fresh gate with `d_gate = d_model`.
    pub fn with_new_gate(specialists: Vec<Specialist>, seed: u64) -> Result<Self> {
        let d = specialists
            .first()
            .map(|s| s.config.d_model)
            .ok_or_else(|| Error::Config("no specialists".into()))?;
        FusedModel::new(specialists, GateNetwork::init(d, d, seed)?)
    }

    pub fn num_specialists(&self) -> usize {
        self.specialists.len()
    }

    pub fn max_seq_len(&self) -> usize {
        self.specialists[0].config.max_seq_len
    }

    pub fn templates(&self) -> Vec<PromptTemplate> {
        self.specialists.iter().map(|s| s.template.clone()).collect()
    }

    pub fn wrap(&self, ex: &TrainingExample) -> Result<WrappedExample> {
        wrap_example(ex, &self.templates(), &Tokenizer, self.max_seq_len())
    }

    fn check_example(&self, ex: &WrappedExample) -> Result<()> {
        if ex.num_specialists() != self.num_specialists() {
            return Err(Error::Alignment(format!(
                "example rendered for {} specialists, model has {}",
                ex.num_specialists(),
                self.num_specialists()
            )));
        }
        ex.validate()
    }

    pub fn fused_forward(&self, ex: &WrappedExample, keep_specialist_logits: bool) -> Result<FusedOutput> {
        self.fused_forward_routed(ex, Routing::Gate, keep_specialist_logits)
    }

    pub fn fused_forward_routed(
        &self,
        ex: &WrappedExample,
        routing: Routing,
        keep_specialist_logits: bool,
    ) -> Result<FusedOutput> {
        self.check_example(ex)?;
        routing.check(self.num_specialists())?;
        let s_count = self.num_specialists();
        let r = ex.response_len();
        let mut scores = vec![0.0; r * s_count];
        let mut logits = Vec::with_capacity(s_count);
        for (s, spec) in self.specialists.iter().enumerate() {
            let out = spec.forward(ex.inputs(s))?;
            let rows: Vec<usize> = ex.response_positions(s).collect();
            let hidden = gather(&out.hidden, &rows);
            let score = self.gate.score(&hidden)?;
            for (t, v) in score.data().iter().enumerate() {
                scores[t * s_count + s] = *v;
            }
            logits.push(gather(&out.logits, &rows));
        }
        let weights = match routing {
            Routing::Gate => softmax_rows(&scores, s_count)?,
            Routing::Forced(s) => GateWeights::one_hot(r, s_count, s),
        };
        let fused_logits = fuse_logits(&weights, &logits.iter().collect::<Vec<_>>())?;
        Ok(FusedOutput {
            fused_logits,
            weights,
            specialist_logits: keep_specialist_logits.then_some(logits),
        })
    }

    /// Mean response-token cross-entropy of the fused model.
    pub fn fused_loss(&self, ex: &WrappedExample) -> Result<f64> {
        let out = self.fused_forward(ex, false)?;
        let r = ex.response_len();
        if r == 0 {
            return Err(Error::EmptyLoss);
        }
        Ok(crate::lm::rows_nll(&out.fused_logits, 0..r, ex.response_tokens()) / r as f64)
    }

    /// Records the fused loss on `g` from per-specialist forward outputs
    /// (full-sequence `[T_s, d]` hidden and `[T_s, V]` logits). Only the
    /// response rows are gathered; prompt rows get no gradient.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        gate_vars: &[Var],
        outputs: &[ForwardVars],
        ex: &WrappedExample,
    ) -> Result<Var> {
        self.check_example(ex)?;
        let mut scores = Vec::with_capacity(outputs.len());
        let mut logits = Vec::with_capacity(outputs.len());
        for (s, out) in outputs.iter().enumerate() {
            let rows: Vec<usize> = ex.response_positions(s).collect();
            let h = g.select_rows(out.hidden, &rows)?;
            scores.push(self.gate.score_graph(g, gate_vars, h)?);
            logits.push(g.select_rows(out.logits, &rows)?);
        }
        let scores = g.concat_scores(&scores)?;
        let w = g.softmax(scores, 1)?;
        let fused = g.fuse_logits(w, &logits)?;
        let r = ex.response_len();
        g.cross_entropy(fused, ex.response_tokens(), &vec![true; r])
    }

    /// Specialist outputs entered as constants: no specialist gradients.
    pub fn frozen_outputs(&self, g: &mut Graph, ex: &WrappedExample) -> Result<Vec<ForwardVars>> {
        self.specialists
            .iter()
            .enumerate()
            .map(|(s, spec)| {
                let out = spec.forward(ex.inputs(s))?;
                Ok(ForwardVars {
                    hidden: g.constant(out.hidden)?,
                    logits: g.constant(out.logits)?,
                })
            })
            .collect()
    }

    /// Specialist forwards recorded on `g` against their parameter leaves.
    pub fn trainable_outputs(
        &self,
        g: &mut Graph,
        spec_vars: &[Vec<Var>],
        ex: &WrappedExample,
    ) -> Result<Vec<ForwardVars>> {
        self.specialists
            .iter()
            .zip(spec_vars)
            .enumerate()
            .map(|(s, (spec, vars))| spec.forward_graph(g, vars, ex.inputs(s)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let specs: Vec<_> = self.specialists.iter().map(Specialist::meta).collect();
        let mut ck = Checkpoint::new(json!({
            "kind": "fused",
            "specialists": specs,
            "gate": {"d_model": self.gate.d_model(), "d_gate": self.gate.d_gate()},
        }));
        for (i, s) in self.specialists.iter().enumerate() {
            s.params.write_into(&mut ck, &format!("specialist.{i}."));
        }
        self.gate.write_into(&mut ck, "gate.");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "fused" {
            return Err(Error::Checkpoint(format!("expected a fused checkpoint, got {}", ck.meta["kind"])));
        }
        let metas = ck.meta["specialists"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("metadata lacks specialists".into()))?;
        let specialists = metas
            .iter()
            .enumerate()
            .map(|(i, m)| Specialist::from_meta(m, ck, &format!("specialist.{i}.")))
            .collect::<Result<Vec<_>>>()?;
        let dim = |k: &str| {
            ck.meta["gate"][k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("gate.{k} missing")))
        };
        let gate = GateNetwork::read_from(ck, "gate.", dim("d_model")?, dim("d_gate")?)?;
        FusedModel::new(specialists, gate).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl ResponseScorer for FusedModel {
    fn response_nll(&self, ex: &TrainingExample) -> Result<(f64, usize)> {
        let w = self.wrap(ex)?;
        let r = w.response_len();
        Ok((self.fused_loss(&w)? * r as f64, r))
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), d], out).expect("non-empty response span")
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_corpus, Domain};
    use crate::lm::tests::tiny_config;
    use crate::numcore::kernels;

    /// Three tiny specialists with random (non-zero) heads.
    pub(crate) fn random_model(seed: u64) -> FusedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = Domain::ALL
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut s = Specialist::init(&tiny_config(), d, seed + i as u64).unwrap();
                let n = s.params.len();
                s.params.tensors_mut()[n - 1] = Tensor::randn(&[16, 97], 0.5, &mut rng);
                s
            })
            .collect();
        let mut m = FusedModel::with_new_gate(specs, seed).unwrap();
        for t in m.gate.params.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, 0.5, &mut rng);
        }
        m
    }

    pub(crate) fn example(domain: Domain, seed: u64) -> TrainingExample {
        synth_corpus(domain, 1, 1, seed).unwrap().held_out[0].clone()
    }

    #[test]
    fn composition_oracle() {
        let m = random_model(1);
        let ex = m.wrap(&example(Domain::Math, 2)).unwrap();
        let out = m.fused_forward(&ex, true).unwrap();
        let r = ex.response_len();
        assert_eq!(out.fused_logits.shape(), &[r, 97]);
        // specialist forward + gate score + scalar softmax + scalar mix
        let fulls: Vec<_> = m.specialists.iter().enumerate().map(|(s, sp)| sp.forward(ex.inputs(s)).unwrap()).collect();
        for t in 0..r {
            let mut scores = Vec::new();
            for (s, f) in fulls.iter().enumerate() {
                let row = ex.response_positions(s).start + t;
                let h = Tensor::new(vec![1, 16], f.hidden.row(row).to_vec()).unwrap();
                scores.push(m.gate.score(&h).unwrap().data()[0]);
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
            for (a, b) in w.iter().zip(out.weights.position(t)) {
                assert!((a - b).abs() < 1e-12);
            }
            for v in 0..97 {
                let want: f64 = (0..3)
                    .map(|s| w[s] * fulls[s].logits.row(ex.response_positions(s).start + t)[v])
                    .sum();
                assert!((out.fused_logits.row(t)[v] - want).abs() < 1e-9);
            }
        }
        assert_eq!(out.specialist_logits.unwrap().len(), 3);
    }

    #[test]
    fn loss_matches_cross_entropy_oracle() {
        let m = random_model(3);
        let ex = m.wrap(&example(Domain::Text, 4)).unwrap();
        let out = m.fused_forward(&ex, false).unwrap();
        let targets = ex.response_tokens();
        let want: f64 = (0..targets.len())
            .map(|t| kernels::log_sum_exp(out.fused_logits.row(t)) - out.fused_logits.row(t)[targets[t]])
            .sum::<f64>()
            / targets.len() as f64;
        assert!((m.fused_loss(&ex).unwrap() - want).abs() < 1e-9);

        let mut g = Graph::new();
        let gv = m.gate.params.to_graph(&mut g, true).unwrap();
        let outs = m.frozen_outputs(&mut g, &ex).unwrap();
        let l = m.loss_graph(&mut g, &gv, &outs, &ex).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn untrained_loss_is_ln_v() {
        let specs = Domain::ALL.iter().map(|&d| Specialist::init(&tiny_config(), d, 0).unwrap()).collect();
        let m = FusedModel::with_new_gate(specs, 0).unwrap();
        let ex = m.wrap(&example(Domain::Code, 5)).unwrap();
        assert!((m.fused_loss(&ex).unwrap() - 97f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forced_routing_selects_specialist() {
        let m = random_model(6);
        let ex = m.wrap(&example(Domain::Math, 7)).unwrap();
        for s in 0..3 {
            let out = m.fused_forward_routed(&ex, Routing::Forced(s), false).unwrap();
            let own = m.specialists[s].forward(ex.inputs(s)).unwrap();
            let rows: Vec<usize> = ex.response_positions(s).collect();
            assert_eq!(out.fused_logits, gather(&own.logits, &rows));
            assert!(out.weights.position(0)[s] == 1.0);
        }
        assert!(matches!(
            m.fused_forward_routed(&ex, Routing::Forced(3), false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn equal_specialists_ignore_the_gate() {
        let mut m = random_model(12);
        let first = m.specialists[0].clone();
        for s in m.specialists.iter_mut() {
            s.params = first.params.clone();
            s.template = first.template.clone();
        }
        let ex = m.wrap(&example(Domain::Text, 13)).unwrap();
        let a = m.fused_forward(&ex, false).unwrap();
        let own = first.forward(ex.inputs(0)).unwrap();
        let rows: Vec<usize> = ex.response_positions(0).collect();
        let want = gather(&own.logits, &rows);
        for (x, y) in a.fused_logits.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn prompt_rows_get_zero_gradient() {
        let m = random_model(14);
        let ex = m.wrap(&example(Domain::Code, 15)).unwrap();
        let mut g = Graph::new();
        let gv = m.gate.params.to_graph(&mut g, false).unwrap();
        let outs: Vec<ForwardVars> = m
            .specialists
            .iter()
            .enumerate()
            .map(|(s, sp)| {
                let o = sp.forward(ex.inputs(s)).unwrap();
                ForwardVars {
                    hidden: g.leaf(o.hidden, true).unwrap(),
                    logits: g.leaf(o.logits, true).unwrap(),
                }
            })
            .collect();
        let l = m.loss_graph(&mut g, &gv, &outs, &ex).unwrap();
        let grads = g.backward(l).unwrap();
        for (s, o) in outs.iter().enumerate() {
            let span = ex.response_positions(s);
            for var in [o.hidden, o.logits] {
                let gr = grads.get(var).unwrap();
                for r in 0..gr.shape()[0] {
                    let nonzero = gr.row(r).iter().any(|v| *v != 0.0);
                    if !span.contains(&r) {
                        assert!(!nonzero, "specialist {s} prompt row {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn misaligned_example_is_rejected() {
        let m = random_model(8);
        let mut ex = m.wrap(&example(Domain::Code, 9)).unwrap();
        let last = ex.per_specialist_tokens[1].len() - 1;
        ex.per_specialist_tokens[1][last] = 3;
        assert!(matches!(m.fused_forward(&ex, false), Err(Error::Alignment(_))));
        let two = m.wrap(&example(Domain::Code, 9)).unwrap();
        let short = WrappedExample {
            per_specialist_tokens: two.per_specialist_tokens[..2].to_vec(),
            spans: two.spans[..2].to_vec(),
            domain: two.domain,
        };
        assert!(matches!(m.fused_forward(&short, false), Err(Error::Alignment(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = random_model(10);
        let back = FusedModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(FusedModel::from_checkpoint(&m.specialists[0].to_checkpoint()).is_err());
    }
}
