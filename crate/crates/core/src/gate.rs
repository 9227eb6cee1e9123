//! Shared gating network and token-level logit fusion.
//!
//! Every specialist's hidden state at a position is scored by the same
//! two-layer network; the S scores are softmaxed over the specialist axis and
//! used as convex weights on the specialists' logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numcore::{self, kernels, Graph, Tensor, Var};
use crate::params::ParamSet;

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

/// `score(h) = relu(h w1 + b1) w2 + b2`.
///
/// Init: `w1 ~ N(0, 1/d_model)`, everything else zero, so every score starts
/// at exactly zero and the initial fusion weights are uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNetwork {
    pub params: ParamSet,
}

impl GateNetwork {
    pub fn init(d_model: usize, d_gate: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || d_gate == 0 {
            return Err(Error::Config("gate widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("w1", Tensor::randn(&[d_model, d_gate], 1.0 / (d_model as f64).sqrt(), &mut rng));
        params.push("b1", Tensor::zeros(&[d_gate]));
        params.push("w2", Tensor::zeros(&[d_gate, 1]));
        params.push("b2", Tensor::zeros(&[1]));
        Ok(GateNetwork { params })
    }

    pub fn d_model(&self) -> usize {
        self.params.tensors()[W1].shape()[0]
    }

    pub fn d_gate(&self) -> usize {
        self.params.tensors()[W1].shape()[1]
    }

    /// Scores each row of `h: [T, d_model]`, giving `[T, 1]`.
    pub fn score(&self, h: &Tensor) -> Result<Tensor> {
        let (t, d) = h.dims2()?;
        if d != self.d_model() {
            return Err(Error::Dimension(format!("gate expects width {}, got {d}", self.d_model())));
        }
        let p = self.params.tensors();
        let dg = self.d_gate();
        let mut a = kernels::matmul(t, d, dg, h.data(), p[W1].data());
        for row in a.chunks_exact_mut(dg) {
            for (x, b) in row.iter_mut().zip(p[B1].data()) {
                *x = (*x + b).max(0.0);
            }
        }
        let mut s = kernels::matmul(t, dg, 1, &a, p[W2].data());
        s.iter_mut().for_each(|x| *x += p[B2].data()[0]);
        Tensor::new(vec![t, 1], s)
    }

    /// Graph version of [`GateNetwork::score`]; `vars` come from
    /// `self.params.to_graph`.
    pub fn score_graph(&self, g: &mut Graph, vars: &[Var], h: Var) -> Result<Var> {
        let d = g.value(h).dims2()?.1;
        if d != self.d_model() {
            return Err(Error::Dimension(format!("gate expects width {}, got {d}", self.d_model())));
        }
        let a = g.matmul(h, vars[W1])?;
        let a = g.add_row(a, vars[B1])?;
        let a = g.relu(a)?;
        let s = g.matmul(a, vars[W2])?;
        g.add_row(s, vars[B2])
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        self.params.write_into(ck, prefix);
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str, d_model: usize, d_gate: usize) -> Result<Self> {
        let mut gate = GateNetwork::init(d_model, d_gate, 0)?;
        gate.params.read_from(ck, prefix)?;
        Ok(gate)
    }
}

/// Per-position fusion weights, `[T, S]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    specialists: usize,
    values: Vec<f64>,
}

impl GateWeights {
    pub fn new(specialists: usize, values: Vec<f64>) -> Result<Self> {
        if specialists == 0 || values.len() % specialists != 0 {
            return Err(Error::Dimension(format!("{} weights for {specialists} specialists", values.len())));
        }
        Ok(GateWeights { specialists, values })
    }

    /// `positions` rows of the one-hot vector on `s`.
    pub fn one_hot(positions: usize, specialists: usize, s: usize) -> Self {
        let mut values = vec![0.0; positions * specialists];
        for t in 0..positions {
            values[t * specialists + s] = 1.0;
        }
        GateWeights { specialists, values }
    }

    pub fn num_specialists(&self) -> usize {
        self.specialists
    }

    pub fn num_positions(&self) -> usize {
        self.values.len() / self.specialists
    }

    pub fn position(&self, t: usize) -> &[f64] {
        &self.values[t * self.specialists..(t + 1) * self.specialists]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.specialists)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Row-wise softmax of `scores: [T, S]` over the specialist axis.
pub fn fuse_weights(scores: &Tensor) -> Result<GateWeights> {
    let (_, s) = scores.dims2()?;
    if s < 2 {
        return Err(Error::Dimension(format!("fusion needs at least 2 specialists, got {s}")));
    }
    softmax_rows(scores.data(), s)
}

/// Like [`fuse_weights`] but accepts S = 1 (weight 1 everywhere).
pub(crate) fn softmax_rows(scores: &[f64], s: usize) -> Result<GateWeights> {
    let mut values = Vec::with_capacity(scores.len());
    for row in scores.chunks_exact(s) {
        values.extend(numcore::softmax(row)?);
    }
    GateWeights::new(s, values)
}

/// `out[t] = sum_s weights[t, s] * logits[s][t]`.
pub fn fuse_logits(weights: &GateWeights, logits: &[&Tensor]) -> Result<Tensor> {
    if logits.len() != weights.num_specialists() {
        return Err(Error::Dimension(format!(
            "{} logit sets for {} weight columns",
            logits.len(),
            weights.num_specialists()
        )));
    }
    let (t, v) = logits[0].dims2()?;
    if logits.iter().any(|l| l.shape() != [t, v]) {
        return Err(Error::Dimension("specialist logits differ in shape".into()));
    }
    if t != weights.num_positions() {
        return Err(Error::Dimension(format!("{} weight rows for {t} logit rows", weights.num_positions())));
    }
    let mut out = vec![0.0; t * v];
    for (r, w) in weights.rows().enumerate() {
        let dst = &mut out[r * v..(r + 1) * v];
        for (l, &ws) in logits.iter().zip(w) {
            dst.iter_mut().zip(l.row(r)).for_each(|(o, x)| *o += ws * x);
        }
    }
    Tensor::new(vec![t, v], out)
}
