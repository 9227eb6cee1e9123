use super::Specialist;
use crate::data::{wrap_example, Tokenizer, TrainingExample, WrappedExample};
use crate::error::{Error, Result};
use crate::numcore::{kernels, Tensor};

/// Anything that assigns a next-token distribution to response tokens.
pub trait ResponseScorer {
    /// Summed negative log-likelihood of the response tokens (EOS included)
    /// and their count.
    fn response_nll(&self, ex: &TrainingExample) -> Result<(f64, usize)>;
}

/// `exp` of the token-weighted mean response cross-entropy over `examples`.
pub fn perplexity<M: ResponseScorer + ?Sized>(model: &M, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let mut nll = 0.0;
    let mut count = 0;
    for ex in examples {
        let (n, c) = model.response_nll(ex)?;
        nll += n;
        count += c;
    }
    Ok((nll / count as f64).exp())
}

/// NLL of `targets` under the rows of `logits` listed in `rows`.
pub(crate) fn rows_nll(logits: &Tensor, rows: std::ops::Range<usize>, targets: &[usize]) -> f64 {
    rows.zip(targets)
        .map(|(r, &t)| {
            let row = logits.row(r);
            kernels::log_sum_exp(row) - row[t]
        })
        .sum()
}

impl Specialist {
    pub fn wrap(&self, ex: &TrainingExample) -> Result<WrappedExample> {
        wrap_example(ex, std::slice::from_ref(&self.template), &Tokenizer, self.config.max_seq_len)
    }
}

impl ResponseScorer for Specialist {
    fn response_nll(&self, ex: &TrainingExample) -> Result<(f64, usize)> {
        let w = self.wrap(ex)?;
        let out = self.forward(w.inputs(0))?;
        Ok((rows_nll(&out.logits, w.response_positions(0), w.response_tokens()), w.response_len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, Domain};
    use crate::lm::tests::tiny_config;
    use crate::numcore::Graph;

    #[test]
    fn uniform_model_has_perplexity_v() {
        let s = Specialist::init(&tiny_config(), Domain::Math, 0).unwrap();
        let c = synth_corpus(Domain::Math, 5, 5, 1).unwrap();
        let p = perplexity(&s, &c.held_out).unwrap();
        assert!((p - 97.0).abs() < 1e-9);
    }

    #[test]
    fn empty_split_is_rejected() {
        let s = Specialist::init(&tiny_config(), Domain::Math, 0).unwrap();
        assert!(matches!(perplexity(&s, &[]), Err(Error::EmptyLoss)));
    }

    #[test]
    fn matches_masked_cross_entropy() {
        use rand::SeedableRng;
        let mut s = Specialist::init(&tiny_config(), Domain::Code, 0).unwrap();
        let n = s.params.len();
        s.params.tensors_mut()[n - 1] =
            Tensor::randn(&[16, 97], 0.7, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let c = synth_corpus(Domain::Code, 3, 3, 2).unwrap();
        let ppl = perplexity(&s, &c.held_out).unwrap();
        // oracle: masked cross_entropy on each example, weighted by span length
        let (mut total, mut count) = (0.0, 0usize);
        for ex in &c.held_out {
            let w = s.wrap(ex).unwrap();
            let inputs = w.inputs(0);
            let out = s.forward(inputs).unwrap();
            let range = w.response_positions(0);
            let targets: Vec<usize> = w.per_specialist_tokens[0][1..].to_vec();
            let mask: Vec<bool> = (0..inputs.len()).map(|i| range.contains(&i)).collect();
            let mut g = Graph::new();
            let l = g.constant(out.logits).unwrap();
            let ce = g.cross_entropy(l, &targets, &mask).unwrap();
            total += g.value(ce).item() * w.response_len() as f64;
            count += w.response_len();
        }
        assert!((ppl - (total / count as f64).exp()).abs() < 1e-6);
        assert!(ppl >= 1.0);
    }
}
