use super::{layer_idx, Specialist, ATTN_NORM, MLP_NORM, W1, W2, WK, WO, WQ, WV};
use crate::error::{Error, Result};
use crate::numcore::kernels;

/// Per-sequence key/value cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Number of positions already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn vec_mat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    kernels::matmul(1, x.len(), n, x, w)
}

impl Specialist {
    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers)
    }

    /// Feeds one token at position `cache.len()`; returns that position's
    /// `(hidden, logits)`.
    pub fn step(&self, cache: &mut KvCache, token: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = &self.config;
        if cache.keys.len() != c.n_layers {
            return Err(Error::State("cache built for a different model".into()));
        }
        if cache.len >= c.max_seq_len {
            return Err(Error::Length {
                len: cache.len + 1,
                max: c.max_seq_len,
            });
        }
        if token >= c.vocab_size {
            return Err(Error::Vocab {
                id: token,
                vocab: c.vocab_size,
            });
        }
        let p = self.params.tensors();
        let d = c.d_model;
        let mut x: Vec<f64> = p[0].row(token).iter().zip(p[1].row(cache.len)).map(|(a, b)| a + b).collect();
        for l in 0..c.n_layers {
            let w = |i| p[layer_idx(l, i)].data();
            let (h, _) = kernels::rmsnorm(&x, w(ATTN_NORM), 1);
            let q = vec_mat(&h, w(WQ), d);
            cache.keys[l].extend(vec_mat(&h, w(WK), d));
            cache.values[l].extend(vec_mat(&h, w(WV), d));
            let a = kernels::attend_one(&q, &cache.keys[l], &cache.values[l], cache.len + 1, d, c.n_heads);
            let o = vec_mat(&a, w(WO), d);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            let (h, _) = kernels::rmsnorm(&x, w(MLP_NORM), 1);
            let mut up = vec_mat(&h, w(W1), c.d_ff());
            up.iter_mut().for_each(|v| *v = v.max(0.0));
            let down = vec_mat(&up, w(W2), d);
            x.iter_mut().zip(&down).for_each(|(x, o)| *x += o);
        }
        cache.len += 1;
        let n = p.len();
        let (hidden, _) = kernels::rmsnorm(&x, p[n - 2].data(), 1);
        let logits = vec_mat(&hidden, p[n - 1].data(), c.vocab_size);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cached decoding step".into()));
        }
        Ok((hidden, logits))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{Domain, Tokenizer};
    use crate::lm::tests::tiny_config;
    use crate::numcore::Tensor;

    #[test]
    fn cached_steps_match_full_recompute() {
        let mut s = Specialist::init(&tiny_config(), Domain::Text, 8).unwrap();
        let n = s.params.len();
        s.params.tensors_mut()[n - 1] = Tensor::randn(&[16, 97], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let tokens = Tokenizer.encode("User: hi\nAssistant: hello there").unwrap();
        let full = s.forward(&tokens).unwrap();
        let mut cache = s.new_cache();
        for (i, &t) in tokens.iter().enumerate() {
            let (h, l) = s.step(&mut cache, t).unwrap();
            for (a, b) in l.iter().zip(full.logits.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in h.iter().zip(full.hidden.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(cache.len(), tokens.len());
    }

    #[test]
    fn cache_overflow() {
        let s = Specialist::init(&tiny_config(), Domain::Text, 8).unwrap();
        let mut cache = s.new_cache();
        for _ in 0..160 {
            s.step(&mut cache, 1).unwrap();
        }
        assert!(matches!(s.step(&mut cache, 1), Err(Error::Length { .. })));
    }
}
