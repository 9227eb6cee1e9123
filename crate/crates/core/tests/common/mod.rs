//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenfuse::data::{Domain, Tokenizer};
use tokenfuse::fuser::FusedModel;
use tokenfuse::gate::GateNetwork;
use tokenfuse::lm::{LmConfig, Specialist};
use tokenfuse::numcore::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_lm() -> LmConfig {
    LmConfig {
        vocab_size: Tokenizer.vocab_size(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 176,
        feedforward_mult: 2,
    }
}

/// Overwrites every tensor with `N(0, std)` noise, norm gains included.
pub fn scramble(tensors: &mut [Tensor], std: f64, seed: u64) {
    let mut r = rng(seed);
    for t in tensors {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, std, &mut r);
    }
}

/// Specialist with a random (non-zero) output head so that its logits carry
/// information.
pub fn random_specialist(cfg: &LmConfig, domain: Domain, seed: u64) -> Specialist {
    let mut s = Specialist::init(cfg, domain, seed).unwrap();
    let n = s.params.len();
    scramble(&mut s.params.tensors_mut()[n - 1..], 0.7, seed ^ 0x5eed);
    s
}

pub fn random_gate(d: usize, seed: u64) -> GateNetwork {
    let mut g = GateNetwork::init(d, d, seed).unwrap();
    scramble(g.params.tensors_mut(), 0.8, seed ^ 0x6a7e);
    g
}

/// Three random specialists (text, code, math) and a random gate.
pub fn random_model(cfg: &LmConfig, seed: u64) -> FusedModel {
    let specs = Domain::ALL
        .iter()
        .enumerate()
        .map(|(i, &d)| random_specialist(cfg, d, seed * 10 + i as u64))
        .collect();
    FusedModel::new(specs, random_gate(cfg.d_model, seed + 1000)).unwrap()
}

/// Scalar-loop oracle for fused logits: `out[t][v] = sum_s w[t][s] * o_s[t][v]`.
pub fn fuse_loop(weights: &[Vec<f64>], logits: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let (t_len, v_len) = (logits[0].len(), logits[0][0].len());
    let mut out = vec![vec![0.0; v_len]; t_len];
    for t in 0..t_len {
        for v in 0..v_len {
            let mut acc = 0.0;
            for s in 0..logits.len() {
                acc += weights[t][s] * logits[s][t][v];
            }
            out[t][v] = acc;
        }
    }
    out
}

/// Recursive-descent evaluator for `+ - *` over non-negative integers.
pub fn evaluate(expr: &str) -> Option<i64> {
    fn number(s: &[u8], i: &mut usize) -> Option<i64> {
        let start = *i;
        while *i < s.len() && s[*i].is_ascii_digit() {
            *i += 1;
        }
        std::str::from_utf8(&s[start..*i]).ok()?.parse().ok()
    }
    fn term(s: &[u8], i: &mut usize) -> Option<i64> {
        let mut v = number(s, i)?;
        while *i < s.len() && s[*i] == b'*' {
            *i += 1;
            v = v.checked_mul(number(s, i)?)?;
        }
        Some(v)
    }
    let s = expr.trim().as_bytes();
    let mut i = 0;
    let mut v = term(s, &mut i)?;
    while i < s.len() {
        let op = s[i];
        i += 1;
        let rhs = term(s, &mut i)?;
        v = match op {
            b'+' => v + rhs,
            b'-' => v - rhs,
            _ => return None,
        };
    }
    Some(v)
}

/// True when a generated math response states `expr=value` with the value
/// the evaluator computes for `expr`.
pub fn arithmetic_correct(expr: &str, response: &str) -> bool {
    let line = response.lines().next().unwrap_or("");
    let Some((lhs, rhs)) = line.split_once('=') else {
        return false;
    };
    let digits: String = rhs
        .chars()
        .enumerate()
        .take_while(|(i, c)| c.is_ascii_digit() || (*i == 0 && *c == '-'))
        .map(|(_, c)| c)
        .collect();
    lhs.trim() == expr && digits.parse::<i64>().ok() == evaluate(expr)
}

/// Collects pass/fail lines and prints each as it lands.
#[derive(Default)]
pub struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    pub fn check(&mut self, name: &str, ok: bool, detail: impl AsRef<str>) -> bool {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {}", detail.as_ref());
        self.lines.push((name.to_string(), ok));
        ok
    }

    pub fn failures(&self) -> Vec<&str> {
        self.lines.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect()
    }
}
