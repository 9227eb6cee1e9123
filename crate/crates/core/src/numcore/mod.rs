//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! The op set is exactly what the specialist LM, the gate and the fused loss
//! need. Graphs are single-use: build one per forward pass, consume it with
//! one backward pass.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Graph-free softmax of a single vector.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input".into()));
    }
    let mut out = values.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite differences of a scalar function built over fresh graphs.
    fn check_grads<F>(inputs: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |ts: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
            let out = build(&mut g, &vars).unwrap();
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();

        let h = 1e-4;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; input.numel()]);
            let mut numeric = vec![0.0; input.numel()];
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
                .max(1e-12);
            assert!(diff / scale < tol, "input {i}: rel err {} ({analytic:?} vs {numeric:?})", diff / scale);
        }
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_scalar_cases() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
        let b = g.constant(Tensor::matrix(&[&[2.0, 3.0], &[4.0, 5.0]]).unwrap()).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

        let x = g.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap()).unwrap();
        let y = g.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap()).unwrap();
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(7);
        let a = Tensor::randn(&[5, 7], 1.0, &mut r);
        let b = Tensor::randn(&[7, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let big = softmax(&[1000.0, 0.0, 0.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);

        // 40-digit mpmath evaluation
        let want = [0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }

        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_either_axis() {
        let x = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let rows = g.softmax(v, 1).unwrap();
        let cols = g.softmax(v, 0).unwrap();
        let r = g.value(rows).data();
        assert!((r[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = g.value(cols).data();
        for j in 0..3 {
            assert!((c[j] + c[3 + j] - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax(v, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let ce = g.cross_entropy(uniform, &[0, 3, 1], &[true; 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-9);

        let mut sharp = Tensor::zeros(&[2, 4]);
        sharp.data_mut()[2] = 100.0;
        sharp.data_mut()[4 + 1] = 100.0;
        let s = g.constant(sharp).unwrap();
        let ce = g.cross_entropy(s, &[2, 1], &[true, true]).unwrap();
        assert!(g.value(ce).item() < 1e-40);

        assert!(matches!(g.cross_entropy(s, &[2, 1], &[false, false]), Err(Error::EmptyLoss)));
        assert!(matches!(g.cross_entropy(s, &[4, 1], &[true, true]), Err(Error::Vocab { .. })));
        // out-of-range targets are fine where masked out
        assert!(g.cross_entropy(s, &[99, 1], &[false, true]).is_ok());
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let mut r = rng(11);
        let logits = Tensor::randn(&[6, 8], 2.0, &mut r);
        let targets = [3usize, 0, 7, 7, 1, 5];
        let mask = [true, false, true, true, false, true];
        let mut want = 0.0;
        let mut n = 0.0;
        for i in 0..6 {
            if !mask[i] {
                continue;
            }
            let row = logits.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[targets[i]];
            n += 1.0;
        }
        let mut g = Graph::new();
        let l = g.constant(logits).unwrap();
        let ce = g.cross_entropy(l, &targets, &mask).unwrap();
        assert!((g.value(ce).item() - want / n).abs() < 1e-9);
    }

    #[test]
    fn masked_positions_get_zero_gradient() {
        let mut r = rng(3);
        let mut g = Graph::new();
        let l = g.leaf(Tensor::randn(&[4, 5], 1.0, &mut r), true).unwrap();
        let ce = g.cross_entropy(l, &[1, 2, 3, 4], &[true, false, true, false]).unwrap();
        let grads = g.backward(ce).unwrap();
        let d = grads.get(l).unwrap();
        assert!(d.row(1).iter().chain(d.row(3)).all(|v| *v == 0.0));
        assert!(d.row(0).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut r = rng(5);
        let x = Tensor::randn(&[3, 2], 1.0, &mut r);

        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true).unwrap();
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|d| *d == 1.0));

        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true).unwrap();
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        for (a, b) in grads.get(v).unwrap().data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphState(_))));
        assert!(matches!(g.constant(Tensor::scalar(1.0)), Err(Error::GraphState(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(g.backward(v), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_branches_allocate_no_buffers() {
        let mut g = Graph::new();
        let frozen = g.constant(Tensor::full(&[2, 3], 0.5)).unwrap();
        let w = g.leaf(Tensor::full(&[3, 1], 0.1), true).unwrap();
        let h = g.relu(frozen).unwrap();
        let s = g.matmul(h, w).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(!g.requires_grad(h));
        assert!(grads.get(frozen).is_none());
        // l, s, w
        assert_eq!(grads.buffers_allocated(), 3);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 3.0), true).unwrap();
        let a = g.scale(x, 2.0).unwrap();
        let b = g.add(a, x).unwrap();
        let s = g.sum(b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gradcheck_matmul_bias_relu() {
        let mut r = rng(21);
        let inputs = [
            Tensor::randn(&[4, 3], 1.0, &mut r),
            Tensor::randn(&[3, 5], 1.0, &mut r),
            Tensor::randn(&[5], 1.0, &mut r),
        ];
        check_grads(
            &inputs,
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let b = g.add_row(m, v[2])?;
                let r = g.relu(b)?;
                let sq = g.mul(r, r)?;
                g.sum(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn gradcheck_rmsnorm_embedding_select() {
        let mut r = rng(22);
        let inputs = [Tensor::randn(&[6, 4], 1.0, &mut r), Tensor::randn(&[4], 1.0, &mut r)];
        let target = Tensor::randn(&[3, 4], 1.0, &mut r);
        check_grads(
            &inputs,
            |g, v| {
                let e = g.embedding(v[0], &[5, 1, 1, 0])?;
                let n = g.rmsnorm(e, v[1])?;
                let s = g.select_rows(n, &[3, 1, 1])?;
                let t = g.constant(target.clone())?;
                let p = g.mul(s, t)?;
                g.sum(p)
            },
            1e-4,
        );
    }

    #[test]
    fn gradcheck_attention() {
        let mut r = rng(23);
        let inputs = [
            Tensor::randn(&[5, 6], 1.0, &mut r),
            Tensor::randn(&[5, 6], 1.0, &mut r),
            Tensor::randn(&[5, 6], 1.0, &mut r),
        ];
        let probe = Tensor::randn(&[5, 6], 1.0, &mut r);
        check_grads(
            &inputs,
            |g, v| {
                let a = g.causal_self_attention(v[0], v[1], v[2], 3)?;
                let p = g.constant(probe.clone())?;
                let m = g.mul(a, p)?;
                g.sum(m)
            },
            1e-4,
        );
    }

    #[test]
    fn gradcheck_softmax_concat_fuse_ce() {
        let mut r = rng(24);
        let inputs = [
            Tensor::randn(&[4, 1], 1.0, &mut r),
            Tensor::randn(&[4, 1], 1.0, &mut r),
            Tensor::randn(&[4, 1], 1.0, &mut r),
            Tensor::randn(&[4, 7], 1.0, &mut r),
            Tensor::randn(&[4, 7], 1.0, &mut r),
            Tensor::randn(&[4, 7], 1.0, &mut r),
        ];
        check_grads(
            &inputs,
            |g, v| {
                let scores = g.concat_scores(&v[0..3])?;
                let w = g.softmax(scores, 1)?;
                let f = g.fuse_logits(w, &v[3..6])?;
                g.cross_entropy(f, &[1, 6, 0, 2], &[true, true, false, true])
            },
            1e-4,
        );
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut r = rng(99);
            let mut g = Graph::new();
            let q = g.leaf(Tensor::randn(&[7, 8], 1.0, &mut r), true).unwrap();
            let a = g.causal_self_attention(q, q, q, 2).unwrap();
            let s = g.sum(a).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(a).clone(), grads.get(q).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::new();
        assert!(matches!(g.leaf(Tensor::scalar(f64::NAN), true), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn softmax_is_a_simplex_point(xs in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let p = softmax(&xs).unwrap();
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn uniform_cross_entropy_is_ln_v(v in 1usize..200, t in 1usize..6) {
            let mut g = Graph::new();
            let l = g.constant(Tensor::zeros(&[t, v])).unwrap();
            let targets: Vec<usize> = (0..t).map(|i| i % v).collect();
            let ce = g.cross_entropy(l, &targets, &vec![true; t]).unwrap();
            prop_assert!((g.value(ce).item() - (v as f64).ln()).abs() < 1e-9);
        }
    }
}
