//! Tensors, a reverse-mode tape and momentum SGD.

mod sgd;
mod tape;
mod tensor;

pub use sgd::{sgd_step, SgdConfig, Velocity};
pub use tape::{Gradients, Op, Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_row, standardize_row};
#[cfg(test)]
pub(crate) use tape::matmul_t;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Central differences of `tape`'s final scalar w.r.t. leaf `which`.
    fn finite_diff(tape: &mut Tape, inputs: &[Tensor], which: usize) -> Vec<f64> {
        let h = 1e-5;
        let mut out = Vec::new();
        for k in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let fp = tape.evaluate(&plus).unwrap().item();
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            let fm = tape.evaluate(&minus).unwrap().item();
            out.push((fp - fm) / (2.0 * h));
        }
        tape.evaluate(inputs).unwrap();
        out
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
        for (a, n) in analytic.iter().zip(numeric) {
            let err = crate::gradcheck::relative_error(*a, *n);
            assert!(err < 1e-4, "{what}: analytic {a} vs numeric {n}");
        }
    }

    /// Builds `loss = sum(op(a[, b]) ⊙ w)` and checks every leaf gradient.
    fn check_primitive(
        name: &str,
        seed: u64,
        shape_a: (usize, usize),
        shape_b: Option<(usize, usize)>,
        build: impl Fn(&mut Tape, Var, Option<Var>) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.leaf(rand_tensor(&mut rng, shape_a.0, shape_a.1));
        let b = shape_b.map(|(r, c)| tape.leaf(rand_tensor(&mut rng, r, c)));
        let y = build(&mut tape, a, b);
        let ys = tape.value(y).shape().to_vec();
        let w = tape.leaf(rand_tensor(&mut rng, ys[0], ys.get(1).copied().unwrap_or(1)));
        let w = if ys.len() == 1 {
            let wv = Tensor::new(ys.clone(), tape.value(w).data()[..ys[0]].to_vec()).unwrap();
            tape.leaf(wv)
        } else {
            w
        };
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let leaves = tape.leaves();
        let inputs: Vec<Tensor> = leaves.iter().map(|&l| tape.value(l).clone()).collect();
        let mut check = vec![(a, 0usize)];
        if let Some(b) = b {
            check.push((b, 1));
        }
        for (v, pos) in check {
            let numeric = finite_diff(&mut tape, &inputs, pos);
            assert_close(&grads.get(v), &numeric, name);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let s = t.row_softmax(x).unwrap();
        for v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x), vec![0.25]);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x), vec![1.0; 6]);
    }

    #[test]
    fn independent_input_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let unused = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let y = t.exp(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused), vec![0.0; 4]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let b = t.relu(a).unwrap();
        let c = t.matmul(a, b).unwrap();
        let d = t.mean(c).unwrap();
        for v in [b, c, d] {
            let (_, inputs) = t.record(v);
            assert!(inputs.iter().all(|i| i.index() < v.index()));
        }
    }

    #[test]
    fn composite_matches_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 3, 5);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let h = t.matmul(xv, wv).unwrap();
        let h = t.sigmoid(h).unwrap();
        let p = t.row_softmax(h).unwrap();
        let l = t.ln(p).unwrap();
        let out = t.mean(l).unwrap();
        // straight-line recomputation
        let mut total = 0.0;
        for i in 0..4 {
            let mut z = [0.0; 5];
            for j in 0..5 {
                let s: f64 = (0..3).map(|k| x.at(i, k) * w.at(k, j)).sum();
                z[j] = 1.0 / (1.0 + (-s).exp());
            }
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for v in z {
                total += ((v - m).exp() / denom).ln();
            }
        }
        assert!((t.value(out).item() - total / 20.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.leaf(rand_tensor(&mut rng, 5, 5));
        let b = t.row_standardize(a, 1e-5).unwrap();
        let c = t.matmul_t(b, b).unwrap();
        t.sum(c).unwrap();
        let inputs = vec![t.value(a).clone()];
        let first = t.evaluate(&inputs).unwrap().clone();
        let second = t.evaluate(&inputs).unwrap().clone();
        assert_eq!(first.data()[0].to_bits(), second.data()[0].to_bits());
    }

    #[test]
    fn evaluate_rejects_wrong_input_shape() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        t.sum(a).unwrap();
        assert!(t.evaluate(&[Tensor::scalar(1.0)]).is_err());
        assert!(t.evaluate(&[]).is_err());
    }

    #[test]
    fn log_is_clamped() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.ln(x).unwrap();
        assert_eq!(t.value(y).item(), LOG_CLAMP.ln());
        assert_eq!(t.backward(y).unwrap().get(x), vec![0.0]);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..12u64 {
            let r = rng.gen_range(1..=8);
            let c = rng.gen_range(2..=8);
            let k = rng.gen_range(1..=8);
            let s = 100 + trial;
            check_primitive("matmul", s, (r, c), Some((c, k)), |t, a, b| t.matmul(a, b.unwrap()).unwrap());
            check_primitive("matmul_t", s, (r, c), Some((k, c)), |t, a, b| t.matmul_t(a, b.unwrap()).unwrap());
            check_primitive("gram", s, (r, c), None, |t, a, _| t.matmul_t(a, a).unwrap());
            check_primitive("add", s, (r, c), Some((r, c)), |t, a, b| t.add(a, b.unwrap()).unwrap());
            check_primitive("sub", s, (r, c), Some((r, c)), |t, a, b| t.sub(a, b.unwrap()).unwrap());
            check_primitive("mul", s, (r, c), Some((r, c)), |t, a, b| t.mul(a, b.unwrap()).unwrap());
            check_primitive("add_row", s, (r, c), Some((1, c)), |t, a, b| t.add_row(a, b.unwrap()).unwrap());
            check_primitive("scale", s, (r, c), None, |t, a, _| t.scale(a, -1.7).unwrap());
            check_primitive("relu", s, (r, c), None, |t, a, _| t.relu(a).unwrap());
            check_primitive("sigmoid", s, (r, c), None, |t, a, _| t.sigmoid(a).unwrap());
            check_primitive("exp", s, (r, c), None, |t, a, _| t.exp(a).unwrap());
            check_primitive("log", s, (r, c), None, |t, a, _| {
                let e = t.exp(a).unwrap();
                t.ln(e).unwrap()
            });
            check_primitive("row_softmax", s, (r, c), None, |t, a, _| t.row_softmax(a).unwrap());
            check_primitive("row_log_softmax", s, (r, c), None, |t, a, _| t.row_log_softmax(a).unwrap());
            check_primitive("row_standardize", s, (r, c), None, |t, a, _| t.row_standardize(a, 1e-5).unwrap());
            check_primitive("sum", s, (r, c), None, |t, a, _| t.sum(a).unwrap());
            check_primitive("mean", s, (r, c), None, |t, a, _| t.mean(a).unwrap());
            check_primitive("dot", s, (r, c), Some((r, c)), |t, a, b| t.dot(a, b.unwrap()).unwrap());
            check_primitive("norm", s, (r, c), None, |t, a, _| t.norm(a).unwrap());
            check_primitive("concat", s, (r, c), Some((r, k)), |t, a, b| t.concat_cols(&[a, b.unwrap(), a]).unwrap());
            let mask: Vec<bool> = (0..r * c).map(|i| i % c == 0 || i % 3 == 1).collect();
            check_primitive("masked_lse", s, (r, c), None, move |t, a, _| {
                t.masked_row_logsumexp(a, mask.clone()).unwrap()
            });
        }
    }

    #[test]
    fn empty_mask_row_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(t.masked_row_logsumexp(a, vec![true, false, false, false]).is_err());
    }
}
