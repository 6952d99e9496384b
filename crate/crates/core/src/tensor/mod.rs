//! Dense arrays and the reverse-mode differentiation tape that carries every
//! trainable quantity of the engine.

mod array;
mod graph;

pub use array::{broadcast_shapes, Tensor};
pub use graph::{Elementwise, Graph, ReduceOp, Var};

pub(crate) use graph::softplus;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    /// Central finite-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut up = x.clone();
                up.data_mut()[i] += h;
                let mut dn = x.clone();
                dn.data_mut()[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Checks d(sum(w ⊙ op(x...)))/dx against finite differences, where `w`
    /// is a fixed random weighting that makes the scalar depend on every output.
    fn check_op(inputs: Vec<Tensor>, tol: f64, op: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weights = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = op(&mut g, &vars);
            random(&mut rng, g.shape(out))
        };
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = op(&mut g, &vars);
            g.value(out)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let total = g.sum_all(prod).unwrap();
        g.backward(total).unwrap();
        for (slot, var) in vars.iter().enumerate() {
            let analytic = g.grad(*var).unwrap().data().to_vec();
            let numeric = numeric_grad(&inputs[slot], 1e-5, &|t| {
                let mut ins = inputs.clone();
                ins[slot] = t.clone();
                eval(&ins)
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < tol, "operand {slot}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut g = Graph::new();
        let zero = g.scalar(0.0);
        let s = g.sigmoid(zero);
        assert_eq!(g.value(s).item().unwrap(), 0.5);
        let x = g.constant(Tensor::from_vec(vec![-3.2, 1.5]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 1.5]);
    }

    #[test]
    fn softplus_derivative_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.softplus(x);
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap().item().unwrap();
        let h = 1e-5;
        let numeric = (softplus(h) - softplus(-h)) / (2.0 * h);
        assert!((analytic - 0.5).abs() < 1e-12);
        assert!((numeric - 0.5).abs() < 1e-9);
    }

    #[test]
    fn log_and_sqrt_reject_negative_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, -2.0]));
        assert!(matches!(g.log(x), Err(crate::Error::Domain { operand: 0, .. })));
        assert!(matches!(
            g.apply_elementwise(Elementwise::Sqrt, &[x]),
            Err(crate::Error::Domain { .. })
        ));
    }

    #[test]
    fn non_broadcastable_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]).map(|v| v.abs() + 0.5);
        let pos = a.map(|v| v.abs() + 0.1);
        let binary: [Elementwise; 4] = [
            Elementwise::Add,
            Elementwise::Sub,
            Elementwise::Mul,
            Elementwise::Div,
        ];
        for op in binary {
            check_op(vec![a.clone(), b.clone()], 1e-5, &|g, v| {
                g.apply_elementwise(op, v).unwrap()
            });
        }
        let unary = [
            (Elementwise::Exp, &a),
            (Elementwise::Log, &pos),
            (Elementwise::Sigmoid, &a),
            (Elementwise::Relu, &a),
            (Elementwise::Softplus, &a),
            (Elementwise::Atan, &a),
            (Elementwise::Square, &a),
            (Elementwise::Sqrt, &pos),
            (Elementwise::Negate, &a),
        ];
        for (op, input) in unary {
            check_op(vec![input.clone()], 1e-5, &|g, v| {
                g.apply_elementwise(op, v).unwrap()
            });
        }
    }

    #[test]
    fn add_commutes_under_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, &[5, 1, 3]));
        let b = g.constant(random(&mut rng, &[4, 1]));
        let ab = g.add(a, b).unwrap();
        let ba = g.add(b, a).unwrap();
        assert_eq!(g.shape(ab), &[5, 4, 3]);
        assert_eq!(g.value(ab), g.value(ba));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = g.constant(Tensor::new(vec![3, 1], vec![0.3, -2.0, 7.5]).unwrap());
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out).data(), &[0.3, -2.0, 7.5]);

        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![1., 1.]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[3., 7.]);

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.matmul(a, bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 2]);
        check_op(vec![a, b], 1e-6, &|g, v| g.matmul(v[0], v[1]).unwrap());

        let a = random(&mut rng, &[3, 4, 5]);
        let b = random(&mut rng, &[3, 5, 2]);
        check_op(vec![a.clone(), b], 1e-6, &|g, v| g.matmul(v[0], v[1]).unwrap());
        let shared = random(&mut rng, &[5, 2]);
        check_op(vec![a, shared], 1e-6, &|g, v| g.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[6, 3]);
        let w = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]);
        check_op(vec![x.clone(), w.clone(), b.clone()], 1e-6, &|g, v| {
            g.linear(v[0], v[1], v[2]).unwrap()
        });
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
        let fused = g.linear(x, w, b).unwrap();
        let mm = g.matmul(x, w).unwrap();
        let plain = g.add(mm, b).unwrap();
        for (a, c) in g.value(fused).data().iter().zip(g.value(plain).data()) {
            assert!((a - c).abs() < 1e-12);
        }
        assert!(matches!(g.linear(x, x, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn broadcast_fast_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shapes: [(&[usize], &[usize]); 6] = [
            (&[4, 3], &[3]),
            (&[3], &[4, 3]),
            (&[4, 3], &[4, 1]),
            (&[4, 1], &[4, 3]),
            (&[4, 1], &[3]),
            (&[2, 1, 3], &[4, 1]),
        ];
        for (sa, sb) in shapes {
            let a = random(&mut rng, sa);
            let b = random(&mut rng, sb);
            check_op(vec![a.clone(), b.clone()], 1e-6, &|g, v| g.mul(v[0], v[1]).unwrap());
            check_op(vec![a, b], 1e-6, &|g, v| g.sub(v[0], v[1]).unwrap());
        }
    }

    #[test]
    fn reduce_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let m = g.mean(x, 0).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.0);
        let c = g.constant(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        let v = g.variance(c, 0).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 0.0);
        let empty = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.sum(empty, 0), Err(crate::Error::Domain { .. })));
        assert!(g.sum(x, 1).is_err());
    }

    #[test]
    fn std_of_standard_normal_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, &[1000]));
        let s = g.std(x, 0).unwrap();
        let s = g.value(s).item().unwrap();
        assert!((0.9..=1.1).contains(&s), "std {s}");
    }

    #[test]
    fn reduce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 4, 2]);
        for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Variance, ReduceOp::Std] {
            for axis in 0..3 {
                check_op(vec![x.clone()], 1e-5, &|g, v| g.reduce(op, v[0], axis).unwrap());
            }
        }
    }

    #[test]
    fn sort_values_and_permutation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3.0, 1.0, 2.0]));
        let (s, perm) = g.sort_last(x).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(perm, vec![1, 2, 0]);

        let y = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 4.0, 9.0]));
        let (_, perm) = g.sort_last(y).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3]);

        let nan = g.constant(Tensor::from_vec(vec![1.0, f64::NAN]));
        assert!(matches!(g.sort_last(nan), Err(crate::Error::Domain { .. })));
    }

    #[test]
    fn sort_ties_keep_original_order() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2.0, 1.0, 2.0, 1.0]));
        let (_, perm) = g.sort_last(x).unwrap();
        assert_eq!(perm, vec![1, 3, 0, 2]);
    }

    #[test]
    fn sorted_minimum_gradient_is_one_hot_at_argmin() {
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.2, 0.1, -0.4]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let (s, _) = g.sort_last(v).unwrap();
        let first = g.gather_last(s, &[0]).unwrap();
        let total = g.sum_all(first).unwrap();
        g.backward(total).unwrap();
        let analytic = g.grad(v).unwrap().data().to_vec();
        let numeric = numeric_grad(&x, 1e-6, &|t| {
            t.data().iter().cloned().fold(f64::INFINITY, f64::min)
        });
        assert_eq!(analytic, vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn sort_gather_concat_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[3, 6]);
        check_op(vec![x.clone()], 1e-6, &|g, v| g.sort_last(v[0]).unwrap().0);
        check_op(vec![x.clone()], 1e-6, &|g, v| g.gather_last(v[0], &[5, 0, 0, 2]).unwrap());
        check_op(vec![x.clone()], 1e-6, &|g, v| g.softmax_last(v[0]).unwrap());
        let y = random(&mut rng, &[3, 2]);
        check_op(vec![x, y], 1e-6, &|g, v| g.concat_last(&[v[1], v[0], v[1]]).unwrap());
    }

    #[test]
    fn pairwise_distance_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[4, 3]);
        let y = random(&mut rng, &[2, 3]);
        check_op(vec![x, y], 1e-6, &|g, v| g.pairwise_distance(v[0], v[1]).unwrap());
    }

    #[test]
    fn pairwise_distance_coincident_points_have_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let d = g.pairwise_distance(x, x).unwrap();
        let total = g.sum_all(d).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_square_and_constant() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.scalar(5.0);
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.square(x);
        let y = g.affine(sq, 2.0, 1.0);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 24.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 12.0);

        let v = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn identical_inputs_give_identical_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut g = Graph::new();
            let a = g.param(random(&mut rng, &[6, 4]));
            let b = g.param(random(&mut rng, &[4, 3]));
            let p = g.matmul(a, b).unwrap();
            let s = g.softplus(p);
            let (sorted, _) = g.sort_last(s).unwrap();
            let loss = g.mean_all(sorted).unwrap();
            g.backward(loss).unwrap();
            (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
