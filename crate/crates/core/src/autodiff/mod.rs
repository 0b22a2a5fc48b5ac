//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes; [`Graph::backward`]
//! replays the tape in reverse. Parameters enter the graph as leaves and read
//! their gradients back after the pass.

mod graph;
mod tensor;

pub use graph::{BatchNormMode, BatchStats, Graph, Var, BN_EPS};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central-difference check of `build` with respect to every input.
    fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eps = 1e-3;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(&t.clone().with_requires_grad(true)).unwrap())
            .collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t).unwrap()).collect();
            let out = build(&mut g, &vars);
            g.item(out)
        };
        for (which, t) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[which]).unwrap().to_vec();
            for (i, &a) in analytic.iter().enumerate().take(t.numel()) {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += eps;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "input {which} elem {i}: analytic {a} numeric {numeric} rel {rel}"
                );
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(&t64(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::ones(vec![1, 1, 4, 4])).unwrap();
        let w = g.constant(&Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[9.0; 4]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::ones(vec![2, 3])).unwrap();
        let b = g.constant(&Tensor::ones(vec![3, 2])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c), &[3.0; 4]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g
            .leaf(&Tensor::<f64>::zeros(vec![2, 3, 4]).with_requires_grad(true))
            .unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g
            .leaf(&t64(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true))
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g
            .leaf(&t64(&[2], &[1.0, -1.0]).with_requires_grad(true))
            .unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g
            .leaf(&t64(&[2], &[1.0, 2.0]).with_requires_grad(true))
            .unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::ones(vec![2, 3])).unwrap();
        let b = g.constant(&Tensor::ones(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(&Tensor::ones(vec![3])).unwrap();
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(&t64(&[2], &[0.0, 1.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let big = g.constant(&t64(&[1], &[1e300])).unwrap();
        assert!(g.exp(big).is_err());
        assert!(g.constant(&t64(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn fd_matmul_add_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)];
        fd_check(&ins, |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add_bias(y, v[2]).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2).unwrap()
        });
    }

    #[test]
    fn fd_conv2d_strided_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = [random(&[2, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
        fd_check(&ins, |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2).unwrap()
        });
        let ins = [random(&[2, 3, 3, 3], &mut rng), random(&[2, 3, 1, 1], &mut rng)];
        fd_check(&ins, |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 0).unwrap();
            let y2 = g.mul(y, y).unwrap();
            g.sum(y2).unwrap()
        });
    }

    #[test]
    fn fd_batchnorm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = [
            random(&[3, 2, 2, 2], &mut rng),
            random(&[2], &mut rng),
            random(&[2], &mut rng),
            random(&[3, 2, 2, 2], &mut rng),
        ];
        fd_check(&ins, |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], BatchNormMode::Train).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y).unwrap()
        });
        let mean = [0.1, -0.2];
        let var = [0.5, 2.0];
        fd_check(&ins, |g, v| {
            let mode = BatchNormMode::Eval {
                mean: &mean,
                var: &var,
            };
            let (y, _) = g.batchnorm(v[0], v[1], v[2], mode).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            g.sum(y).unwrap()
        });
    }

    #[test]
    fn fd_pooling_relu_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = [random(&[2, 2, 4, 4], &mut rng), random(&[2, 8], &mut rng)];
        fd_check(&ins, |g, v| {
            let p = g.avgpool2d(v[0], 2).unwrap();
            let p = g.relu(p).unwrap();
            let p = g.reshape(p, vec![2, 8]).unwrap();
            let q = g.mul(p, v[1]).unwrap();
            let a = g.sum(q).unwrap();
            let gp = g.global_avgpool(v[0]).unwrap();
            let gp2 = g.mul(gp, gp).unwrap();
            let b = g.mean(gp2).unwrap();
            g.add(a, b).unwrap()
        });
    }

    #[test]
    fn fd_log_exp_softmax_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = [random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)];
        fd_check(&ins, |g, v| {
            let ls = g.log_softmax(v[0]).unwrap();
            let picked = g.gather(ls, &[0, 3, 1]).unwrap();
            let ce = g.mean(picked).unwrap();
            let e = g.exp(v[1]).unwrap();
            let l = g.log(e).unwrap();
            let d = g.sub(l, ls).unwrap();
            let d = g.mul_scalar(d, 0.5).unwrap();
            let s = g.sum(d).unwrap();
            g.sub(s, ce).unwrap()
        });
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4, 3], &mut rng).with_requires_grad(true);
        let w = random(&[3, 2], &mut rng).with_requires_grad(true);
        let (a, b) = (0.7, -1.3);
        let grads = |coef: (f64, f64)| {
            let mut g = Graph::new();
            let xv = g.leaf(&x).unwrap();
            let wv = g.leaf(&w).unwrap();
            let y = g.matmul(xv, wv).unwrap();
            let r = g.relu(y).unwrap();
            let l1 = g.sum(r).unwrap();
            let ls = g.log_softmax(y).unwrap();
            let l2 = g.mean(ls).unwrap();
            let l1 = g.mul_scalar(l1, coef.0).unwrap();
            let l2 = g.mul_scalar(l2, coef.1).unwrap();
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap();
            g.grad(xv).unwrap().to_vec()
        };
        let combined = grads((a, b));
        let g1 = grads((1.0, 0.0));
        let g2 = grads((0.0, 1.0));
        for i in 0..combined.len() {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn deterministic_bits() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = random(&[2, 3, 6, 6], &mut rng);
            let w = random(&[4, 3, 3, 3], &mut rng).with_requires_grad(true);
            let mut g = Graph::new();
            let xv = g.constant(&x).unwrap();
            let wv = g.leaf(&w).unwrap();
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            (g.value(y).to_vec(), g.grad(wv).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g
            .leaf(&t64(&[2], &[1.0, 2.0]).with_requires_grad(true))
            .unwrap();
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn batchnorm_train_reports_unbiased_stats() {
        let mut g = Graph::new();
        let x = g.constant(&t64(&[4, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let gamma = g.constant(&t64(&[1], &[1.0])).unwrap();
        let beta = g.constant(&t64(&[1], &[0.0])).unwrap();
        let (y, stats) = g.batchnorm(x, gamma, beta, BatchNormMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
        let mean: f64 = g.value(y).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
