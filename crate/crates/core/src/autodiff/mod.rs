//! Reverse-mode automatic differentiation with nesting.
//!
//! [`Tape`] records matrix operations; [`Tape::gradients`] records the
//! backward pass as further operations, so gradients can be differentiated
//! again (reverse-over-reverse).

mod mlp;
mod tape;

pub use mlp::{mlp_forward, param_gradient, BoundLinear, BoundMlp, Linear, MlpParams, Parameters};
pub use tape::{gradient, Gradient, Tape, Var};

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::scalar::softplus;
    use crate::tensor::Tensor;
    use crate::testutil::{central_diff, rel_err};

    #[test]
    fn square_and_product() {
        let tape = Tape::<f64>::new();
        let x = tape.scalar(3.0);
        let g = gradient(x * x, x).unwrap();
        assert!(g.connected);
        assert_eq!(g.value.item(), 6.0);

        let x = tape.scalar(2.0);
        let y = tape.scalar(5.0);
        assert_eq!(gradient(x * y, x).unwrap().value.item(), 5.0);
    }

    #[test]
    fn constant_has_zero_flagged_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let c = tape.scalar(4.0);
        let g = gradient(c.square(), x).unwrap();
        assert!(!g.connected);
        assert_eq!(g.value.value().data(), &[0.0, 0.0, 0.0]);
        // wrt recorded after the output
        let late = tape.scalar(1.0);
        let g = gradient(c, late).unwrap();
        assert!(!g.connected);
        assert_eq!(g.value.item(), 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(gradient(x, x), Err(crate::Error::NonScalar { rows: 2, cols: 2 })));
    }

    #[test]
    fn mlp_zero_params_give_ln2() {
        let params = MlpParams::<f64> { layers: vec![Linear::zeros(3, 4), Linear::zeros(4, 2)] };
        let out = mlp_forward(&params, &Tensor::from_vec(1, 3, vec![7.0, -2.0, 0.5])).unwrap();
        for &v in out.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_identity_unit() {
        let params =
            MlpParams::<f64> { layers: vec![Linear { weight: Tensor::scalar(1.0), bias: Tensor::scalar(0.0) }] };
        let out = mlp_forward(&params, &Tensor::scalar(3.0)).unwrap();
        assert!((out.item() - 3.048_587_351_573_742).abs() < 1e-12);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MlpParams::<f64>::init(3, &[4], &mut rng);
        assert!(matches!(mlp_forward(&params, &Tensor::zeros(1, 5)), Err(crate::Error::Shape(_))));
        let mut bad = params.clone();
        bad.layers.push(Linear::zeros(7, 2));
        assert!(bad.validate().is_err());
        assert!(params.validate().is_ok());
    }

    /// Straightforward loop implementation, independent of the tape.
    fn reference_mlp(params: &MlpParams<f64>, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &params.layers {
            let (fan_in, fan_out) = layer.weight.shape();
            let mut next = vec![0.0; fan_out];
            for (j, slot) in next.iter_mut().enumerate() {
                let mut s = layer.bias.get(0, j);
                for (i, hi) in h.iter().enumerate().take(fan_in) {
                    s += hi * layer.weight.get(i, j);
                }
                *slot = softplus(s);
            }
            h = next;
        }
        h
    }

    #[test]
    fn mlp_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = MlpParams::<f64>::init(5, &[64, 64], &mut rng);
        for _ in 0..5 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = mlp_forward(&params, &Tensor::from_vec(1, 5, x.clone())).unwrap();
            let want = reference_mlp(&params, &x);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MlpParams::<f64>::init(4, &[16, 16], &mut rng);
        let x = Tensor::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
        assert_eq!(mlp_forward(&params, &x).unwrap(), mlp_forward(&params, &x).unwrap());
    }

    fn sum_of_mlp_output(params: &MlpParams<f64>, x: &[f64]) -> f64 {
        let t = mlp_forward(params, &Tensor::from_vec(1, x.len(), x.to_vec())).unwrap();
        t.sum()
    }

    #[test]
    fn mlp_input_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = MlpParams::<f64>::init(4, &[8, 8], &mut rng);
        for _ in 0..5 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tape = Tape::new();
            let xv = tape.leaf(Tensor::from_vec(1, 4, x.clone()));
            let y = params.bind(&tape).forward(xv).unwrap().sum();
            let g = gradient(y, xv).unwrap().value.value();
            let fd = central_diff(&x, 1e-5, |z| sum_of_mlp_output(&params, z));
            assert!(rel_err(g.data(), &fd) < 1e-6, "rel err {}", rel_err(g.data(), &fd));
        }
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MlpParams::<f64>::init(3, &[4, 2], &mut rng);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let leaves = bound.leaves();
        let total = leaves.iter().map(|l| l.sum()).reduce(|a, b| a + b).unwrap();
        let grads = param_gradient(total, &leaves, &params).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn linear_mse_closed_form() {
        // y_hat = x·w + b, loss = (y_hat - y)^2
        let lin = Linear { weight: Tensor::from_vec(2, 1, vec![0.5, -1.5]), bias: Tensor::scalar(0.25) };
        let x = [2.0, 3.0];
        let y = 1.0;
        let tape = Tape::new();
        let bound = lin.bind(&tape);
        let xv = tape.leaf(Tensor::from_vec(1, 2, x.to_vec()));
        let pred = bound.forward(xv).unwrap();
        let diff = pred - tape.scalar(y);
        let loss = diff.square().sum();
        let grads = param_gradient(loss, &bound.leaves(), &lin).unwrap();
        let y_hat = 2.0 * 0.5 + 3.0 * -1.5 + 0.25;
        let r = 2.0 * (y_hat - y);
        assert_eq!(grads.weight.data(), &[r * x[0], r * x[1]]);
        assert_eq!(grads.bias.item(), r);
    }

    /// ‖∂MLP/∂x‖² from the first-order path only (checked against finite
    /// differences above); the nested path is what the test exercises.
    fn input_grad_norm_sq(params: &MlpParams<f64>, x: &[f64]) -> f64 {
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(1, x.len(), x.to_vec()));
        let y = params.bind(&tape).forward(xv).unwrap().sum();
        let gx = gradient(y, xv).unwrap().value.value();
        gx.data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn nested_gradient_matches_parameter_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MlpParams::<f64>::init(3, &[4, 4], &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let xv = tape.leaf(Tensor::from_vec(1, 3, x.clone()));
        let y = bound.forward(xv).unwrap().sum();
        let gx = gradient(y, xv).unwrap().value;
        let loss = gx.square().sum();
        let grads = param_gradient(loss, &bound.leaves(), &params).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (ti, t) in params.tensors().iter().enumerate() {
            for k in 0..t.len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].data_mut()[k] += delta;
                    input_grad_norm_sq(&p, &x)
                };
                let h = 1e-5;
                numeric.push((eval(h) - eval(-h)) / (2.0 * h));
                analytic.push(grads.tensors()[ti].data()[k]);
            }
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "nested rel err {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        // f(x) = sum( softplus(concat(gather(x), scatter(x))) ⊙ slice ) with a matmul
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let idx: Rc<[usize]> = vec![2, 0, 1, 2].into();
        fn build<'t>(tape: &'t Tape<f64>, x: &[f64], w: &[f64], idx: &Rc<[usize]>) -> (Var<'t, f64>, Var<'t, f64>) {
            let xv = tape.leaf(Tensor::from_vec(3, 2, x.to_vec()));
            let wv = tape.leaf(Tensor::from_vec(4, 2, w.to_vec()));
            let gathered = xv.gather(idx);
            let back = gathered.scatter_add(idx, 3);
            let cat = tape.concat(&[back, xv]);
            let h = cat.matmul_t(wv, false, false).softplus();
            let s = h.slice_cols(1, 1).pad_cols(0, 3).sum_rows();
            let scaled = h.scale_rows(&[0.5, -1.0, 2.0]).sigmoid();
            let out = (scaled.sum() * s.sum()).affine(1.5, 0.2) - h.sum_rows().broadcast_rows(2).sum();
            (xv, out)
        }
        let tape = Tape::new();
        let (xv, out) = build(&tape, &x0, &w, &idx);
        let g = gradient(out, xv).unwrap().value.value();
        let fd = central_diff(&x0, 1e-5, |z| {
            let t = Tape::new();
            let (_, o) = build(&t, z, &w, &idx);
            o.item()
        });
        assert!(rel_err(g.data(), &fd) < 1e-6, "{}", rel_err(g.data(), &fd));
    }

    #[test]
    fn f32_gradient_is_supported() {
        let tape = Tape::<f32>::new();
        let x = tape.scalar(1.5f32);
        let y = x.softplus();
        let g = gradient(y, x).unwrap().value.item();
        assert!((g - crate::scalar::sigmoid(1.5f32)).abs() < 1e-6);
    }

    mod prop {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn composed_first_order_matches_fd(
                x in proptest::collection::vec(-2.0f64..2.0, 4),
                seed in 0u64..1000,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = MlpParams::<f64>::init(2, &[6, 3], &mut rng);
                fn f<'t>(tape: &'t Tape<f64>, params: &MlpParams<f64>, z: &[f64]) -> (Var<'t, f64>, Var<'t, f64>) {
                    let zv = tape.leaf(Tensor::from_vec(2, 2, z.to_vec()));
                    let y = params.bind(tape).forward(zv).unwrap();
                    let out = (y.square().sum() - zv.sum()).affine(0.5, 0.0);
                    (zv, out)
                }
                let tape = Tape::new();
                let (zv, out) = f(&tape, &params, &x);
                let g = gradient(out, zv).unwrap().value.value();
                let fd = central_diff(&x, 1e-5, |z| { let t = Tape::new(); f(&t, &params, z).1.item() });
                prop_assert!(rel_err(g.data(), &fd) < 1e-6);
            }
        }
    }
}
