//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Gradients can be taken with `create_graph`, which records the backward
//! pass on the tape so it can be differentiated again (Hessian-vector
//! products, differentiating through an inner gradient step).

mod array;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;

pub use array::{Array, DType, Scalar};
pub use gradcheck::{gradcheck, run_suite, GradCheckConfig, GradCheckReport, SuiteReport};
pub use optim::{adam_step, sgd_step, AdamState, ParamSet};
pub use tape::{grad, hvp, is_checked, record_op, set_checked, OpKind, Tape, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed")]
    TapeConsumed,
    #[error("tensors from different tapes")]
    TapeMismatch,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("invalid hyper-parameter: {0}")]
    Hyper(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_relu_conv_examples() {
        let a = Tensor::constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = Tensor::constant(arr(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);

        let r = Tensor::constant(arr(&[3], &[-1.0, 0.0, 2.0])).relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);

        let img = Tensor::constant(Array::<f64>::full([1, 1, 3, 3], 1.0));
        let k = Tensor::constant(Array::<f64>::full([1, 1, 2, 2], 1.0));
        let out = img.conv2d(&k, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.value().data(), &[4.0; 4]);
    }

    #[test]
    fn shape_errors_surface() {
        let a = Tensor::constant(Array::<f64>::zeros([2, 3]));
        let b = Tensor::constant(Array::<f64>::zeros([2, 3]));
        assert!(matches!(a.matmul(&b), Err(GradError::Shape(_))));
        let k = Tensor::constant(Array::<f64>::zeros([1, 1, 7, 7]));
        let img = Tensor::constant(Array::<f64>::zeros([1, 1, 9, 9]));
        assert!(matches!(img.conv2d(&k, 0), Err(GradError::Unsupported(_))));
        assert!(record_op(&OpKind::Add, &[&a]).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let t = tape.leaf(arr(&[3], &[1.0, 2.0, 3.0]));
        let loss = t.mul(&t).unwrap().sum().unwrap();
        let g = grad(&loss, &[t], false).unwrap();
        assert_eq!(g[0].value().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let z = tape.leaf(arr(&[1, 2], &[0.0, 0.0]));
        let loss = z.softmax_cross_entropy(&[0]).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-15);
        let g = grad(&loss, &[z], false).unwrap();
        assert_eq!(g[0].value().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_stable_for_large_logits() {
        let z = Tensor::constant(arr(&[2, 3], &[1e4, -1e4, 0.0, -1e4, 1e4, 1e4]));
        let l = z.softmax_cross_entropy(&[0, 2]).unwrap().item();
        assert!(l.is_finite());
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn unreachable_params_get_zeros() {
        let tape = Tape::new();
        let a = tape.leaf(arr(&[2], &[1.0, 2.0]));
        let b = tape.leaf(arr(&[2], &[5.0, 5.0]));
        let loss = a.sum().unwrap();
        let g = grad(&loss, &[a, b], false).unwrap();
        assert_eq!(g[1].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_and_consumed_tape_error() {
        let tape = Tape::new();
        let a = tape.leaf(arr(&[2], &[1.0, 2.0]));
        assert!(matches!(grad(&a, std::slice::from_ref(&a), false), Err(GradError::NotScalar(_))));
        let loss = a.sum().unwrap();
        tape.release();
        assert_eq!(grad(&loss, &[a], false).unwrap_err(), GradError::TapeConsumed);
    }

    #[test]
    fn checked_mode_catches_nan() {
        let a = Tensor::constant(arr(&[1], &[f64::MAX]));
        assert!(matches!(a.add(&a), Err(GradError::NonFinite("add"))));
        let prev = set_checked(false);
        assert!(a.add(&a).unwrap().item().is_infinite());
        set_checked(prev);
    }

    #[test]
    fn hvp_examples() {
        // f = 1/2 x^T A x, A = diag(2, 4)
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[0.3, -0.8]));
        let a = Tensor::constant(arr(&[2], &[2.0, 4.0]));
        let f = x.mul(&x).unwrap().mul(&a).unwrap().sum().unwrap().scale(0.5).unwrap();
        let hv = hvp(&f, &[x], &[arr(&[2], &[1.0, 1.0])]).unwrap();
        assert_eq!(hv[0].data(), &[2.0, 4.0]);

        // f = sum(x^3) at x = [1, 2], v = [1, 0]
        let tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
        let f = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
        let hv = hvp(&f, &[x], &[arr(&[2], &[1.0, 0.0])]).unwrap();
        assert_eq!(hv[0].data(), &[6.0, 0.0]);
    }

    #[test]
    fn create_graph_does_not_change_first_order_values() {
        let (p, f, _) = gradcheck::random_cnn(3);
        let tape = Tape::new();
        let ts = p.attach(&tape);
        let loss = f(&ts).unwrap();
        let g1 = grad(&loss, &ts, false).unwrap();
        let g2 = grad(&loss, &ts, true).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.value(), b.value());
            assert!(b.requires_grad() || a.value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn linear_regression_gradient_matches_least_squares_formula() {
        // loss = mean((X w - y)^2), grad = 2/m X^T (X w - y)
        let xs = [[1.0, 0.5], [2.0, -1.0], [0.0, 3.0], [-1.5, 1.0]];
        let ys = [1.0, -2.0, 0.5, 3.0];
        let w0 = [0.2, -0.4];
        let x = arr(&[4, 2], &xs.concat());
        let y = arr(&[4, 1], &ys);
        let mut p = ParamSet::new();
        p.push("w", arr(&[2, 1], &w0)).unwrap();
        let f = |ps: &[Tensor<f64>]| {
            let r = Tensor::constant(x.clone()).matmul(&ps[0])?.sub(&Tensor::constant(y.clone()))?;
            r.mul(&r)?.mean()
        };
        let tape = Tape::new();
        let ts = p.attach(&tape);
        let g = grad(&f(&ts).unwrap(), &ts, false).unwrap();
        let mut want = [0.0; 2];
        for (row, yi) in xs.iter().zip(ys) {
            let r = row[0] * w0[0] + row[1] * w0[1] - yi;
            want[0] += 0.5 * row[0] * r;
            want[1] += 0.5 * row[1] * r;
        }
        for (a, b) in g[0].value().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let v = vec![arr(&[2, 1], &[1.0, -1.0])];
        let rep = gradcheck("linreg", &p, f, &v, &GradCheckConfig { grad_tol: 1e-6, ..Default::default() }).unwrap();
        assert!(rep.passed && !rep.excluded, "{rep:?}");
    }

    #[test]
    fn mlp_and_cnn_pass_gradcheck() {
        let cfg = GradCheckConfig::default();
        let suite = run_suite(6, 11, &cfg).unwrap();
        assert!(suite.passed, "{suite:#?}");
    }

    #[test]
    fn relu_kink_is_flagged_as_excluded() {
        let mut p = ParamSet::new();
        p.push("x", arr(&[3], &[0.0, 1.0, -2.0])).unwrap();
        let f = |ps: &[Tensor<f64>]| ps[0].relu()?.sum();
        let rep = gradcheck("kink", &p, f, &[arr(&[3], &[1.0, 1.0, 1.0])], &GradCheckConfig::default()).unwrap();
        assert!(rep.excluded);
        assert_eq!(rep.relu_margin, 0.0);
    }

    #[test]
    fn sign_flip_fails_check() {
        let (p, f, v) = gradcheck::random_mlp(5);
        let cfg = GradCheckConfig { inject_sign_flip: true, ..Default::default() };
        let rep = gradcheck("flip", &p, f, &v, &cfg).unwrap();
        assert!(!rep.passed || rep.excluded);
    }
}
