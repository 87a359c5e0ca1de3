//! Finite-difference verification of first-order gradients and Hessian-vector
//! products.
//!
//! Relative error of a block is `max|analytic - numeric| / max(max|analytic|,
//! max|numeric|, 1e-12)`, i.e. measured against the block's scale. Instances
//! whose relu inputs or max-pool winner gaps fall within `kink_tol` of zero are
//! reported as excluded rather than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::array::Array;
use super::optim::ParamSet;
use super::tape::{grad, hvp, Tape, Tensor};
use super::GradError;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub grad_tol: f64,
    pub hvp_tol: f64,
    pub kink_tol: f64,
    /// Negative control: flips the sign of the analytic gradient and HVP.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, grad_tol: 1e-5, hvp_tol: 1e-4, kink_tol: 1e-3, inject_sign_flip: false }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub grad_rel: f64,
    pub hvp_rel: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub blocks: Vec<BlockReport>,
    pub relu_margin: f64,
    pub pool_margin: f64,
    /// Kink too close: compared values are not meaningful.
    pub excluded: bool,
    pub max_grad_rel: f64,
    pub max_hvp_rel: f64,
    pub passed: bool,
}

fn block_rel(a: &[f64], n: &[f64]) -> f64 {
    let scale = a.iter().chain(n).fold(1e-12f64, |m, x| m.max(x.abs()));
    a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Checks `loss_fn` at `params` along direction `v` for the HVP.
pub fn gradcheck<F>(
    label: &str,
    params: &ParamSet<f64>,
    loss_fn: F,
    v: &[Array<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, GradError>,
{
    let eval = |values: &[Array<f64>]| -> Result<f64, GradError> {
        let ts: Vec<_> = values.iter().map(|a| Tensor::constant(a.clone())).collect();
        Ok(loss_fn(&ts)?.item())
    };
    let grads_at = |values: &[Array<f64>]| -> Result<Vec<Array<f64>>, GradError> {
        let tape = Tape::new();
        let ts: Vec<_> = values.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = loss_fn(&ts)?;
        Ok(grad(&loss, &ts, false)?.into_iter().map(|t| t.value().clone()).collect())
    };

    let tape = Tape::new();
    let ts = params.attach(&tape);
    let loss = loss_fn(&ts)?;
    let (relu_margin, pool_margin) = tape.kink_margins();
    let excluded = relu_margin < cfg.kink_tol || pool_margin < cfg.kink_tol;
    let sign = if cfg.inject_sign_flip { -1.0 } else { 1.0 };
    let analytic = grad(&loss, &ts, false)?;
    let hv = hvp(&loss, &ts, v)?;

    let base: Vec<Array<f64>> = params.values().to_vec();
    let mut blocks = Vec::new();
    // numeric HVP: central difference of gradients along v
    let shifted = |s: f64| -> Vec<Array<f64>> {
        base.iter().zip(v).map(|(p, d)| p.zip_map(d, |a, b| a + s * b).expect("shape")).collect()
    };
    let gp = grads_at(&shifted(cfg.eps))?;
    let gm = grads_at(&shifted(-cfg.eps))?;

    for (bi, name) in params.names().iter().enumerate() {
        let mut numeric = Vec::with_capacity(base[bi].len());
        let mut work = base.clone();
        for e in 0..base[bi].len() {
            let x0 = base[bi].data()[e];
            work[bi].data_mut()[e] = x0 + cfg.eps;
            let fp = eval(&work)?;
            work[bi].data_mut()[e] = x0 - cfg.eps;
            let fm = eval(&work)?;
            work[bi].data_mut()[e] = x0;
            numeric.push((fp - fm) / (2.0 * cfg.eps));
        }
        let a: Vec<f64> = analytic[bi].value().data().iter().map(|x| sign * x).collect();
        let h: Vec<f64> = hv[bi].data().iter().map(|x| sign * x).collect();
        let hn: Vec<f64> =
            gp[bi].data().iter().zip(gm[bi].data()).map(|(p, m)| (p - m) / (2.0 * cfg.eps)).collect();
        blocks.push(BlockReport { name: name.clone(), grad_rel: block_rel(&a, &numeric), hvp_rel: block_rel(&h, &hn) });
    }
    let max_grad_rel = blocks.iter().fold(0.0f64, |m, b| m.max(b.grad_rel));
    let max_hvp_rel = blocks.iter().fold(0.0f64, |m, b| m.max(b.hvp_rel));
    let passed = excluded || (max_grad_rel <= cfg.grad_tol && max_hvp_rel <= cfg.hvp_tol);
    Ok(GradCheckReport {
        label: label.to_string(),
        blocks,
        relu_margin,
        pool_margin,
        excluded,
        max_grad_rel,
        max_hvp_rel,
        passed,
    })
}

/// Outcome of [`run_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checked: Vec<GradCheckReport>,
    pub excluded: Vec<GradCheckReport>,
    pub max_grad_rel: f64,
    pub max_hvp_rel: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// A random two-layer MLP with softmax cross-entropy: parameters, loss, direction.
pub fn random_mlp(seed: u64) -> (ParamSet<f64>, impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, GradError>, Vec<Array<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, inp, hid, out) = (4, 5, 6, 3);
    let mut p = ParamSet::new();
    p.push("w1", uniform(&mut rng, &[inp, hid], 1.0)).unwrap();
    p.push("b1", uniform(&mut rng, &[hid], 0.5)).unwrap();
    p.push("w2", uniform(&mut rng, &[hid, out], 1.0)).unwrap();
    p.push("b2", uniform(&mut rng, &[out], 0.5)).unwrap();
    let x = uniform(&mut rng, &[batch, inp], 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..out)).collect();
    let v = p.values().iter().map(|a| uniform(&mut rng, a.shape(), 1.0)).collect();
    let f = move |ps: &[Tensor<f64>]| {
        let x = Tensor::constant(x.clone());
        let h = x.matmul(&ps[0])?.bias_add(&ps[1])?.relu()?;
        h.matmul(&ps[2])?.bias_add(&ps[3])?.softmax_cross_entropy(&labels)
    };
    (p, f, v)
}

/// A random small CNN (conv, relu, 2x2 pool, dense) with softmax cross-entropy.
pub fn random_cnn(seed: u64) -> (ParamSet<f64>, impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, GradError>, Vec<Array<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, c, hw, o, classes) = (2, 2, 6, 3, 3);
    let pad = (seed % 2) as usize;
    let side = (hw + 2 * pad - 2) / 2;
    let mut p = ParamSet::new();
    p.push("conv_w", uniform(&mut rng, &[o, c, 3, 3], 0.5)).unwrap();
    p.push("conv_b", uniform(&mut rng, &[o], 0.2)).unwrap();
    p.push("fc_w", uniform(&mut rng, &[o * side * side, classes], 0.5)).unwrap();
    p.push("fc_b", uniform(&mut rng, &[classes], 0.2)).unwrap();
    let x = uniform(&mut rng, &[batch, c, hw, hw], 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let v = p.values().iter().map(|a| uniform(&mut rng, a.shape(), 1.0)).collect();
    let f = move |ps: &[Tensor<f64>]| {
        let x = Tensor::constant(x.clone());
        let h = x.conv2d(&ps[0], pad)?.bias_add(&ps[1])?.relu()?.maxpool2x2()?.flatten()?;
        h.matmul(&ps[2])?.bias_add(&ps[3])?.softmax_cross_entropy(&labels)
    };
    (p, f, v)
}

/// Runs random MLP and CNN instances until `count` non-excluded ones were
/// compared (alternating architectures).
pub fn run_suite(count: usize, seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport, GradError> {
    let mut checked = Vec::new();
    let mut excluded = Vec::new();
    let mut i = 0u64;
    while checked.len() < count {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
        let rep = if i.is_multiple_of(2) {
            let (p, f, v) = random_mlp(s);
            gradcheck(&format!("mlp#{s}"), &p, f, &v, cfg)?
        } else {
            let (p, f, v) = random_cnn(s);
            gradcheck(&format!("cnn#{s}"), &p, f, &v, cfg)?
        };
        if rep.excluded {
            excluded.push(rep);
        } else {
            checked.push(rep);
        }
        i += 1;
        if i > 20 * count as u64 + 100 {
            break;
        }
    }
    let max_grad_rel = checked.iter().fold(0.0f64, |m, r| m.max(r.max_grad_rel));
    let max_hvp_rel = checked.iter().fold(0.0f64, |m, r| m.max(r.max_hvp_rel));
    let passed = checked.len() == count && checked.iter().all(|r| r.passed);
    Ok(SuiteReport { checked, excluded, max_grad_rel, max_hvp_rel, passed })
}
