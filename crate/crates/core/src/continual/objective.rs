//! Losses shared by the trainers: the meta-learned domain randomization
//! objective, quadratic anchoring penalties and the diagonal Fisher estimate.

use rand::Rng;

use crate::gradcore::{grad, Array, GradError, ParamSet, Scalar, Tensor};
use crate::models::{task_loss, Classifier};

/// Inputs of one simulated adaptation: the transformed meta batch `T(x_meta)`
/// with its labels, and the transformed main batch `T(x)`.
pub struct MetaBatch<T: Scalar> {
    pub x_meta: Tensor<T>,
    pub y_meta: Vec<usize>,
    pub x_main: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaHyper {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Gradient steps from `theta` to `theta_hat`.
    pub inner_steps: usize,
    /// Treat the inner gradient as a constant (no second-order path).
    pub first_order: bool,
}

/// The scalar objective and its parts.
pub struct MetaTerms<T: Scalar> {
    pub total: Tensor<T>,
    pub task: T,
    pub recall: T,
    pub adapt: T,
}

/// `theta_hat` after `inner_steps` plain gradient steps on `x_meta`.
pub fn adapted_params<M: Classifier, T: Scalar>(
    model: &M,
    params: &[Tensor<T>],
    m: &MetaBatch<T>,
    h: &MetaHyper,
) -> Result<Vec<Tensor<T>>, GradError> {
    let mut cur = params.to_vec();
    for _ in 0..h.inner_steps {
        let inner = task_loss(&model.logits(&cur, &m.x_meta)?, &m.y_meta)?;
        let g = grad(&inner, &cur, !h.first_order)?;
        cur = cur
            .iter()
            .zip(&g)
            .map(|(p, g)| {
                let g = if h.first_order { g.detach() } else { g.clone() };
                p.sub(&g.scale(T::lit(h.alpha))?)
            })
            .collect::<Result<_, _>>()?;
    }
    Ok(cur)
}

/// `L(x; theta) + beta * mean_j L(x; theta_hat_j) + gamma * mean_j L(T_j(x); theta_hat_j)`,
/// where `theta_hat_j` adapts `theta` to the `j`-th meta batch. Terms with a
/// zero weight are left out of the graph, so with `beta = gamma = 0` the
/// gradient is exactly that of the plain loss.
///
/// The current-task term is evaluated on `task`, which is `(x, y)` itself or
/// `(x, y)` stacked with replayed memory samples.
pub fn metadr_objective<M: Classifier, T: Scalar>(
    model: &M,
    params: &[Tensor<T>],
    task: (&Tensor<T>, &[usize]),
    x: &Tensor<T>,
    y: &[usize],
    metas: &[MetaBatch<T>],
    h: &MetaHyper,
) -> Result<MetaTerms<T>, GradError> {
    if !(h.alpha >= 0.0 && h.beta >= 0.0 && h.gamma >= 0.0) || h.inner_steps == 0 {
        return Err(GradError::Hyper(format!("{h:?}")));
    }
    let task = task_loss(&model.logits(params, task.0)?, task.1)?;
    let mut terms = MetaTerms { task: task.item(), recall: T::zero(), adapt: T::zero(), total: task };
    if (h.beta == 0.0 && h.gamma == 0.0) || metas.is_empty() {
        return Ok(terms);
    }
    let k = T::lit(1.0 / metas.len() as f64);
    let mut recall: Option<Tensor<T>> = None;
    let mut adapt: Option<Tensor<T>> = None;
    let acc = |slot: &mut Option<Tensor<T>>, v: Tensor<T>| -> Result<(), GradError> {
        *slot = Some(match slot.take() {
            None => v,
            Some(s) => s.add(&v)?,
        });
        Ok(())
    };
    for m in metas {
        let hat = adapted_params(model, params, m, h)?;
        if h.beta != 0.0 {
            acc(&mut recall, task_loss(&model.logits(&hat, x)?, y)?)?;
        }
        if h.gamma != 0.0 {
            acc(&mut adapt, task_loss(&model.logits(&hat, &m.x_main)?, y)?)?;
        }
    }
    if let Some(r) = recall {
        let r = r.scale(k)?;
        terms.recall = r.item();
        terms.total = terms.total.add(&r.scale(T::lit(h.beta))?)?;
    }
    if let Some(a) = adapt {
        let a = a.scale(k)?;
        terms.adapt = a.item();
        terms.total = terms.total.add(&a.scale(T::lit(h.gamma))?)?;
    }
    Ok(terms)
}

/// One past domain's quadratic penalty `(lambda / 2) * sum_i w_i (theta_i - anchor_i)^2`,
/// with `w = 1` (L2) or the diagonal Fisher (EWC).
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor<T> {
    pub domain: usize,
    pub params: Vec<Array<T>>,
    /// `None` weighs every coordinate by 1.
    pub fisher: Option<Vec<Array<T>>>,
}

pub fn anchor_penalty<T: Scalar>(params: &[Tensor<T>], anchor: &Anchor<T>, lambda: f64) -> Result<Tensor<T>, GradError> {
    if params.len() != anchor.params.len() {
        return Err(GradError::Shape(format!("{} params, {} anchors", params.len(), anchor.params.len())));
    }
    let mut total: Option<Tensor<T>> = None;
    for (i, p) in params.iter().enumerate() {
        let d = p.sub(&Tensor::constant(anchor.params[i].clone()))?;
        let mut sq = d.mul(&d)?;
        if let Some(f) = &anchor.fisher {
            sq = sq.mul(&Tensor::constant(f[i].clone()))?;
        }
        let s = sq.sum()?;
        total = Some(match total {
            None => s,
            Some(t) => t.add(&s)?,
        });
    }
    total.unwrap_or_else(|| Tensor::scalar(T::zero())).scale(T::lit(lambda / 2.0))
}

/// Sum of the penalties of all anchors.
pub fn penalty<T: Scalar>(params: &[Tensor<T>], anchors: &[Anchor<T>], lambda: f64) -> Result<Option<Tensor<T>>, GradError> {
    let mut total: Option<Tensor<T>> = None;
    for a in anchors {
        let p = anchor_penalty(params, a, lambda)?;
        total = Some(match total {
            None => p,
            Some(t) => t.add(&p)?,
        });
    }
    Ok(total)
}

/// Diagonal Fisher: mean over `samples` drawn inputs of
/// `E_{y ~ p(y|x)} (d log p(y|x) / d theta)^2`, the expectation taken exactly
/// over the model's predicted label distribution. `logits` maps the
/// parameters and a sample index to `[1, classes]` logits; `pick` chooses the
/// sample index of each draw.
pub fn fisher_diagonal<T, F, R>(
    params: &ParamSet<T>,
    samples: usize,
    mut pick: impl FnMut(&mut R) -> usize,
    logits: F,
    rng: &mut R,
) -> Result<Vec<Array<T>>, GradError>
where
    T: Scalar,
    R: Rng,
    F: Fn(&[Tensor<T>], usize) -> Result<Tensor<T>, GradError>,
{
    let mut acc: Vec<Vec<f64>> = params.values().iter().map(|p| vec![0.0; p.len()]).collect();
    for _ in 0..samples {
        let i = pick(rng);
        let tape = crate::gradcore::Tape::new();
        let ps = params.attach(&tape);
        let z = logits(&ps, i)?;
        let probs: Vec<f64> = z.detach().softmax()?.value().data().iter().map(|p| p.as_f64()).collect();
        for (y, &py) in probs.iter().enumerate() {
            if py == 0.0 {
                continue;
            }
            let g = grad(&z.softmax_cross_entropy(&[y])?, &ps, false)?;
            for (a, g) in acc.iter_mut().zip(&g) {
                for (a, v) in a.iter_mut().zip(g.value().data()) {
                    let v = v.as_f64();
                    *a += py * v * v;
                }
            }
        }
    }
    let n = samples.max(1) as f64;
    params
        .values()
        .iter()
        .zip(acc)
        .map(|(p, a)| Array::from_f64(p.shape().to_vec(), &a.iter().map(|v| v / n).collect::<Vec<_>>()))
        .collect()
}
