//! Named parameter collections and the SGD / Adam update rules.

use serde::{Deserialize, Serialize};

use super::array::{Array, Scalar};
use super::tape::{Tape, Tensor};
use super::GradError;

/// Ordered, uniquely named parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array<T>) -> Result<(), GradError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(GradError::DuplicateParam(name));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn attach(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Parameters as constants, for evaluation without a tape.
    pub fn constants(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| Tensor::constant(v.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), values: self.values.iter().map(Array::cast).collect() }
    }

    pub fn with_values(&self, values: Vec<Array<T>>) -> Result<Self, GradError> {
        check_shapes(&self.values, &values)?;
        Ok(Self { names: self.names.clone(), values })
    }

    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }
}

fn check_shapes<T: Scalar>(a: &[Array<T>], b: &[Array<T>]) -> Result<(), GradError> {
    if a.len() != b.len() {
        return Err(GradError::Shape(format!("{} params vs {} gradients", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(GradError::Shape(format!("param {:?} vs gradient {:?}", x.shape(), y.shape())));
        }
    }
    Ok(())
}

/// `theta <- theta - lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, grads: &[Array<T>], lr: T) -> Result<(), GradError> {
    check_shapes(&params.values, grads)?;
    if !(lr > T::zero()) {
        return Err(GradError::Hyper(format!("learning rate must be positive, got {lr:?}")));
    }
    for (p, g) in params.values.iter_mut().zip(grads) {
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x = *x - lr * d;
        }
    }
    Ok(())
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.values.iter().map(|p| Array::zeros(p.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Array<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<(), GradError> {
    check_shapes(&params.values, grads)?;
    check_shapes(&params.values, &state.m)?;
    check_shapes(&params.values, &state.v)?;
    state.t += 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let bc1 = T::one() - T::lit(state.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::lit(state.beta2.powi(state.t as i32));
    let eps = T::lit(state.eps);
    for (((p, g), m), v) in params.values.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((x, &gi), mi), vi) in it {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
