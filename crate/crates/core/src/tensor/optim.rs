use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum buffer and hyper-parameters for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T = f32> {
    pub velocity: Tensor<T>,
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(shape: &[usize], lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            velocity: Tensor::zeros(shape),
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_momentum_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut OptimState<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("sgd_momentum_step", param.shape(), grad.shape()));
    }
    if state.velocity.shape() != param.shape() {
        return Err(Error::dim("sgd_momentum_step velocity", state.velocity.shape(), param.shape()));
    }
    if !grad.all_finite() {
        return Err(Error::Divergence("non-finite gradient entry".into()));
    }
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, v), &g) in param
        .data_mut()
        .iter_mut()
        .zip(state.velocity.data_mut())
        .zip(grad.data())
    {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Proximal operator of `t·|x|`: `sign(x)·max(|x| − t, 0)`.
pub fn soft_threshold_scalar<T: Scalar>(x: T, t: T) -> Result<T> {
    if !(t >= T::ZERO) {
        return Err(Error::Input(format!("soft-threshold level must be non-negative, got {t:?}")));
    }
    Ok(shrink(x, t))
}

#[inline]
pub(crate) fn shrink<T: Scalar>(x: T, t: T) -> T {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        T::ZERO
    }
}

pub fn soft_threshold<T: Scalar>(x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    soft_threshold_scalar(T::ZERO, t)?;
    Ok(x.map(|v| shrink(v, t)))
}
