//! Per-channel batch normalization over NCHW activations.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which statistics normalize the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Mini-batch mean and population variance, differentiated through.
    BatchStats,
    /// Stored global statistics, treated as constants.
    FrozenStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> BnParams<T> {
    /// γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn new(channels: usize, eps: T) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.len() != c {
                return Err(Error::dim("BnParams", self.gamma.shape(), t.shape()));
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::ZERO) {
            return Err(Error::Input("BatchNorm running variance must be non-negative".into()));
        }
        if self.eps <= T::ZERO {
            return Err(Error::Input("BatchNorm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BnParams<U> {
        BnParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: U::of(self.eps.as_f64()),
        }
    }
}

/// Context kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T = f32> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
    /// Mini-batch mean and population variance (BatchStats only).
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BnParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    batchnorm_forward_with(
        input,
        params.gamma.data(),
        params.beta.data(),
        params.running_mean.data(),
        params.running_var.data(),
        params.eps,
        mode,
    )
}

/// Per-channel mean and population variance of an NCHW tensor.
pub(crate) fn channel_moments<T: Scalar>(input: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = input.dims4("channel moments")?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let data = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            let start = (s * c + ch) * plane;
            sum += data[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for s in 0..n {
            let start = (s * c + ch) * plane;
            sq += data[start..start + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

pub(crate) fn batchnorm_forward_with<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    mode: BnMode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let [n, c, h, w] = input.dims4("batchnorm input")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("batchnorm", input.shape(), &[gamma.len()]));
    }
    let plane = h * w;

    let (mean, var, batch_stats): (Vec<T>, Vec<T>, _) = match mode {
        BnMode::BatchStats => {
            if n * plane < 2 {
                return Err(Error::Config(format!(
                    "batch statistics need at least 2 values per channel, got {}",
                    n * plane
                )));
            }
            let (m, v) = channel_moments(input)?;
            (
                m.iter().map(|&x| T::of(x)).collect(),
                v.iter().map(|&x| T::of(x)).collect(),
                Some((m, v)),
            )
        }
        BnMode::FrozenStats => {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::dim("batchnorm", input.shape(), &[running_mean.len()]));
            }
            (running_mean.to_vec(), running_var.to_vec(), None)
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    {
        let x = input.data();
        let xh = xhat.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * plane;
                for i in start..start + plane {
                    xh[i] = (x[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
    }
    {
        let xh = xhat.data();
        let y = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * plane;
                for i in start..start + plane {
                    y[i] = gamma[ch] * xh[i] + beta[ch];
                }
            }
        }
    }
    let (batch_mean, batch_var) = match batch_stats {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };
    Ok((
        out,
        BnSaved {
            mode,
            xhat,
            inv_std,
            gamma: gamma.to_vec(),
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)` for the mode recorded in `saved`.
pub fn batchnorm_backward<T: Scalar>(
    saved: &BnSaved<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_output.shape() != saved.xhat.shape() {
        return Err(Error::dim("batchnorm_backward", grad_output.shape(), saved.xhat.shape()));
    }
    let [n, c, h, w] = grad_output.dims4("batchnorm grad")?;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let gy = grad_output.data();
    let xh = saved.xhat.data();

    let mut g_gamma = vec![T::ZERO; c];
    let mut g_beta = vec![T::ZERO; c];
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * plane;
            let mut gg = T::ZERO;
            let mut gb = T::ZERO;
            for i in start..start + plane {
                gg += gy[i] * xh[i];
                gb += gy[i];
            }
            g_gamma[ch] += gg;
            g_beta[ch] += gb;
        }
    }

    let mut gx = Tensor::zeros(grad_output.shape());
    let gxd = gx.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * plane;
            let scale = saved.gamma[ch] * saved.inv_std[ch];
            match saved.mode {
                BnMode::FrozenStats => {
                    for i in start..start + plane {
                        gxd[i] = scale * gy[i];
                    }
                }
                BnMode::BatchStats => {
                    let k = scale / count;
                    for i in start..start + plane {
                        gxd[i] = k * (count * gy[i] - g_beta[ch] - xh[i] * g_gamma[ch]);
                    }
                }
            }
        }
    }
    Ok((gx, Tensor::vector(g_gamma), Tensor::vector(g_beta)))
}
