//! ReLU, global average pooling, the linear classifier and its loss.

use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_output.shape() {
        return Err(Error::dim("relu_backward", output.shape(), grad_output.shape()));
    }
    let mut g = grad_output.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= T::ZERO {
            *gv = T::ZERO;
        }
    }
    Ok(g)
}

/// `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let scale = T::ONE / T::of(plane as f64);
    let data = x.data();
    let out = (0..n * c)
        .map(|i| data[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::dim("global_avg_pool_backward", input_shape, &[0, 0, 0, 0]));
    };
    if grad_output.shape() != [n, c] {
        return Err(Error::dim("global_avg_pool_backward", grad_output.shape(), &[n, c]));
    }
    let plane = h * w;
    let scale = T::ONE / T::of(plane as f64);
    let g = grad_output.data();
    Ok(Tensor::from_fn(input_shape, |i| g[i / plane] * scale))
}

/// `logits = features · weightᵀ + bias`, weight shaped `(classes, features)`.
pub fn linear_forward<T: Scalar>(features: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, f] = features.dims2("linear input")?;
    let [classes, wf] = weight.dims2("linear weight")?;
    if wf != f || bias.len() != classes {
        return Err(Error::dim("linear", features.shape(), weight.shape()));
    }
    let mut out = Tensor::zeros(&[n, classes]);
    matmul(n, f, classes, features.data(), false, weight.data(), true, T::ZERO, out.data_mut());
    for row in out.data_mut().chunks_mut(classes) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Returns `(grad_features, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    features: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, f] = features.dims2("linear input")?;
    let [classes, wf] = weight.dims2("linear weight")?;
    if wf != f || grad_output.shape() != [n, classes] {
        return Err(Error::dim("linear_backward", grad_output.shape(), &[n, classes]));
    }
    let mut gx = Tensor::zeros(&[n, f]);
    matmul(n, classes, f, grad_output.data(), false, weight.data(), false, T::ZERO, gx.data_mut());
    let mut gw = Tensor::zeros(&[classes, f]);
    matmul(classes, n, f, grad_output.data(), true, features.data(), false, T::ZERO, gw.data_mut());
    let mut gb = vec![T::ZERO; classes];
    for row in grad_output.data().chunks(classes) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((gx, gw, Tensor::vector(gb)))
}

/// Mean over the batch of `−log softmax(logits)[label]`, and its gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, classes] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", &[labels.len()], &[n]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut loss = 0.0f64;
    let inv_n = T::of(1.0 / n as f64);
    for (s, (row, g)) in logits
        .data()
        .chunks(classes)
        .zip(grad.data_mut().chunks_mut(classes))
        .enumerate()
    {
        let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let mut denom = T::ZERO;
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z - max).exp();
            denom += *gv;
        }
        loss += (denom.ln() - (row[labels[s]] - max)).as_f64();
        for gv in g.iter_mut() {
            *gv = *gv / denom * inv_n;
        }
        g[labels[s]] -= inv_n;
    }
    Ok((T::of(loss / n as f64), grad))
}
