//! Plain (non-linearized) layer kernels.

use crate::error::{Error, Result};
use crate::tensor::{self, group_index, moments, Tensor};

/// `W·x + b` along the leading axis of `x`. `bias: None` drops the constant.
pub fn dense(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, cols) = x.matrix_dims();
    let (out_rows, in_rows) = (weight.shape()[0], weight.shape()[1]);
    if rows != in_rows {
        return Err(Error::shape(
            "dense",
            format!("weight {:?} vs input {:?}", weight.shape(), x.shape()),
        ));
    }
    let mut out = vec![0.0; out_rows * cols];
    if let Some(b) = bias {
        for (r, chunk) in out.chunks_mut(cols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[r]);
        }
    }
    tensor::matmul_into(weight.data(), x.data(), &mut out, out_rows, in_rows, cols);
    let mut shape = x.shape().to_vec();
    shape[0] = out_rows;
    Tensor::new(shape, out)
}

/// Index of the leading-axis channel for every flat element.
pub(crate) fn channel_of(shape: &[usize]) -> impl Fn(usize) -> usize {
    let per: usize = shape[1..].iter().product();
    move |i| i / per
}

/// Per-channel `scale·x + shift`.
pub(crate) fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let ch = channel_of(x.shape());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| scale[ch(i)] * v + shift[ch(i)])
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Per-channel `γ/√(σ²+ε)` of a batch-norm layer.
pub fn batchnorm_scale(var: &Tensor, gamma: &Tensor, eps: f64) -> Vec<f64> {
    var.data()
        .iter()
        .zip(gamma.data())
        .map(|(v, g)| g / (v + eps).sqrt())
        .collect()
}

pub fn batchnorm(x: &Tensor, mean: &Tensor, var: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let scale = batchnorm_scale(var, gamma, eps);
    let shift: Vec<f64> = scale
        .iter()
        .zip(mean.data())
        .zip(beta.data())
        .map(|((s, m), b)| b - m * s)
        .collect();
    channel_affine(x, &scale, &shift)
}

/// Normalize over `axes` with the statistics of `x` itself; per-channel
/// affine. Returns the output and the (mean, variance) used.
pub fn normalize(
    x: &Tensor,
    axes: &[usize],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (mu, var) = moments(x, axes)?;
    let y = normalize_with(x, axes, &mu, &var, gamma, beta, eps);
    Ok((y, mu, var))
}

/// `γ_c·(x − μ_g)/√(σ²_g + ε) + β_c` with given group statistics.
pub(crate) fn normalize_with(
    x: &Tensor,
    axes: &[usize],
    mu: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Tensor {
    let gi = group_index(x.shape(), axes);
    let ch = channel_of(x.shape());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = gi[i];
            let c = ch(i);
            gamma.data()[c] * (v - mu.data()[g]) / (var.data()[g] + eps).sqrt() + beta.data()[c]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub const INSTANCE_AXES: [usize; 2] = [1, 2];

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Exact-erf GELU.
pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (out[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

/// Matrix view of `t` (leading axis rows), optionally transposed.
pub(crate) fn matrix_view(t: &Tensor, transpose: bool) -> Result<Tensor> {
    let (r, c) = t.matrix_dims();
    let m = t.reshape(&[r, c])?;
    if transpose {
        tensor::transpose(&m)
    } else {
        Ok(m)
    }
}

pub fn matmul_layer(
    a: &Tensor,
    b: &Tensor,
    transpose_a: bool,
    transpose_b: bool,
    out_shape: Option<&[usize]>,
) -> Result<Tensor> {
    let p = tensor::matmul(&matrix_view(a, transpose_a)?, &matrix_view(b, transpose_b)?)?;
    match out_shape {
        Some(s) => p.reshape(s),
        None => Ok(p),
    }
}
