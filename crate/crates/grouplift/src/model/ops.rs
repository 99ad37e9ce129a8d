//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{DType, Device, Tensor, D};
use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::Rng;

use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x @ w + b` for `x` of shape `[..., in]`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (in_dim, out_dim) = w.dims2()?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, in_dim))?.matmul(w)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_shape = dims;
    *out_shape.last_mut().expect("non-scalar input") = out_dim;
    Ok(y.reshape(out_shape)?)
}

/// Layer normalization over the last axis.
pub(crate) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// Softmax over the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // the shift cancels analytically, so it carries no gradient
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub(crate) fn dropout(x: &Tensor, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Sinusoidal features of a diffusion step (`channels` must be even).
pub(crate) fn step_features(step: usize, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let mut out = vec![0.0; channels];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

pub(crate) fn to_tensor(a: ArrayViewD<f64>, dtype: DType) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn to_array(t: &Tensor) -> Result<ArrayD<f64>> {
    let shape = t.dims().to_vec();
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("tensor shape matches its data"))
}
