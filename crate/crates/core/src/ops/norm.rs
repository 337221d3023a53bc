use crate::error::{shape_err, Result};
use crate::ops::activation::axis_split;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

fn check_affine<T: Scalar>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            op,
            format!("gamma {:?} / beta {:?} must be [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Normalized values and inverse std per row, saved for the backward pass.
pub struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalization over the trailing axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<LayerNormOut<T>> {
    let c = *x.shape().last().unwrap();
    check_affine("layer_norm", c, gamma, beta)?;
    let rows = x.numel() / c;
    let eps = lit::<T>(LAYER_NORM_EPS);
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(LayerNormOut {
        y: Tensor::new(x.shape(), y)?,
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
    })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    let rows = xhat.numel() / c;
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut gx = vec![T::zero(); xhat.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..rows {
        let h = &xhat.data()[r * c..(r + 1) * c];
        let g = &grad_out.data()[r * c..(r + 1) * c];
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for j in 0..c {
            gg[j] += g[j] * h[j];
            gb[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
            sum_d += dxhat[j];
            sum_dh += dxhat[j] * h[j];
        }
        for j in 0..c {
            gx[r * c + j] = inv_std[r] * (dxhat[j] - inv_c * sum_d - h[j] * inv_c * sum_dh);
        }
    }
    Ok((
        Tensor::new(xhat.shape(), gx)?,
        Tensor::new(&[c], gg)?,
        Tensor::new(&[c], gb)?,
    ))
}

/// Per-channel batch statistics (axis 1), biased variance.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (outer, c, inner) = axis_split("batch_norm", x.shape(), 1)?;
    let count = T::from_usize(outer * inner).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            s += x.data()[base..base + inner].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            v += x.data()[base..base + inner].iter().map(|&u| (u - m) * (u - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok((mean, var))
}

pub struct BatchNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Channel-wise normalization with the given statistics and affine params.
pub fn batch_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<BatchNormOut<T>> {
    let (outer, c, inner) = axis_split("batch_norm", x.shape(), 1)?;
    check_affine("batch_norm", c, gamma, beta)?;
    let eps = lit::<T>(BATCH_NORM_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for j in base..base + inner {
                let h = (x.data()[j] - m) * is;
                xhat[j] = h;
                y[j] = h * g + b;
            }
        }
    }
    Ok(BatchNormOut {
        y: Tensor::new(x.shape(), y)?,
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
        batch_mean: mean.to_vec(),
        batch_var: var.to_vec(),
    })
}

/// Training-mode batch norm: normalizes with the current batch statistics.
pub fn batch_norm_train<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<BatchNormOut<T>> {
    let (mean, var) = channel_stats(x)?;
    batch_norm_with_stats(x, &mean, &var, gamma, beta)
}

/// Backward of [`batch_norm_train`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outer, c, inner) = axis_split("batch_norm_backward", xhat.shape(), 1)?;
    let m = T::from_usize(outer * inner).unwrap();
    let (h, g) = (xhat.data(), grad_out.data());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for j in base..base + inner {
                gg[ch] += g[j] * h[j];
                gb[ch] += g[j];
            }
        }
    }
    let mut gx = vec![T::zero(); xhat.numel()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let k = gamma.data()[ch] * inv_std[ch] / m;
            for j in base..base + inner {
                gx[j] = k * (m * g[j] - gb[ch] - h[j] * gg[ch]);
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape(), gx)?,
        Tensor::new(&[c], gg)?,
        Tensor::new(&[c], gb)?,
    ))
}

/// Backward of eval-mode batch norm (fixed statistics).
pub fn batch_norm_eval_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outer, c, inner) = axis_split("batch_norm_backward", xhat.shape(), 1)?;
    let (h, g) = (xhat.data(), grad_out.data());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut gx = vec![T::zero(); xhat.numel()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let k = gamma.data()[ch] * inv_std[ch];
            for j in base..base + inner {
                gg[ch] += g[j] * h[j];
                gb[ch] += g[j];
                gx[j] = k * g[j];
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape(), gx)?,
        Tensor::new(&[c], gg)?,
        Tensor::new(&[c], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[2, 5], 3.5);
        let g = Tensor::ones(&[5]);
        let b = Tensor::zeros(&[5]);
        let out = layer_norm(&x, &g, &b).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let x = Tensor::<f64>::from_fn(&[3, 8], |i| (i as f64 * 1.3).sin() * 4.0 + 1.0);
        let out = layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8])).unwrap();
        for row in out.y.data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_normalizes_channels() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2, 2], |i| (i as f64 * 0.77).cos() * 2.0);
        let out = batch_norm_train(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3])).unwrap();
        let (m, v) = channel_stats(&out.y).unwrap();
        for c in 0..3 {
            assert!(m[c].abs() < 1e-12);
            assert!((v[c] - 1.0).abs() < 1e-4);
        }
    }
}
