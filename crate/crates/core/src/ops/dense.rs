//! Matrix products over the trailing axes.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    let (cin, cout) = match w.shape() {
        &[i, o] => (i, o),
        s => return Err(shape_err("linear", format!("weight must be 2-D, got {s:?}"))),
    };
    let last = *x.shape().last().expect("tensors have rank >= 1");
    if last != cin {
        return Err(shape_err(
            "linear",
            format!("trailing dim {last} of input {:?} != weight rows {cin}", x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(shape_err("linear", format!("bias {:?}, expected [{cout}]", b.shape())));
        }
    }
    Ok((x.numel() / cin, cin, cout))
}

/// `y[..., o] = sum_i x[..., i] w[i, o] + b[o]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, cin, cout) = linear_dims(x, w, b)?;
    let mut out = vec![T::zero(); rows * cout];
    gemm(rows, cin, cout, x.data(), false, w.data(), false, &mut out, false);
    if let Some(b) = b {
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(b.data()).for_each(|(o, &bb)| *o += bb);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(&shape, out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, cin, cout) = linear_dims(x, w, None)?;
    let mut gx = vec![T::zero(); rows * cin];
    gemm(rows, cout, cin, grad_out.data(), false, w.data(), true, &mut gx, false);
    let mut gw = vec![T::zero(); cin * cout];
    gemm(cin, rows, cout, x.data(), true, grad_out.data(), false, &mut gw, false);
    let mut gb = vec![T::zero(); cout];
    for row in grad_out.data().chunks(cout) {
        gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[cout], gb)?,
    ))
}

/// Leading batch extent plus the `(rows, cols)` of the two trailing axes.
fn split_batch(op: &'static str, shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].to_vec(), shape[r - 2], shape[r - 1]))
}

/// Batched `a @ b` (or `a @ b^T` when `transpose_b`) over identical leading axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
    let (ba, m, k) = split_batch("matmul", a.shape())?;
    let (bb, r, c) = split_batch("matmul", b.shape())?;
    let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
    if ba != bb || k != kb {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}{}", a.shape(), b.shape(), if transpose_b { "^T" } else { "" }),
        ));
    }
    let batch: usize = ba.iter().product();
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * k * n..(i + 1) * k * n],
            transpose_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let mut shape = ba;
    shape.extend([m, n]);
    Tensor::new(&shape, out)
}

/// Returns `(grad_a, grad_b)` for [`matmul`].
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ba, m, k) = split_batch("matmul_backward", a.shape())?;
    let n = grad_out.shape()[grad_out.rank() - 1];
    let batch: usize = ba.iter().product();
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for i in 0..batch {
        let g = &grad_out.data()[i * m * n..(i + 1) * m * n];
        let av = &a.data()[i * m * k..(i + 1) * m * k];
        let bv = &b.data()[i * k * n..(i + 1) * k * n];
        // dA = G B^T  (B is k x n, or n x k when transposed)
        gemm(m, n, k, g, false, bv, !transpose_b, &mut ga[i * m * k..(i + 1) * m * k], false);
        if transpose_b {
            // B stored n x k: dB = G^T A
            gemm(n, m, k, g, true, av, false, &mut gb[i * k * n..(i + 1) * k * n], false);
        } else {
            gemm(k, m, n, av, true, g, false, &mut gb[i * k * n..(i + 1) * k * n], false);
        }
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_is_identity() {
        let x = Tensor::<f64>::from_fn(&[5, 3], |i| i as f64 - 4.0);
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &w, None).unwrap(), x);
    }

    #[test]
    fn linear_shapes() {
        let x = Tensor::<f32>::zeros(&[5, 3]);
        let w = Tensor::<f32>::zeros(&[3, 4]);
        assert_eq!(linear(&x, &w, None).unwrap().shape(), &[5, 4]);
        let bad = Tensor::<f32>::zeros(&[4, 4]);
        assert!(linear(&x, &bad, None).is_err());
    }

    #[test]
    fn matmul_transpose_agrees() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.3).sin());
        let b = Tensor::<f64>::from_fn(&[2, 4, 5], |i| (i as f64 * 0.7).cos());
        let bt = b.permute(&[0, 2, 1]).unwrap();
        let c1 = matmul(&a, &b, false).unwrap();
        let c2 = matmul(&a, &bt, true).unwrap();
        assert!(c1.max_abs_diff(&c2).unwrap() < 1e-12);
        assert_eq!(c1.shape(), &[2, 3, 5]);
    }
}
