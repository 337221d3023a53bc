use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(out[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (out[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split("softmax_backward", y.shape(), axis)?;
    let (yd, gd) = (y.data(), grad_out.data());
    let mut gx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), gx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (T::one() + lit::<T>(3.0) * a * x * x);
    lit::<T>(0.5) * (T::one() + t) + lit::<T>(0.5) * x * (T::one() - t * t) * du
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

fn prelu_dims<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(shape_err("prelu", format!("need a channel axis, got {:?}", x.shape())));
    }
    let (outer, c, inner) = axis_split("prelu", x.shape(), 1)?;
    if slope.shape() != [c] {
        return Err(shape_err(
            "prelu",
            format!("slope {:?} does not match {c} channels", slope.shape()),
        ));
    }
    Ok((outer, c, inner))
}

/// Per-channel PReLU over axis 1.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, c, inner) = prelu_dims(x, slope)?;
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for (ch, &a) in slope.data().iter().enumerate() {
            let base = (o * c + ch) * inner;
            for v in &mut out[base..base + inner] {
                if *v < T::zero() {
                    *v *= a;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(grad_x, grad_slope)`.
pub fn prelu_backward<T: Scalar>(
    x: &Tensor<T>,
    slope: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (outer, c, inner) = prelu_dims(x, slope)?;
    let mut gx = grad_out.data().to_vec();
    let mut gs = vec![T::zero(); c];
    for o in 0..outer {
        for (ch, &a) in slope.data().iter().enumerate() {
            let base = (o * c + ch) * inner;
            for j in base..base + inner {
                let v = x.data()[j];
                if v < T::zero() {
                    gs[ch] += v * gx[j];
                    gx[j] *= a;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(&[c], gs)?))
}
