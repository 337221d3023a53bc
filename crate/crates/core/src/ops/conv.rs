//! 3D convolution kernels (direct, grouped, transposed) via im2col + gemm.
//!
//! Layout is channel-first `(N, C, H, W, D)` with `D` contiguous. Weights are
//! `(C_out, C_in / groups, k_h, k_w, k_d)` for convolution and
//! `(C_in, C_out, k_h, k_w, k_d)` for the transposed form, so a single weight
//! tensor serves both directions of an adjoint pair.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{dims5, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Cubic kernel, stride 1, no padding, one group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride; 3];
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = [padding; 3];
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Depthwise spec with `kernel == stride == r`.
    pub fn depthwise_aggregate(channels: usize, r: usize) -> Self {
        Self::new(channels, channels, r).with_stride(r).with_groups(channels)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.out_channels > 0
            && self.groups > 0
            && self.kernel.iter().all(|&k| k > 0)
            && self.stride.iter().all(|&s| s > 0);
        if !positive {
            return Err(Error::Config(format!("conv spec has a zero field: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// Weight shape of the transposed convolution with this geometry.
    pub fn transposed_weight_shape(&self) -> [usize; 5] {
        [
            self.in_channels,
            self.out_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// `floor((in + 2 pad - k) / s) + 1` per axis; fails if any extent is < 1.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::Config(format!(
                    "axis {a}: extent {} with padding {} is smaller than kernel {}",
                    input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(in - 1) s - 2 pad + k` per axis.
    pub fn transposed_output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::Config(format!(
                    "axis {a}: transposed output extent would be < 1"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Valid output-index range along one axis for a given kernel tap.
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + tap - pad must lie in [0, in_len)
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi_num = in_len + pad;
    let hi = if hi_num <= tap {
        0
    } else {
        ((hi_num - tap - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

struct Geometry {
    in_ext: [usize; 3],
    out_ext: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.in_ext.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out_ext.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Unfold `channels` input planes into a `(channels * K, P)` column matrix.
fn im2col<T: Scalar>(x: &[T], channels: usize, g: &Geometry, col: &mut [T]) {
    let [ih, iw, id] = g.in_ext;
    let [oh, ow, od] = g.out_ext;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.padding;
    let p = g.out_vol();
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * ih * iw * id..(c + 1) * ih * iw * id];
        for a in 0..kh {
            let (h0, h1) = tap_range(oh, ih, sh, a, ph);
            for b in 0..kw {
                let (w0, w1) = tap_range(ow, iw, sw, b, pw);
                for e in 0..kd {
                    let (d0, d1) = tap_range(od, id, sd, e, pd);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.iter_mut().for_each(|v| *v = T::zero());
                    for y in h0..h1 {
                        let sy = y * sh + a - ph;
                        for z in w0..w1 {
                            let sz = z * sw + b - pw;
                            let src_base = (sy * iw + sz) * id;
                            let dst_base = (y * ow + z) * od;
                            if sd == 1 {
                                let s0 = src_base + d0 + e - pd;
                                dst[dst_base + d0..dst_base + d1]
                                    .copy_from_slice(&plane[s0..s0 + (d1 - d0)]);
                            } else {
                                for t in d0..d1 {
                                    dst[dst_base + t] = plane[src_base + t * sd + e - pd];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Fold a `(channels * K, P)` column matrix back, accumulating into `x`.
fn col2im<T: Scalar>(col: &[T], channels: usize, g: &Geometry, x: &mut [T]) {
    let [ih, iw, id] = g.in_ext;
    let [oh, ow, od] = g.out_ext;
    let [kh, kw, kd] = g.kernel;
    let [sh, sw, sd] = g.stride;
    let [ph, pw, pd] = g.padding;
    let p = g.out_vol();
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut x[c * ih * iw * id..(c + 1) * ih * iw * id];
        for a in 0..kh {
            let (h0, h1) = tap_range(oh, ih, sh, a, ph);
            for b in 0..kw {
                let (w0, w1) = tap_range(ow, iw, sw, b, pw);
                for e in 0..kd {
                    let (d0, d1) = tap_range(od, id, sd, e, pd);
                    let src = &col[row * p..(row + 1) * p];
                    for y in h0..h1 {
                        let sy = y * sh + a - ph;
                        for z in w0..w1 {
                            let sz = z * sw + b - pw;
                            let dst_base = (sy * iw + sz) * id;
                            let src_base = (y * ow + z) * od;
                            for t in d0..d1 {
                                plane[dst_base + t * sd + e - pd] += src[src_base + t];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_conv_operands<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<[usize; 5]> {
    spec.validate()?;
    let dims = dims5(op, x.shape())?;
    if dims[1] != spec.in_channels {
        return Err(shape_err(
            op,
            format!("input has {} channels, spec expects {}", dims[1], spec.in_channels),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(shape_err(
            op,
            format!("weight {:?}, expected {:?}", weight.shape(), spec.weight_shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(shape_err(
                op,
                format!("bias {:?}, expected [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    Ok(dims)
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, channels: usize, vol: usize) {
    if let Some(b) = bias {
        for chunk in out.chunks_mut(channels * vol) {
            for (c, plane) in chunk.chunks_mut(vol).enumerate() {
                let bc = b.data()[c];
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], n: usize, channels: usize, vol: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); channels];
    for s in 0..n {
        for (c, g) in gb.iter_mut().enumerate() {
            let base = (s * channels + c) * vol;
            *g += grad_out[base..base + vol].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[channels], gb).expect("bias grad shape")
}

/// Grouped 3D convolution.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, _, ih, iw, id] = check_conv_operands("conv3d", x, spec, weight, bias)?;
    let out_ext = spec.output_extents([ih, iw, id])?;
    let geo = Geometry {
        in_ext: [ih, iw, id],
        out_ext,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let (in_vol, p, k) = (geo.in_vol(), geo.out_vol(), geo.k_vol());
    let cout = spec.out_channels;
    let mut out = vec![T::zero(); n * cout * p];
    let w = weight.data();
    out.par_chunks_mut(cout * p)
        .zip(x.data().par_chunks(spec.in_channels * in_vol))
        .for_each(|(out_n, x_n)| {
            let mut col = vec![T::zero(); cin_g * k * p];
            for g in 0..spec.groups {
                im2col(&x_n[g * cin_g * in_vol..(g + 1) * cin_g * in_vol], cin_g, &geo, &mut col);
                let w_g = &w[g * cout_g * cin_g * k..(g + 1) * cout_g * cin_g * k];
                let o_g = &mut out_n[g * cout_g * p..(g + 1) * cout_g * p];
                gemm(cout_g, cin_g * k, p, w_g, false, &col, false, o_g, false);
            }
        });
    add_bias(&mut out, bias, cout, p);
    Tensor::new(&[n, cout, out_ext[0], out_ext[1], out_ext[2]], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv3d`] given the upstream gradient.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let [n, _, ih, iw, id] = check_conv_operands("conv3d_backward", x, spec, weight, None)?;
    let out_ext = spec.output_extents([ih, iw, id])?;
    let geo = Geometry {
        in_ext: [ih, iw, id],
        out_ext,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let (in_vol, p, k) = (geo.in_vol(), geo.out_vol(), geo.k_vol());
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let w = weight.data();
    let go = grad_out.data();
    let wlen = weight.numel();

    let mut gx = if need_input {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let mut partial_w = vec![T::zero(); n * wlen];

    let per_sample = |(s, (gw_n, gx_n)): (usize, (&mut [T], Option<&mut [T]>))| {
        let x_n = &x.data()[s * cin * in_vol..(s + 1) * cin * in_vol];
        let go_n = &go[s * cout * p..(s + 1) * cout * p];
        let mut col = vec![T::zero(); cin_g * k * p];
        let mut gx_n = gx_n;
        for g in 0..spec.groups {
            im2col(&x_n[g * cin_g * in_vol..(g + 1) * cin_g * in_vol], cin_g, &geo, &mut col);
            let go_g = &go_n[g * cout_g * p..(g + 1) * cout_g * p];
            let wr = g * cout_g * cin_g * k..(g + 1) * cout_g * cin_g * k;
            gemm(cout_g, p, cin_g * k, go_g, false, &col, true, &mut gw_n[wr.clone()], false);
            if let Some(gx_n) = gx_n.as_deref_mut() {
                gemm(cin_g * k, cout_g, p, &w[wr], true, go_g, false, &mut col, false);
                col2im(&col, cin_g, &geo, &mut gx_n[g * cin_g * in_vol..(g + 1) * cin_g * in_vol]);
            }
        }
    };
    if need_input {
        partial_w
            .par_chunks_mut(wlen)
            .zip(gx.par_chunks_mut(cin * in_vol).map(Some))
            .enumerate()
            .for_each(per_sample);
    } else {
        partial_w
            .par_chunks_mut(wlen)
            .map(|c| (c, None))
            .enumerate()
            .for_each(per_sample);
    }

    let mut gw = vec![T::zero(); wlen];
    for chunk in partial_w.chunks(wlen) {
        gw.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape(), gx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), gw)?,
        bias: bias_grad(go, n, cout, p),
    })
}

fn check_tconv_operands<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<[usize; 5]> {
    spec.validate()?;
    if spec.groups != 1 {
        return Err(Error::Config("transposed convolution supports groups = 1 only".into()));
    }
    let dims = dims5(op, x.shape())?;
    if dims[1] != spec.in_channels {
        return Err(shape_err(
            op,
            format!("input has {} channels, spec expects {}", dims[1], spec.in_channels),
        ));
    }
    if weight.shape() != spec.transposed_weight_shape() {
        return Err(shape_err(
            op,
            format!(
                "weight {:?}, expected {:?}",
                weight.shape(),
                spec.transposed_weight_shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(shape_err(
                op,
                format!("bias {:?}, expected [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    Ok(dims)
}

/// Transposed 3D convolution: the adjoint of [`conv3d`] with the same
/// geometry, mapping `spec.in_channels -> spec.out_channels`.
pub fn conv_transpose3d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, _, ih, iw, id] = check_tconv_operands("conv_transpose3d", x, spec, weight, bias)?;
    let out_ext = spec.transposed_output_extents([ih, iw, id])?;
    // geometry of the forward conv that maps out_ext back to the input extents
    let geo = Geometry {
        in_ext: out_ext,
        out_ext: [ih, iw, id],
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (p_in, vol_out, k) = (geo.out_vol(), geo.in_vol(), geo.k_vol());
    let mut out = vec![T::zero(); n * cout * vol_out];
    out.par_chunks_mut(cout * vol_out)
        .zip(x.data().par_chunks(cin * p_in))
        .for_each(|(out_n, x_n)| {
            let mut col = vec![T::zero(); cout * k * p_in];
            gemm(cout * k, cin, p_in, weight.data(), true, x_n, false, &mut col, false);
            col2im(&col, cout, &geo, out_n);
        });
    add_bias(&mut out, bias, cout, vol_out);
    Tensor::new(&[n, cout, out_ext[0], out_ext[1], out_ext[2]], out)
}

pub fn conv_transpose3d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let [n, _, ih, iw, id] =
        check_tconv_operands("conv_transpose3d_backward", x, spec, weight, None)?;
    let out_ext = spec.transposed_output_extents([ih, iw, id])?;
    let geo = Geometry {
        in_ext: out_ext,
        out_ext: [ih, iw, id],
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (p_in, vol_out, k) = (geo.out_vol(), geo.in_vol(), geo.k_vol());
    let wlen = weight.numel();
    let go = grad_out.data();
    let mut gx = if need_input {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let mut partial_w = vec![T::zero(); n * wlen];
    let per_sample = |(s, (gw_n, gx_n)): (usize, (&mut [T], Option<&mut [T]>))| {
        let x_n = &x.data()[s * cin * p_in..(s + 1) * cin * p_in];
        let go_n = &go[s * cout * vol_out..(s + 1) * cout * vol_out];
        let mut col = vec![T::zero(); cout * k * p_in];
        im2col(go_n, cout, &geo, &mut col);
        // weight viewed as (cin, cout * k)
        gemm(cin, p_in, cout * k, x_n, false, &col, true, gw_n, false);
        if let Some(gx_n) = gx_n {
            gemm(cin, cout * k, p_in, weight.data(), false, &col, false, gx_n, false);
        }
    };
    if need_input {
        partial_w
            .par_chunks_mut(wlen)
            .zip(gx.par_chunks_mut(cin * p_in).map(Some))
            .enumerate()
            .for_each(per_sample);
    } else {
        partial_w
            .par_chunks_mut(wlen)
            .map(|c| (c, None))
            .enumerate()
            .for_each(per_sample);
    }
    let mut gw = vec![T::zero(); wlen];
    for chunk in partial_w.chunks(wlen) {
        gw.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape(), gx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), gw)?,
        bias: bias_grad(go, n, cout, vol_out),
    })
}
