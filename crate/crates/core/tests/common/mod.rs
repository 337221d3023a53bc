//! Naive reference implementations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use tmabts::ops::conv::ConvSpec;
use tmabts::Tensor;

/// `max |a - b| / max(max |b|, 1e-12)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Direct seven-deep loop over output voxels, taps and input channels.
pub fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let s = x.shape();
    let (n, ext) = (s[0], [s[2], s[3], s[4]]);
    let out = spec.output_extents(ext).unwrap();
    let (cin_g, cout_g) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
    let k = spec.kernel;
    let mut y = Vec::new();
    for bn in 0..n {
        for o in 0..spec.out_channels {
            let g = o / cout_g;
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for ci in 0..cin_g {
                            let c = g * cin_g + ci;
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for cc in 0..k[2] {
                                        let iz = (oz * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                        let iy = (oy * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                        let ix = (ox * spec.stride[2] + cc) as isize - spec.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= ext[0] || iy >= ext[1] || ix >= ext[2] {
                                            continue;
                                        }
                                        let xv = x.data()[(((bn * spec.in_channels + c) * ext[0] + iz) * ext[1] + iy) * ext[2] + ix];
                                        let wv = w.data()[(((o * cin_g + ci) * k[0] + a) * k[1] + bb) * k[2] + cc];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    y
}

/// Scatter form of the transposed convolution: every input voxel adds its
/// weighted kernel into the output at `p * stride - padding + tap`.
pub fn naive_conv_transpose(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let s = x.shape();
    let (n, ext) = (s[0], [s[2], s[3], s[4]]);
    let out = spec.transposed_output_extents(ext).unwrap();
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let vol = out[0] * out[1] * out[2];
    let mut y = vec![0.0; n * cout * vol];
    for bn in 0..n {
        for o in 0..cout {
            let bias = b.map_or(0.0, |b| b.data()[o]);
            y[(bn * cout + o) * vol..(bn * cout + o + 1) * vol].iter_mut().for_each(|v| *v = bias);
        }
        for i in 0..cin {
            for pz in 0..ext[0] {
                for py in 0..ext[1] {
                    for px in 0..ext[2] {
                        let xv = x.data()[(((bn * cin + i) * ext[0] + pz) * ext[1] + py) * ext[2] + px];
                        for o in 0..cout {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for cc in 0..k[2] {
                                        let z = (pz * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                        let yy = (py * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                        let xx = (px * spec.stride[2] + cc) as isize - spec.padding[2] as isize;
                                        if z < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, yy, xx) = (z as usize, yy as usize, xx as usize);
                                        if z >= out[0] || yy >= out[1] || xx >= out[2] {
                                            continue;
                                        }
                                        let wv = w.data()[(((i * cout + o) * k[0] + a) * k[1] + bb) * k[2] + cc];
                                        y[(bn * cout + o) * vol + (z * out[1] + yy) * out[2] + xx] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / cin;
    let mut y = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..cin {
                acc += x.data()[r * cin + i] * w.data()[i * cout + o];
            }
            y.push(acc);
        }
    }
    y
}

/// Random conv geometry small enough for the naive loops.
pub fn random_spec<R: Rng>(rng: &mut R, depthwise: bool) -> (ConvSpec, [usize; 3]) {
    let k = rng.random_range(1..=3usize);
    let stride = rng.random_range(1..=2usize);
    let padding = rng.random_range(0..k);
    let (cin, cout, groups) = if depthwise {
        let c = rng.random_range(1..=5usize);
        (c, c, c)
    } else {
        let g = rng.random_range(1..=2usize);
        (g * rng.random_range(1..=3usize), g * rng.random_range(1..=3usize), g)
    };
    let ext = [0; 3].map(|_| rng.random_range(k.max(2)..=6usize));
    let spec = ConvSpec::new(cin, cout, k).with_stride(stride).with_padding(padding).with_groups(groups);
    (spec, ext)
}

pub type Point = [usize; 3];

pub fn points(mask: &[u8], ext: [usize; 3]) -> Vec<Point> {
    let mut out = Vec::new();
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            for z in 0..ext[2] {
                if mask[(x * ext[1] + y) * ext[2] + z] != 0 {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Linear-interpolated percentile computed from its definition.
pub fn p95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// All-pairs symmetric HD95; `None` when either set is empty.
pub fn brute_hd95(a: &[u8], b: &[u8], ext: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let (pa, pb) = (points(a, ext), points(b, ext));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let dist = |p: &Point, q: &Point| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[Point], to: &[Point]| {
        p95(from
            .iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect())
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

/// DSC in percent from explicit index sets.
pub fn set_dsc(a: &[u8], b: &[u8]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i] != 0).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i] != 0).collect();
    if sa.is_empty() && sb.is_empty() {
        return 100.0;
    }
    200.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Random binary mask with density drawn per call.
pub fn random_mask<R: Rng>(rng: &mut R, ext: [usize; 3]) -> Vec<u8> {
    let density = rng.random_range(0.02..0.5);
    (0..ext.iter().product::<usize>()).map(|_| rng.random_bool(density) as u8).collect()
}
