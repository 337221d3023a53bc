//! Multi-modal volumes, label grids, synthetic phantoms, augmentation and the
//! sidecar file format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::RegionMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MODALITIES: [&str; 4] = ["T1", "T1ce", "T2", "FLAIR"];

/// Label values allowed in a [`MaskVolume`].
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Intensity volume `[C, H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f64; 3],
    pub modality_names: Vec<String>,
}

impl Volume {
    pub fn new(data: Tensor<f32>, spacing: [f64; 3], modality_names: Vec<String>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Shape {
                op: "volume",
                detail: format!("expected [C, H, W, D], got {:?}", data.shape()),
            });
        }
        if modality_names.len() != data.shape()[0] {
            return Err(Error::Validation(format!(
                "{} modality names for {} channels",
                modality_names.len(),
                data.shape()[0]
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("spacing {spacing:?} must be positive")));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite { op: "volume" });
        }
        Ok(Self {
            data,
            spacing,
            modality_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-channel z-score over nonzero voxels; zero voxels stay zero.
    pub fn normalize(&mut self) {
        let vox: usize = self.extents().iter().product();
        for ch in self.data.data_mut().chunks_mut(vox) {
            let nz: Vec<f64> = ch.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
            if nz.len() < 2 {
                continue;
            }
            let mean = nz.iter().sum::<f64>() / nz.len() as f64;
            let var = nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nz.len() as f64;
            let std = var.sqrt().max(1e-8);
            for v in ch.iter_mut().filter(|v| **v != 0.0) {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
}

/// Label grid `[H, W, D]` with values in {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    extents: [usize; 3],
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if extents.iter().product::<usize>() != labels.len() {
            return Err(Error::Shape {
                op: "mask_volume",
                detail: format!("{extents:?} vs {} labels", labels.len()),
            });
        }
        if let Some(i) = labels.iter().position(|l| !LABELS.contains(l)) {
            let [_, w, d] = extents;
            return Err(Error::Validation(format!(
                "label {} at voxel ({}, {}, {}) is not one of {LABELS:?}",
                labels[i],
                i / (w * d),
                (i / d) % w,
                i % d
            )));
        }
        Ok(Self { extents, labels })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}, as a single-sample mask.
pub fn encode_regions(mask: &MaskVolume) -> RegionMask {
    let n = mask.labels.len();
    let mut data = vec![0u8; 3 * n];
    for (i, &l) in mask.labels.iter().enumerate() {
        data[i] = (l == 4) as u8;
        data[n + i] = (l == 1 || l == 4) as u8;
        data[2 * n + i] = (l != 0) as u8;
    }
    let [h, w, d] = mask.extents;
    RegionMask::new([1, 3, h, w, d], data).expect("binary by construction")
}

/// Labels from nested region channels of `sample`: ET -> 4, TC \ ET -> 1, WT \ TC -> 2.
pub fn compose_labels(regions: &RegionMask, sample: usize) -> MaskVolume {
    let (et, tc, wt) = (regions.channel(sample, 0), regions.channel(sample, 1), regions.channel(sample, 2));
    let labels = et
        .iter()
        .zip(tc)
        .zip(wt)
        .map(|((&e, &t), &w)| match (e, t, w) {
            (1, _, _) => 4,
            (_, 1, _) => 1,
            (_, _, 1) => 2,
            _ => 0,
        })
        .collect();
    MaskVolume::new(regions.extents(), labels).expect("labels from the allowed set")
}

/// Stack volumes and their region masks into a network batch.
pub fn make_batch<T: Scalar>(cases: &[(Volume, MaskVolume)]) -> Result<(Tensor<T>, RegionMask)> {
    let first = cases.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (c, ext) = (first.0.channels(), first.0.extents());
    let mut data = Vec::with_capacity(cases.len() * first.0.data.numel());
    let mut masks = Vec::with_capacity(cases.len());
    for (v, m) in cases {
        if v.channels() != c || v.extents() != ext || m.extents() != ext {
            return Err(Error::Shape {
                op: "make_batch",
                detail: "cases differ in shape".into(),
            });
        }
        data.extend(v.data.data().iter().map(|&x| T::from_f32(x).unwrap()));
        masks.push(encode_regions(m));
    }
    let x = Tensor::new(&[cases.len(), c, ext[0], ext[1], ext[2]], data)?;
    Ok((x, RegionMask::stack(&masks)?))
}

/// Ellipsoidal lesion: edema out to `radii`, core within 0.6, enhancing within 0.3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

pub const CORE_FRACTION: f64 = 0.6;
pub const ENHANCING_FRACTION: f64 = 0.3;
pub const NOISE_STD: f64 = 0.05;

impl Lesion {
    /// Normalized ellipsoidal radius of a voxel center.
    pub fn rho(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|k| ((p[k] as f64 - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Label this lesion assigns to voxel `p`, 0 outside.
    pub fn label(&self, p: [usize; 3]) -> u8 {
        let r = self.rho(p);
        if r <= ENHANCING_FRACTION {
            4
        } else if r <= CORE_FRACTION {
            1
        } else if r <= 1.0 {
            2
        } else {
            0
        }
    }
}

fn priority(l: u8) -> u8 {
    match l {
        4 => 3,
        1 => 2,
        2 => 1,
        _ => 0,
    }
}

/// Per-modality intensity of (background tissue, edema, core, enhancing) in the
/// order T1, T1ce, T2, FLAIR.
const TISSUE: [[f32; 4]; 4] = [
    [0.60, 0.60, 0.50, 0.50],
    [0.50, 0.55, 0.90, 1.00],
    [0.20, 0.40, 0.70, 0.60],
    [0.40, 1.00, 0.60, 0.70],
];

fn tissue_index(label: u8) -> usize {
    match label {
        2 => 1,
        1 => 2,
        4 => 3,
        _ => 0,
    }
}

/// Deterministic phantom from explicit lesions; the brain is a centered
/// ellipsoid, voxels outside it (and outside every lesion) are zero.
pub fn render_phantom(seed: u64, extents: [usize; 3], lesions: &[Lesion]) -> Result<(Volume, MaskVolume)> {
    let [h, w, d] = extents;
    let n = h * w * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b7a1);
    let brain = Lesion {
        center: extents.map(|e| (e as f64 - 1.0) / 2.0),
        radii: extents.map(|e| e as f64 * rng.random_range(0.40..0.46)),
    };
    let mut labels = vec![0u8; n];
    let mut inside = vec![false; n];
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let i = (x * w + y) * d + z;
                let p = [x, y, z];
                inside[i] = brain.rho(p) <= 1.0;
                for les in lesions {
                    let l = les.label(p);
                    if priority(l) > priority(labels[i]) {
                        labels[i] = l;
                    }
                }
                inside[i] |= labels[i] != 0;
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = vec![0f32; 4 * n];
    for ch in 0..4 {
        for i in 0..n {
            if inside[i] {
                let base = TISSUE[tissue_index(labels[i])][ch];
                data[ch * n + i] = base + noise.sample(&mut rng) as f32;
            }
        }
    }
    let volume = Volume::new(
        Tensor::new(&[4, h, w, d], data)?,
        [1.0; 3],
        DEFAULT_MODALITIES.iter().map(|s| s.to_string()).collect(),
    )?;
    Ok((volume, MaskVolume::new(extents, labels)?))
}

pub const MAX_PLACEMENT_ATTEMPTS: usize = 10;

/// Random phantom with `num_lesions` lesions whose edema radius (voxels) is drawn
/// from `scale_range`.
pub fn generate_phantom(
    seed: u64,
    extents: [usize; 3],
    num_lesions: usize,
    scale_range: (f64, f64),
) -> Result<(Volume, MaskVolume)> {
    if num_lesions == 0 {
        return Err(Error::Config("num_lesions must be at least 1".into()));
    }
    if let Some(e) = extents.iter().find(|&&e| e == 0 || e % 32 != 0) {
        return Err(Error::Config(format!("phantom extent {e} is not divisible by 32")));
    }
    let (lo, hi) = scale_range;
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::Config(format!("invalid lesion scale range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lesions = Vec::with_capacity(num_lesions);
    for _ in 0..num_lesions {
        let base = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let aniso: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
        let mut shrink = 1.0;
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let radii: [f64; 3] = std::array::from_fn(|k| base * aniso[k] * shrink);
            if (0..3).all(|k| radii[k] <= (extents[k] as f64 - 1.0) / 2.0) {
                let center = std::array::from_fn(|k| {
                    let (a, b) = (radii[k], extents[k] as f64 - 1.0 - radii[k]);
                    if b > a {
                        rng.random_range(a..b)
                    } else {
                        a
                    }
                });
                placed = Some(Lesion { center, radii });
                break;
            }
            shrink *= 0.8;
        }
        lesions.push(placed.ok_or_else(|| {
            Error::Config(format!(
                "lesion of radius {base:.2} does not fit {extents:?} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            ))
        })?);
    }
    render_phantom(seed, extents, &lesions)
}

/// Augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Output extents; `None` keeps the input size.
    pub crop: Option<[usize; 3]>,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop: None,
            flip_prob: 0.5,
            scale_range: (0.9, 1.1),
            shift_range: (-0.1, 0.1),
        }
    }
}

/// Concrete augmentation drawn for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub flips: [bool; 3],
    pub corner: [usize; 3],
    pub size: [usize; 3],
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl AugmentParams {
    pub fn sample(seed: u64, extents: [usize; 3], channels: usize, policy: &AugmentPolicy) -> Result<Self> {
        let size = policy.crop.unwrap_or(extents);
        if (0..3).any(|k| size[k] == 0 || size[k] > extents[k]) {
            return Err(Error::Config(format!("crop {size:?} does not fit volume {extents:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flips = std::array::from_fn(|_| rng.random_bool(policy.flip_prob));
        let corner = std::array::from_fn(|k| rng.random_range(0..=extents[k] - size[k]));
        let (s0, s1) = policy.scale_range;
        let (v0, v1) = policy.shift_range;
        let scale = (0..channels).map(|_| rng.random_range(s0..=s1) as f32).collect();
        let shift = (0..channels).map(|_| rng.random_range(v0..=v1) as f32).collect();
        Ok(Self {
            flips,
            corner,
            size,
            scale,
            shift,
        })
    }
}

/// Reverse `data` (`channels` blocks of `extents`) along every axis with `flips[k]`.
pub fn flip<U: Copy>(data: &[U], extents: [usize; 3], flips: [bool; 3]) -> Vec<U> {
    let [h, w, d] = extents;
    let vox = h * w * d;
    let mut out = Vec::with_capacity(data.len());
    for block in data.chunks(vox) {
        for x in 0..h {
            let sx = if flips[0] { h - 1 - x } else { x };
            for y in 0..w {
                let sy = if flips[1] { w - 1 - y } else { y };
                for z in 0..d {
                    let sz = if flips[2] { d - 1 - z } else { z };
                    out.push(block[(sx * w + sy) * d + sz]);
                }
            }
        }
    }
    out
}

/// Sub-block of size `size` at `corner` from every `extents` block of `data`.
pub fn crop<U: Copy>(data: &[U], extents: [usize; 3], corner: [usize; 3], size: [usize; 3]) -> Vec<U> {
    let [_, w, d] = extents;
    let vox: usize = extents.iter().product();
    let mut out = Vec::with_capacity(data.len() / vox * size.iter().product::<usize>());
    for block in data.chunks(vox) {
        for x in corner[0]..corner[0] + size[0] {
            for y in corner[1]..corner[1] + size[1] {
                let row = (x * w + y) * d;
                out.extend_from_slice(&block[row + corner[2]..row + corner[2] + size[2]]);
            }
        }
    }
    out
}

/// Apply the spatial part of `params` to a volume and a mask, and the intensity
/// part to the volume only.
pub fn apply_augment(volume: &Volume, mask: &MaskVolume, params: &AugmentParams) -> Result<(Volume, MaskVolume)> {
    let ext = volume.extents();
    if mask.extents() != ext {
        return Err(Error::Shape {
            op: "augment",
            detail: format!("volume {ext:?} vs mask {:?}", mask.extents()),
        });
    }
    let c = volume.channels();
    if params.scale.len() != c || params.shift.len() != c {
        return Err(Error::Config("augmentation channel count mismatch".into()));
    }
    let mut v = crop(&flip(volume.data.data(), ext, params.flips), ext, params.corner, params.size);
    let vox: usize = params.size.iter().product();
    for (ch, block) in v.chunks_mut(vox).enumerate() {
        for x in block.iter_mut() {
            *x = *x * params.scale[ch] + params.shift[ch];
        }
    }
    let labels = crop(&flip(mask.labels(), ext, params.flips), ext, params.corner, params.size);
    let [h, w, d] = params.size;
    Ok((
        Volume::new(
            Tensor::new(&[c, h, w, d], v)?,
            volume.spacing,
            volume.modality_names.clone(),
        )?,
        MaskVolume::new(params.size, labels)?,
    ))
}

/// Seeded augmentation; returns the drawn parameters alongside the result.
pub fn augment(
    volume: &Volume,
    mask: &MaskVolume,
    seed: u64,
    policy: &AugmentPolicy,
) -> Result<(Volume, MaskVolume, AugmentParams)> {
    let params = AugmentParams::sample(seed, volume.extents(), volume.channels(), policy)?;
    let (v, m) = apply_augment(volume, mask, &params)?;
    Ok((v, m, params))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: Vec<usize>,
    spacing: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    modalities: Vec<String>,
}

const VOLUME_DTYPE: &str = "f32le";
const MASK_DTYPE: &str = "u8";

/// Payload path belonging to a header path: same stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn read_header(path: &Path, dtype: &str) -> Result<Header> {
    let text = fs::read_to_string(path)?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: malformed header: {e}", path.display())))?;
    if header.dtype != dtype {
        return Err(Error::Format(format!(
            "{}: dtype {:?}, expected {dtype:?}",
            path.display(),
            header.dtype
        )));
    }
    Ok(header)
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let raw = payload_path(path);
    let bytes = fs::read(&raw)?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            raw.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    if payload_path(path) == path {
        return Err(Error::Config(format!(
            "{}: header path must not use the .raw extension",
            path.display()
        )));
    }
    fs::write(path, serde_json::to_string_pretty(header)?)?;
    fs::write(payload_path(path), payload)?;
    Ok(())
}

/// Write `path` (JSON header) and its `.raw` payload.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let header = Header {
        dims: volume.data.shape().to_vec(),
        spacing: volume.spacing,
        dtype: VOLUME_DTYPE.into(),
        modalities: volume.modality_names.clone(),
    };
    let payload: Vec<u8> = volume.data.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path, VOLUME_DTYPE)?;
    if header.dims.len() != 4 {
        return Err(Error::Format(format!("volume dims {:?} must be [C, H, W, D]", header.dims)));
    }
    let n: usize = header.dims.iter().product();
    let bytes = read_payload(path, n * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let modalities = if header.modalities.is_empty() {
        (0..header.dims[0]).map(|i| format!("channel{i}")).collect()
    } else {
        header.modalities
    };
    Volume::new(Tensor::new(&header.dims, data)?, header.spacing, modalities)
}

pub fn save_mask(mask: &MaskVolume, spacing: [f64; 3], path: &Path) -> Result<()> {
    let header = Header {
        dims: std::iter::once(1).chain(mask.extents).collect(),
        spacing,
        dtype: MASK_DTYPE.into(),
        modalities: Vec::new(),
    };
    write_pair(path, &header, &mask.labels)
}

/// Load a label grid and its spacing; dims may be `[H, W, D]` or `[1, H, W, D]`.
pub fn load_mask(path: &Path) -> Result<(MaskVolume, [f64; 3])> {
    let header = read_header(path, MASK_DTYPE)?;
    let extents: [usize; 3] = match header.dims.as_slice() {
        [h, w, d] | [1, h, w, d] => [*h, *w, *d],
        other => return Err(Error::Format(format!("mask dims {other:?} must be [1, H, W, D]"))),
    };
    let bytes = read_payload(path, extents.iter().product())?;
    Ok((MaskVolume::new(extents, bytes)?, header.spacing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_encoding_by_label() {
        let m = MaskVolume::new([1, 1, 4], vec![0, 1, 2, 4]).unwrap();
        let r = encode_regions(&m);
        assert_eq!(r.channel(0, 0), &[0, 0, 0, 1]);
        assert_eq!(r.channel(0, 1), &[0, 1, 0, 1]);
        assert_eq!(r.channel(0, 2), &[0, 1, 1, 1]);
        assert_eq!(compose_labels(&r, 0), m);
    }

    #[test]
    fn unknown_label_names_voxel() {
        let err = MaskVolume::new([1, 2, 2], vec![0, 0, 3, 0]).unwrap_err();
        assert!(err.to_string().contains("(0, 1, 0)"), "{err}");
    }

    #[test]
    fn phantom_is_deterministic_and_nested() {
        let a = generate_phantom(7, [32, 32, 32], 2, (3.0, 6.0)).unwrap();
        let b = generate_phantom(7, [32, 32, 32], 2, (3.0, 6.0)).unwrap();
        assert_eq!(a, b);
        assert!(encode_regions(&a.1).is_nested());
        assert!(a.1.labels().iter().any(|&l| l == 4));
        assert!(generate_phantom(7, [32, 32, 32], 0, (3.0, 6.0)).is_err());
        assert!(generate_phantom(7, [30, 32, 32], 1, (3.0, 6.0)).is_err());
    }

    #[test]
    fn oversized_lesion_fails_after_retries() {
        let err = generate_phantom(1, [32, 32, 32], 1, (200.0, 200.0)).unwrap_err();
        assert!(err.to_string().contains("attempts"));
    }

    #[test]
    fn normalize_zero_mean_on_foreground() {
        let (mut v, _) = generate_phantom(3, [32, 32, 32], 1, (4.0, 6.0)).unwrap();
        v.normalize();
        let vox = 32 * 32 * 32;
        let ch = &v.data.data()[..vox];
        let nz: Vec<f64> = ch.iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn crop_matches_slicing() {
        let ext = [4, 5, 6];
        let data: Vec<u32> = (0..120).collect();
        let out = crop(&data, ext, [1, 2, 3], [2, 2, 2]);
        let want: Vec<u32> = [(1, 2), (1, 3), (2, 2), (2, 3)]
            .iter()
            .flat_map(|&(x, y)| (3..5).map(move |z| (x * 5 + y) * 6 + z))
            .collect();
        assert_eq!(out, want);
    }

    #[test]
    fn oversized_crop_rejected() {
        let policy = AugmentPolicy {
            crop: Some([64, 32, 32]),
            ..Default::default()
        };
        assert!(matches!(
            AugmentParams::sample(0, [32, 32, 32], 4, &policy),
            Err(Error::Config(_))
        ));
    }
}
