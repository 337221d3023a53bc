//! Thresholded prediction of region masks and label grids.

use crate::data::{compose_labels, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::loss::RegionMask;
use crate::metrics::MetricFlag;
use crate::network::{Model, DEPTH_FACTOR};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of inference on one volume.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Full-resolution probabilities `[1, 3, H, W, D]`.
    pub probabilities: Tensor<f32>,
    pub regions: RegionMask,
    pub labels: MaskVolume,
    pub flags: Vec<MetricFlag>,
}

/// Binary regions where `p > threshold`.
pub fn threshold_regions<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<RegionMask> {
    let shape = crate::tensor::dims5("threshold", probs.shape())?;
    let t = T::from_f64_lossy(threshold);
    RegionMask::new(shape, probs.data().iter().map(|&p| (p > t) as u8).collect())
}

/// Index into `0..n` mirrored about the edges without repeating them.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pad the trailing side of every spatial axis up to `target`.
pub fn reflect_pad(volume: &Volume, target: [usize; 3]) -> Result<Volume> {
    let [h, w, d] = volume.extents();
    let [th, tw, td] = target;
    if th < h || tw < w || td < d {
        return Err(Error::Config(format!("pad target {target:?} smaller than {:?}", [h, w, d])));
    }
    let c = volume.channels();
    let src = volume.data.data();
    let mut out = Vec::with_capacity(c * th * tw * td);
    for ch in 0..c {
        for x in 0..th {
            let sx = reflect(x, h);
            for y in 0..tw {
                let sy = reflect(y, w);
                for z in 0..td {
                    out.push(src[((ch * h + sx) * w + sy) * d + reflect(z, d)]);
                }
            }
        }
    }
    Volume::new(
        Tensor::new(&[c, th, tw, td], out)?,
        volume.spacing,
        volume.modality_names.clone(),
    )
}

/// Predict regions and labels for `volume`. Extents must equal the model's
/// configured extents; with `pad`, smaller non-divisible extents are
/// reflect-padded up to it and the output cropped back.
pub fn predict(model: &mut Model<f32>, volume: &Volume, threshold: f64, pad: bool) -> Result<Prediction> {
    let cfg = model.config().clone();
    if volume.channels() != cfg.in_channels {
        return Err(Error::Config(format!(
            "volume has {} channels, model expects {}",
            volume.channels(),
            cfg.in_channels
        )));
    }
    let ext = volume.extents();
    let mut flags = Vec::new();
    let input = if ext.iter().any(|e| e % DEPTH_FACTOR != 0) {
        if !pad {
            return Err(Error::Config(format!(
                "extents {ext:?} are not divisible by {DEPTH_FACTOR}; padding required (use --pad)"
            )));
        }
        flags.push(MetricFlag::Padded);
        reflect_pad(volume, ext.map(|e| e.div_ceil(DEPTH_FACTOR) * DEPTH_FACTOR))?
    } else {
        volume.clone()
    };
    if input.extents() != cfg.extents {
        return Err(Error::Config(format!(
            "input extents {:?} differ from the model's {:?}",
            input.extents(),
            cfg.extents
        )));
    }
    let [h, w, d] = input.extents();
    let x = input.data.clone().reshape(&[1, input.channels(), h, w, d])?;
    let out = model.predict(&x, Mode::Eval)?;
    let probs = if flags.is_empty() {
        out.p1
    } else {
        let cropped = crate::data::crop(out.p1.data(), [h, w, d], [0, 0, 0], ext);
        Tensor::new(&[1, 3, ext[0], ext[1], ext[2]], cropped)?
    };
    let regions = threshold_regions(&probs, threshold)?;
    let labels = compose_labels(&regions, 0);
    Ok(Prediction {
        probabilities: probs,
        regions,
        labels,
        flags,
    })
}
