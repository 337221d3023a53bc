//! Soft Dice loss, deep supervision and region-mask handling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::network::StageOutputs;
use crate::scalar::{lit, Scalar};
use crate::tensor::{dims5, Tensor};

/// Smoothing added to both numerator and denominator of every class term.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Region channels in storage order.
pub const REGION_NAMES: [&str; 3] = ["ET", "TC", "WT"];

/// Binary `(N, 3, h, w, d)` mask with channels `(ET, TC, WT)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    shape: [usize; 5],
    data: Vec<u8>,
}

impl RegionMask {
    pub fn new(shape: [usize; 5], data: Vec<u8>) -> Result<Self> {
        if shape[1] != 3 {
            return Err(shape_err("region_mask", format!("expected 3 region channels, got {}", shape[1])));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("region_mask", format!("{shape:?} vs {} values", data.len())));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "region mask value {} at flat index {pos} is not binary",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Validate a real-valued tensor as a binary mask.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let shape = dims5("region_mask", t.shape())?;
        let mut data = Vec::with_capacity(t.numel());
        for (i, &v) in t.data().iter().enumerate() {
            if v == T::zero() {
                data.push(0);
            } else if v == T::one() {
                data.push(1);
            } else {
                return Err(Error::Validation(format!(
                    "target value {v} at flat index {i} is not binary"
                )));
            }
        }
        Self::new(shape, data)
    }

    /// Concatenate single-sample masks along the batch axis.
    pub fn stack(masks: &[RegionMask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| shape_err("region_mask", "empty batch"))?;
        let mut shape = first.shape;
        let mut data = Vec::new();
        for m in masks {
            if m.shape[1..] != first.shape[1..] {
                return Err(shape_err("region_mask", "batch members differ in shape"));
            }
            data.extend_from_slice(&m.data);
        }
        shape[0] = masks.iter().map(|m| m.shape[0]).sum();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        )
        .expect("validated at construction")
    }

    /// Binary volume of one `(sample, region)` pair, `h*w*d` long.
    pub fn channel(&self, sample: usize, region: usize) -> &[u8] {
        let vol: usize = self.shape[2..].iter().product();
        let base = (sample * 3 + region) * vol;
        &self.data[base..base + vol]
    }

    /// True when ET <= TC <= WT voxel-wise in every sample.
    pub fn is_nested(&self) -> bool {
        (0..self.shape[0]).all(|s| {
            let (et, tc, wt) = (self.channel(s, 0), self.channel(s, 1), self.channel(s, 2));
            et.iter().zip(tc).zip(wt).all(|((&e, &t), &w)| e <= t && t <= w)
        })
    }

    /// Nearest-neighbour downsampling taking the first corner of every block.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let [n, c, h, w, d] = self.shape;
        if factor == 0 || h % factor != 0 || w % factor != 0 || d % factor != 0 {
            return Err(Error::Config(format!(
                "mask extents {:?} are not divisible by {factor}",
                [h, w, d]
            )));
        }
        let (oh, ow, od) = (h / factor, w / factor, d / factor);
        let mut data = Vec::with_capacity(n * c * oh * ow * od);
        for plane in self.data.chunks(h * w * d) {
            for y in 0..oh {
                for x in 0..ow {
                    for z in 0..od {
                        data.push(plane[((y * factor) * w + x * factor) * d + z * factor]);
                    }
                }
            }
        }
        Self::new([n, c, oh, ow, od], data)
    }
}

/// Per-class sums of the soft Dice objective.
pub(crate) struct DiceTerms<T> {
    numer: Vec<T>,
    denom: Vec<T>,
}

pub(crate) fn dice_terms<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<DiceTerms<T>> {
    let [n, classes, ..] = dims5("dice_loss", pred.shape())?;
    if pred.shape() != target.shape() {
        return Err(shape_err("dice_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let vol = pred.numel() / (n * classes);
    let two = lit::<T>(2.0);
    let mut numer = vec![eps; classes];
    let mut denom = vec![eps; classes];
    for s in 0..n {
        for i in 0..classes {
            let base = (s * classes + i) * vol;
            let p = &pred.data()[base..base + vol];
            let t = &target.data()[base..base + vol];
            for (&pv, &tv) in p.iter().zip(t) {
                numer[i] += two * pv * tv;
                denom[i] += pv * pv + tv * tv;
            }
        }
    }
    Ok(DiceTerms { numer, denom })
}

impl<T: Scalar> DiceTerms<T> {
    pub(crate) fn per_class(&self) -> Vec<T> {
        self.numer.iter().zip(&self.denom).map(|(&a, &b)| a / b).collect()
    }

    pub(crate) fn loss(&self) -> T {
        let dice = self.per_class();
        let k = T::from_usize(dice.len()).unwrap();
        T::one() - dice.into_iter().sum::<T>() / k
    }

    pub(crate) fn gradient(&self, pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Result<Tensor<T>> {
        let [n, classes, ..] = dims5("dice_loss", pred.shape())?;
        let vol = pred.numel() / (n * classes);
        let two = lit::<T>(2.0);
        let k = T::from_usize(classes).unwrap();
        let mut g = vec![T::zero(); pred.numel()];
        for s in 0..n {
            for i in 0..classes {
                let (a, b) = (self.numer[i], self.denom[i]);
                let coef = -upstream / (k * b * b);
                let base = (s * classes + i) * vol;
                for j in base..base + vol {
                    // d(a/b)/dp = (2t b - a 2p) / b^2
                    g[j] = coef * (two * target.data()[j] * b - a * two * pred.data()[j]);
                }
            }
        }
        Tensor::new(pred.shape(), g)
    }
}

/// `1 - (1/I) sum_i (2 sum p t + eps) / (sum p^2 + sum t^2 + eps)`, batch and voxels pooled per class.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &RegionMask) -> Result<T> {
    let t = target.to_tensor::<T>();
    Ok(dice_terms(pred, &t, lit(DICE_SMOOTH))?.loss())
}

/// Per-class Dice coefficients (smoothed) of a soft prediction.
pub fn dice_per_class<T: Scalar>(pred: &Tensor<T>, target: &RegionMask) -> Result<Vec<T>> {
    let t = target.to_tensor::<T>();
    Ok(dice_terms(pred, &t, lit(DICE_SMOOTH))?.per_class())
}

/// Recorded variant of [`dice_loss`].
pub fn dice_loss_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &RegionMask) -> Result<Var> {
    tape.dice_loss(pred, &target.to_tensor(), lit(DICE_SMOOTH))
}

/// Weights of the four supervised heads, coarsest first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupervisionWeights(pub [f64; 4]);

impl Default for SupervisionWeights {
    fn default() -> Self {
        Self([0.125, 0.25, 0.5, 1.0])
    }
}

impl SupervisionWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("supervision weights must be non-negative: {:?}", self.0)));
        }
        Ok(())
    }
}

/// Total loss together with the four per-head Dice losses.
pub struct SupervisedLoss {
    pub total: Var,
    pub stages: [Var; 4],
}

/// Downsampling factor of each head relative to full resolution.
pub const HEAD_FACTORS: [usize; 4] = [16, 8, 4, 1];

/// `sum_k alpha_k L_k` over the heads, or `L_4` alone when `enabled` is false.
pub fn deep_supervision_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &StageOutputs<Var>,
    target: &RegionMask,
    weights: &SupervisionWeights,
    enabled: bool,
) -> Result<SupervisedLoss> {
    weights.validate()?;
    let heads = outputs.as_array();
    let mut stages = Vec::with_capacity(4);
    for (k, (&head, &factor)) in heads.iter().zip(&HEAD_FACTORS).enumerate() {
        let mask = if factor == 1 {
            target.clone()
        } else {
            target.downsample(factor)?
        };
        let shape = tape.value(head)?.shape().to_vec();
        if shape != mask.shape() {
            return Err(Error::Wiring(format!(
                "head {} has shape {shape:?} but downsampled target is {:?}",
                k + 1,
                mask.shape()
            )));
        }
        stages.push(dice_loss_var(tape, head, &mask)?);
    }
    let stages: [Var; 4] = stages.try_into().expect("four heads");
    let total = if enabled {
        let mut acc = tape.scale(stages[0], lit(weights.0[0]))?;
        for k in 1..4 {
            let term = tape.scale(stages[k], lit(weights.0[k]))?;
            acc = tape.add(acc, term)?;
        }
        acc
    } else {
        stages[3]
    };
    Ok(SupervisedLoss { total, stages })
}
