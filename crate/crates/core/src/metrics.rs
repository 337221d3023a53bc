//! Overlap and boundary-distance metrics on binary volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{RegionMask, REGION_NAMES};

/// Occupied-voxel count up to which directed distances are computed pairwise.
pub const BRUTE_FORCE_LIMIT: usize = 16 * 16 * 16;

/// Dice similarity of two binary volumes as a percentage; 100 when both are empty.
pub fn dsc(pred: &[u8], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            op: "dsc",
            detail: format!("{} vs {} voxels", pred.len(), target.len()),
        });
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p != 0, t != 0);
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (a + b) as f64)
}

/// Conditions under which a metric value is a convention rather than a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    BothEmpty,
    EmptyPrediction,
    EmptyTarget,
    /// Input was reflect-padded to a valid extent and cropped back.
    Padded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub mm: f64,
    pub flag: Option<MetricFlag>,
}

/// Linear-interpolated percentile `q` in [0, 100] of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

fn check_inputs(a: &[u8], b: &[u8], extents: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Validation(format!("spacing {spacing:?} must be positive")));
    }
    let n: usize = extents.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape {
            op: "hd95",
            detail: format!("{} / {} voxels for extents {extents:?}", a.len(), b.len()),
        });
    }
    Ok(())
}

fn coords(mask: &[u8], extents: [usize; 3]) -> Vec<[usize; 3]> {
    let [_, w, d] = extents;
    mask.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| [i / (w * d), (i / d) % w, i % d])
        .collect()
}

/// For each point of `from`, the distance to the nearest point of `to` (pairwise).
fn directed_brute(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (0..3)
                        .map(|k| {
                            let d = (p[k] as f64 - q[k] as f64) * spacing[k];
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Exact 1D squared distance transform (lower envelope of parabolas) of `f`
/// sampled at positions `i * s`; infinite entries are absent sites.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let x = |i: usize| i as f64 * s;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let sep = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
                    if sep <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(sep);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(i) {
            k += 1;
        }
        let d = x(i) - x(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every voxel to the nearest occupied voxel of `mask`.
pub fn distance_transform(mask: &[u8], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = extents;
    let mut g: Vec<f64> = mask.iter().map(|&m| if m != 0 { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [w * d, d, 1];
    for axis in 0..3 {
        let len = extents[axis];
        let (mut line, mut out) = (vec![0.0; len], vec![0.0; len]);
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (na, nb) = (extents[others[0]], extents[others[1]]);
        for i in 0..na {
            for j in 0..nb {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (t, l) in line.iter_mut().enumerate() {
                    *l = g[base + t * strides[axis]];
                }
                edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
                for (t, &o) in out.iter().enumerate() {
                    g[base + t * strides[axis]] = o;
                }
            }
        }
    }
    debug_assert_eq!(g.len(), h * w * d);
    g.into_iter().map(f64::sqrt).collect()
}

fn directed_edt(from: &[[usize; 3]], to_mask: &[u8], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let dt = distance_transform(to_mask, extents, spacing);
    let [_, w, d] = extents;
    from.iter().map(|p| dt[(p[0] * w + p[1]) * d + p[2]]).collect()
}

/// Length of the volume diagonal, the value reported when exactly one set is empty.
pub fn volume_diagonal(extents: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|k| (extents[k] as f64 * spacing[k]).powi(2)).sum::<f64>().sqrt()
}

/// Symmetric 95th-percentile Hausdorff distance between two voxel sets (mm).
pub fn hd95(pred: &[u8], target: &[u8], extents: [usize; 3], spacing: [f64; 3]) -> Result<Hd95> {
    check_inputs(pred, target, extents, spacing)?;
    let a = coords(pred, extents);
    let b = coords(target, extents);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => {
            return Ok(Hd95 {
                mm: 0.0,
                flag: Some(MetricFlag::BothEmpty),
            })
        }
        (true, false) | (false, true) => {
            let flag = if a.is_empty() {
                MetricFlag::EmptyPrediction
            } else {
                MetricFlag::EmptyTarget
            };
            return Ok(Hd95 {
                mm: volume_diagonal(extents, spacing),
                flag: Some(flag),
            });
        }
        _ => {}
    }
    let (mut ab, mut ba) = if a.len().max(b.len()) <= BRUTE_FORCE_LIMIT {
        (directed_brute(&a, &b, spacing), directed_brute(&b, &a, spacing))
    } else {
        (
            directed_edt(&a, target, extents, spacing),
            directed_edt(&b, pred, extents, spacing),
        )
    };
    Ok(Hd95 {
        mm: percentile(&mut ab, 95.0).max(percentile(&mut ba, 95.0)),
        flag: None,
    })
}

/// Same as [`hd95`] but always through the distance transform.
pub fn hd95_transform(pred: &[u8], target: &[u8], extents: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    check_inputs(pred, target, extents, spacing)?;
    let a = coords(pred, extents);
    let b = coords(target, extents);
    if a.is_empty() || b.is_empty() {
        return Ok(hd95(pred, target, extents, spacing)?.mm);
    }
    let mut ab = directed_edt(&a, target, extents, spacing);
    let mut ba = directed_edt(&b, pred, extents, spacing);
    Ok(percentile(&mut ab, 95.0).max(percentile(&mut ba, 95.0)))
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub case_id: String,
    pub class: String,
    pub dsc_percent: f64,
    pub hd95_mm: f64,
    pub flags: Vec<MetricFlag>,
}

/// Per-region records for sample `sample` of a prediction/target pair.
pub fn evaluate_regions(
    case_id: &str,
    pred: &RegionMask,
    target: &RegionMask,
    sample: usize,
    spacing: [f64; 3],
) -> Result<Vec<MetricRecord>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "evaluate_regions",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let extents = pred.extents();
    REGION_NAMES
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let (p, t) = (pred.channel(sample, r), target.channel(sample, r));
            let h = hd95(p, t, extents, spacing)?;
            Ok(MetricRecord {
                case_id: case_id.to_string(),
                class: name.to_string(),
                dsc_percent: dsc(p, t)?,
                hd95_mm: h.mm,
                flags: h.flag.into_iter().collect(),
            })
        })
        .collect()
}
