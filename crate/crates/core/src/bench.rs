//! Timing and FLOP counts of one self-attention layer across scale pairs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{qk_flops, AttentionOptions, HeadSplit, ScalePair, Tmsm};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

/// Minimum number of timed repetitions.
pub const MIN_REPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub r1: usize,
    pub r2: usize,
    pub tokens: usize,
    pub keys_coarse: usize,
    pub keys_fine: usize,
    /// `Q K^T` FLOPs summed over both branches.
    pub qk_flops: u64,
    /// Whole-layer forward FLOPs.
    pub layer_flops: u64,
    pub median_ms: f64,
    pub reps: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "r1,r2,tokens,keys_coarse,keys_fine,qk_flops,layer_flops,median_ms,reps";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{}",
            self.r1,
            self.r2,
            self.tokens,
            self.keys_coarse,
            self.keys_fine,
            self.qk_flops,
            self.layer_flops,
            self.median_ms,
            self.reps
        )
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Time a single TMSM forward (eval mode) at `grid` for each scale pair; the
/// full-attention pair (1, 1) is always included. Rows are sorted by `r1`
/// descending.
pub fn run(grid: [usize; 3], channels: usize, heads: usize, scales: &[ScalePair], reps: usize) -> Result<Vec<BenchRow>> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("at least {MIN_REPS} repetitions required")));
    }
    let split = HeadSplit::new(channels, heads)?;
    let mut pairs: Vec<ScalePair> = scales.to_vec();
    if !pairs.iter().any(|p| p.r1 == 1 && p.r2 == 1) {
        pairs.push(ScalePair { r1: 1, r2: 1 });
    }
    pairs.sort_by(|a, b| b.r1.cmp(&a.r1).then(b.r2.cmp(&a.r2)));
    pairs.dedup();
    let l: usize = grid.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::rand_normal(&[1, channels, grid[0], grid[1], grid[2]], 1.0, &mut rng);
    let mut rows = Vec::with_capacity(pairs.len());
    for s in pairs {
        let mut store = ParamStore::<f32>::new();
        let layer = Tmsm::new(
            &mut Builder::new(&mut store, &mut rng),
            "bench",
            channels,
            grid,
            s,
            heads,
            AttentionOptions::default(),
        )?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let start = Instant::now();
            let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval).frozen();
            layer.forward(&mut ctx, xv)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let [kc, kf] = layer.token_counts();
        rows.push(BenchRow {
            r1: s.r1,
            r2: s.r2,
            tokens: l,
            keys_coarse: kc,
            keys_fine: kf,
            qk_flops: qk_flops(split, l, s.r1) + qk_flops(split, l, s.r2),
            layer_flops: layer.flops(),
            median_ms: median(&mut times),
            reps,
        });
    }
    Ok(rows)
}
