//! Multi-scale token-aggregation attention: the two-branch aggregation
//! ([`Tmmm`]), the self-attention layer ([`Tmsm`]) and the cross-attention
//! skip connection ([`Tmcm`]).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, ParamId, RefineBlock};
use crate::ops::conv::ConvSpec;
use crate::scalar::{lit, Scalar};

/// Aggregation factors of the coarse (`r1`) and fine (`r2`) branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalePair {
    pub r1: usize,
    pub r2: usize,
}

impl ScalePair {
    pub fn new(r1: usize, r2: usize) -> Result<Self> {
        let ok = |r: usize| matches!(r, 1 | 2 | 4 | 8);
        if !ok(r1) || !ok(r2) || r1 < r2 {
            return Err(Error::Config(format!(
                "scale pair ({r1},{r2}) must satisfy r1 >= r2 with both in {{1,2,4,8}}"
            )));
        }
        Ok(Self { r1, r2 })
    }

    pub fn as_array(self) -> [usize; 2] {
        [self.r1, self.r2]
    }
}

/// Encoder stages 1-4.
pub const ENCODER_SCALES: [ScalePair; 4] = [
    ScalePair { r1: 8, r2: 4 },
    ScalePair { r1: 4, r2: 2 },
    ScalePair { r1: 2, r2: 1 },
    ScalePair { r1: 1, r2: 1 },
];

/// Decoder stages 1-3, shared by the cross-attention skip and the self-attention layers.
pub const DECODER_SCALES: [ScalePair; 3] = [
    ScalePair { r1: 2, r2: 1 },
    ScalePair { r1: 4, r2: 2 },
    ScalePair { r1: 8, r2: 4 },
];

/// How `n` heads of width `c / n` are divided between the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSplit {
    pub n: usize,
    pub per_branch: usize,
    pub head_dim: usize,
}

impl HeadSplit {
    pub fn new(channels: usize, n: usize) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!("head count {n} must be even and positive")));
        }
        if channels % n != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {n} heads")));
        }
        Ok(Self {
            n,
            per_branch: n / 2,
            head_dim: channels / n,
        })
    }

    pub fn channels(&self) -> usize {
        self.n * self.head_dim
    }
}

/// Local enhancement applied to values before attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueEnhance {
    /// `V + dwconv3(V)` on the aggregated grid.
    #[default]
    Depthwise3,
    Identity,
}

/// Layer-level switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    pub value_enhance: ValueEnhance,
    /// Convolutional refinement after the residual add.
    pub post_block: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            value_enhance: ValueEnhance::Depthwise3,
            post_block: true,
        }
    }
}

/// Tokens `[N, l, c]` of a volume with spatial extents `extents`, `l = h*w*d`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub extents: [usize; 3],
    pub channels: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[N, C, h, w, d] -> [N, h*w*d, C]`.
    pub fn flatten<T: Scalar>(tape: &mut Tape<T>, volume: Var) -> Result<Self> {
        let shape = tape.value(volume)?.shape().to_vec();
        let [n, c, h, w, d] = crate::tensor::dims5("flatten", &shape)?;
        let flat = tape.reshape(volume, &[n, c, h * w * d])?;
        let tokens = tape.permute(flat, &[0, 2, 1])?;
        Ok(Self {
            tokens,
            extents: [h, w, d],
            channels: c,
        })
    }

    /// Inverse of [`TokenGrid::flatten`].
    pub fn unflatten<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let shape = tape.value(self.tokens)?.shape().to_vec();
        if shape.len() != 3 || shape[1] != self.len() {
            return Err(Error::Shape {
                op: "unflatten",
                detail: format!("tokens {shape:?} do not cover grid {:?}", self.extents),
            });
        }
        let (n, c) = (shape[0], shape[2]);
        let t = tape.permute(self.tokens, &[0, 2, 1])?;
        let [h, w, d] = self.extents;
        tape.reshape(t, &[n, c, h, w, d])
    }
}

/// One attention map computed during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: String,
    /// 0 = coarse (`r1`), 1 = fine (`r2`).
    pub branch: usize,
    pub r: usize,
    pub queries: usize,
    pub keys: usize,
    /// Softmax weights `[N, n/2, queries, keys]`.
    pub weights: Var,
}

fn check_grid(layer: &str, grid: [usize; 3], scales: ScalePair) -> Result<[usize; 2]> {
    let l: usize = grid.iter().product();
    let mut counts = [0; 2];
    for (i, r) in scales.as_array().into_iter().enumerate() {
        if grid.iter().any(|&e| e % r != 0) {
            return Err(Error::Config(format!(
                "{layer}: grid {grid:?} not divisible by aggregation factor {r}"
            )));
        }
        let agg: usize = grid.iter().map(|&e| e / r).product();
        if agg * r * r * r != l {
            return Err(Error::Config(format!("{layer}: token count {agg} != {l}/{r}^3")));
        }
        counts[i] = agg;
    }
    Ok(counts)
}

#[derive(Clone, Debug)]
struct AggregationBranch {
    r: usize,
    weight: ParamId,
    bias: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

/// Two parallel depthwise aggregations (kernel = stride = r), each followed by
/// flatten, layer norm and GELU.
#[derive(Clone, Debug)]
pub struct Tmmm {
    scales: ScalePair,
    grid: [usize; 3],
    token_counts: [usize; 2],
    branches: [AggregationBranch; 2],
}

impl Tmmm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, grid: [usize; 3], scales: ScalePair) -> Result<Self> {
        let token_counts = check_grid("tmmm", grid, scales)?;
        let mut make = |name: &str, r: usize| {
            let mut s = b.scope(name);
            let spec = ConvSpec::depthwise_aggregate(channels, r);
            AggregationBranch {
                r,
                weight: s.kaiming("weight", &spec.weight_shape(), r * r * r),
                bias: s.zeros("bias", &[channels]),
                ln_gamma: s.constant("ln_gamma", &[channels], 1.0),
                ln_beta: s.zeros("ln_beta", &[channels]),
            }
        };
        let coarse = make("coarse", scales.r1);
        let fine = make("fine", scales.r2);
        Ok(Self {
            scales,
            grid,
            token_counts,
            branches: [coarse, fine],
        })
    }

    pub fn scales(&self) -> ScalePair {
        self.scales
    }

    /// Key/value token counts `l / r1^3` and `l / r2^3` fixed at construction.
    pub fn token_counts(&self) -> [usize; 2] {
        self.token_counts
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, volume: Var) -> Result<[TokenGrid; 2]> {
        let shape = ctx.tape.value(volume)?.shape().to_vec();
        if shape.len() != 5 || shape[2..] != self.grid {
            return Err(Error::Shape {
                op: "tmmm",
                detail: format!("input {shape:?} does not match grid {:?}", self.grid),
            });
        }
        let mut out = Vec::with_capacity(2);
        for (br, &expected) in self.branches.iter().zip(&self.token_counts) {
            let (w, b) = (ctx.param(br.weight)?, ctx.param(br.bias)?);
            let agg = ctx.tape.depthwise_aggregate(volume, w, Some(b), br.r)?;
            let grid = TokenGrid::flatten(ctx.tape, agg)?;
            if grid.len() != expected {
                return Err(Error::Config(format!(
                    "tmmm: branch r={} produced {} tokens, expected {expected}",
                    br.r,
                    grid.len()
                )));
            }
            let (g, beta) = (ctx.param(br.ln_gamma)?, ctx.param(br.ln_beta)?);
            let normed = ctx.tape.layer_norm(grid.tokens, g, beta)?;
            let tokens = ctx.tape.gelu(normed)?;
            out.push(TokenGrid { tokens, ..grid });
        }
        Ok([out[0], out[1]])
    }

    pub fn flops(&self, channels: usize) -> u64 {
        // depthwise aggregation touches every input voxel once per channel
        let l: usize = self.grid.iter().product();
        2 * 2 * (l * channels) as u64
    }
}

/// Per-branch key/value projection and optional value enhancement.
#[derive(Clone, Debug)]
pub struct KvProjection {
    weight: ParamId,
    bias: ParamId,
    enhance: Option<(ParamId, ParamId)>,
}

impl KvProjection {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, enhance: ValueEnhance) -> Self {
        let weight = b.xavier("weight", &[channels, channels], channels, channels);
        let bias = b.zeros("bias", &[channels]);
        let enhance = match enhance {
            ValueEnhance::Identity => None,
            ValueEnhance::Depthwise3 => {
                let half = channels / 2;
                let spec = enhance_spec(half);
                let mut s = b.scope("enhance");
                Some((s.kaiming("weight", &spec.weight_shape(), 27), s.zeros("bias", &[half])))
            }
        };
        Self { weight, bias, enhance }
    }
}

fn enhance_spec(channels: usize) -> ConvSpec {
    ConvSpec::new(channels, channels, 3).with_padding(1).with_groups(channels)
}

/// `[N, l, n*hd] -> [N, n, l, hd]`.
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize, head_dim: usize) -> Result<Var> {
    let shape = tape.value(x)?.shape().to_vec();
    let r = tape.reshape(x, &[shape[0], shape[1], heads, head_dim])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// Two-branch scaled dot-product attention with a shared query.
///
/// `q_shared` is `[N, l, c]`; the first `n/2` heads attend to the coarse grid,
/// the remaining heads to the fine grid. Returns `[N, l, c]`.
pub fn multiscale_attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layer: &str,
    q_shared: Var,
    kv_sources: &[TokenGrid; 2],
    scales: ScalePair,
    split: HeadSplit,
    projections: &[KvProjection; 2],
) -> Result<Var> {
    let q_shape = ctx.tape.value(q_shared)?.shape().to_vec();
    let c = split.channels();
    if q_shape.len() != 3 || q_shape[2] != c {
        return Err(Error::Config(format!(
            "{layer}: query {q_shape:?} incompatible with {} heads of width {}",
            split.n, split.head_dim
        )));
    }
    let (batch, l) = (q_shape[0], q_shape[1]);
    let half = c / 2;
    let q_heads = split_heads(ctx.tape, q_shared, split.n, split.head_dim)?;
    let inv_sqrt = lit::<T>(1.0 / (split.head_dim as f64).sqrt());
    let mut outputs = Vec::with_capacity(2);
    for (i, ((grid, proj), r)) in kv_sources.iter().zip(projections).zip(scales.as_array()).enumerate() {
        let keys = grid.len();
        if keys * r * r * r != l {
            return Err(Error::Config(format!(
                "{layer}: branch {i} has {keys} key tokens, expected {l}/{r}^3"
            )));
        }
        let (w, b) = (ctx.param(proj.weight)?, ctx.param(proj.bias)?);
        let kv = ctx.tape.linear(grid.tokens, w, Some(b))?;
        let k = ctx.tape.slice(kv, 2, 0, half)?;
        let mut v = ctx.tape.slice(kv, 2, half, half)?;
        if let Some((ew, eb)) = proj.enhance {
            let vgrid = TokenGrid {
                tokens: v,
                extents: grid.extents,
                channels: half,
            };
            let vol = vgrid.unflatten(ctx.tape)?;
            let (ew, eb) = (ctx.param(ew)?, ctx.param(eb)?);
            let local = ctx.tape.conv3d(vol, ew, Some(eb), &enhance_spec(half))?;
            let vol = ctx.tape.add(vol, local)?;
            v = TokenGrid::flatten(ctx.tape, vol)?.tokens;
        }
        let kh = split_heads(ctx.tape, k, split.per_branch, split.head_dim)?;
        let vh = split_heads(ctx.tape, v, split.per_branch, split.head_dim)?;
        let qh = ctx.tape.slice(q_heads, 1, i * split.per_branch, split.per_branch)?;
        let scores = ctx.tape.matmul(qh, kh, true)?;
        let scores = ctx.tape.scale(scores, inv_sqrt)?;
        let attn = ctx.tape.softmax(scores, 3)?;
        ctx.log_attention(AttentionRecord {
            layer: layer.to_string(),
            branch: i,
            r,
            queries: l,
            keys,
            weights: attn,
        });
        outputs.push(ctx.tape.matmul(attn, vh, false)?);
    }
    let heads = ctx.tape.concat(&outputs, 1)?;
    let merged = ctx.tape.permute(heads, &[0, 2, 1, 3])?;
    ctx.tape.reshape(merged, &[batch, l, c])
}

/// Shared machinery of [`Tmsm`] and [`Tmcm`].
#[derive(Clone, Debug)]
struct AttentionCore {
    name: String,
    channels: usize,
    grid: [usize; 3],
    scales: ScalePair,
    split: HeadSplit,
    q_weight: ParamId,
    q_bias: ParamId,
    tmmm: Tmmm,
    kv: [KvProjection; 2],
    post: Option<RefineBlock>,
}

impl AttentionCore {
    fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        grid: [usize; 3],
        scales: ScalePair,
        heads: usize,
        opts: AttentionOptions,
    ) -> Result<Self> {
        let split = HeadSplit::new(channels, heads).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        check_grid(name, grid, scales)?;
        let full_name = b.full_name(name);
        let mut b = b.scope(name);
        let mut q = b.scope("query");
        let q_weight = q.xavier("weight", &[channels, channels], channels, channels);
        let q_bias = q.zeros("bias", &[channels]);
        let tmmm = Tmmm::new(&mut b.scope("tmmm"), channels, grid, scales)?;
        let kv = [
            KvProjection::new(&mut b.scope("kv_coarse"), channels, opts.value_enhance),
            KvProjection::new(&mut b.scope("kv_fine"), channels, opts.value_enhance),
        ];
        let post = if opts.post_block {
            Some(RefineBlock::new(&mut b.scope("post"), channels)?)
        } else {
            None
        };
        Ok(Self {
            name: full_name,
            channels,
            grid,
            scales,
            split,
            q_weight,
            q_bias,
            tmmm,
            kv,
            post,
        })
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var, role: &str) -> Result<()> {
        let shape = tape.value(x)?.shape();
        if shape.len() != 5 || shape[1] != self.channels || shape[2..] != self.grid {
            return Err(Error::Shape {
                op: "attention",
                detail: format!(
                    "{}: {role} {shape:?} does not match [N, {}, {:?}]",
                    self.name, self.channels, self.grid
                ),
            });
        }
        Ok(())
    }

    /// `post(residual + attention(query_src, kv_src))`.
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, query_src: Var, kv_src: Var, residual: Var) -> Result<Var> {
        let tokens = TokenGrid::flatten(ctx.tape, query_src)?;
        let (w, b) = (ctx.param(self.q_weight)?, ctx.param(self.q_bias)?);
        let q = ctx.tape.linear(tokens.tokens, w, Some(b))?;
        let grids = self.tmmm.forward(ctx, kv_src)?;
        let attn = multiscale_attention(ctx, &self.name, q, &grids, self.scales, self.split, &self.kv)?;
        let attn = TokenGrid { tokens: attn, ..tokens }.unflatten(ctx.tape)?;
        let y = ctx.tape.add(residual, attn)?;
        match &self.post {
            Some(p) => p.forward(ctx, y),
            None => Ok(y),
        }
    }

    fn flops(&self) -> u64 {
        let c = self.channels as u64;
        let l: usize = self.grid.iter().product();
        let l64 = l as u64;
        let mut total = 2 * l64 * c * c; // query projection
        total += self.tmmm.flops(self.channels);
        for (r, &keys) in self.scales.as_array().into_iter().zip(&self.tmmm.token_counts()) {
            let k = keys as u64;
            total += 2 * k * c * c; // key/value projection
            if self.kv[0].enhance.is_some() {
                total += 2 * k * (c / 2) * 27;
            }
            total += qk_flops(self.split, l, r) * 2; // scores and weighted values
        }
        if let Some(p) = &self.post {
            total += p.flops(self.grid);
        }
        total
    }
}

/// FLOPs of the `Q K^T` product of one branch: `2 * (n/2) * l * (l / r^3) * hd`.
pub fn qk_flops(split: HeadSplit, l: usize, r: usize) -> u64 {
    let keys = (l / (r * r * r)) as u64;
    2 * split.per_branch as u64 * l as u64 * keys * split.head_dim as u64
}

/// Multi-scale self-attention layer; output shape equals input shape.
#[derive(Clone, Debug)]
pub struct Tmsm {
    core: AttentionCore,
}

impl Tmsm {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        grid: [usize; 3],
        scales: ScalePair,
        heads: usize,
        opts: AttentionOptions,
    ) -> Result<Self> {
        Ok(Self {
            core: AttentionCore::new(b, name, channels, grid, scales, heads, opts)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.core.check_input(ctx.tape, x, "input")?;
        self.core.forward(ctx, x, x, x)
    }

    pub fn token_counts(&self) -> [usize; 2] {
        self.core.tmmm.token_counts()
    }

    pub fn scales(&self) -> ScalePair {
        self.core.scales
    }

    pub fn flops(&self) -> u64 {
        self.core.flops()
    }
}

/// Cross-attention skip: queries from the encoder feature, keys and values
/// from the decoder stream, residual on the decoder stream.
#[derive(Clone, Debug)]
pub struct Tmcm {
    core: AttentionCore,
}

impl Tmcm {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        grid: [usize; 3],
        scales: ScalePair,
        heads: usize,
        opts: AttentionOptions,
    ) -> Result<Self> {
        Ok(Self {
            core: AttentionCore::new(b, name, channels, grid, scales, heads, opts)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, encoder: Var, decoder: Var) -> Result<Var> {
        let (es, ds) = (
            ctx.tape.value(encoder)?.shape().to_vec(),
            ctx.tape.value(decoder)?.shape().to_vec(),
        );
        if es != ds {
            return Err(Error::Wiring(format!(
                "{}: encoder feature {es:?} and decoder feature {ds:?} differ",
                self.core.name
            )));
        }
        self.core.check_input(ctx.tape, decoder, "decoder feature")?;
        self.core.forward(ctx, encoder, decoder, decoder)
    }

    pub fn token_counts(&self) -> [usize; 2] {
        self.core.tmmm.token_counts()
    }

    pub fn scales(&self) -> ScalePair {
        self.core.scales
    }

    pub fn flops(&self) -> u64 {
        self.core.flops()
    }
}
