//! The four-stage encoder/decoder with deep-supervision heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOptions, ScalePair, Tmcm, Tmsm, ValueEnhance, DECODER_SCALES, ENCODER_SCALES};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBnAct, Ctx, Mode, ParamStore, RefineBlock, ResidualBlock, SegmentationHead, UpConvBnAct};
use crate::ops::conv::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention (or replacement convolution) layers per stage.
pub const LAYERS_PER_STAGE: usize = 3;

/// Total downsampling of the deepest encoder stage.
pub const DEPTH_FACTOR: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub heads: usize,
    pub num_targets: usize,
    pub extents: [usize; 3],
    pub tmsm_encoder: bool,
    pub tmsm_decoder: bool,
    pub tmcm: bool,
    pub deep_supervision: bool,
    pub value_enhance: ValueEnhance,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            stage_channels: [32, 64, 128, 256],
            heads: 16,
            num_targets: 3,
            extents: [128, 128, 128],
            tmsm_encoder: true,
            tmsm_decoder: true,
            tmcm: true,
            deep_supervision: true,
            value_enhance: ValueEnhance::Depthwise3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile: 32^3, channels (8, 16, 32, 64), four heads.
    pub fn toy() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            heads: 4,
            extents: [32, 32, 32],
            ..Self::default()
        }
    }

    /// Every module switch off.
    pub fn without_modules(mut self) -> Self {
        self.tmsm_encoder = false;
        self.tmsm_decoder = false;
        self.tmcm = false;
        self.deep_supervision = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_targets != 3 {
            return Err(Error::Config(format!(
                "num_targets must be 3 (ET, TC, WT), got {}",
                self.num_targets
            )));
        }
        if self.heads == 0 || self.heads % 2 != 0 {
            return Err(Error::Config(format!("head count {} must be even and positive", self.heads)));
        }
        if let Some(e) = self.extents.iter().find(|&&e| e == 0 || e % DEPTH_FACTOR != 0) {
            return Err(Error::Config(format!(
                "input extents {:?} must be divisible by {DEPTH_FACTOR} (offending extent {e})",
                self.extents
            )));
        }
        for (k, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {}: {c} channels not divisible by {} heads",
                    k + 1,
                    self.heads
                )));
            }
        }
        for (k, s) in ENCODER_SCALES.iter().enumerate() {
            let grid = self.encoder_extents(k);
            if grid.iter().any(|&e| e % s.r1 != 0 || e % s.r2 != 0) {
                return Err(Error::Config(format!(
                    "encoder stage {}: grid {grid:?} not divisible by scales ({}, {})",
                    k + 1,
                    s.r1,
                    s.r2
                )));
            }
        }
        Ok(())
    }

    /// Spatial extents of encoder stage `k` (0-based): input / (4 * 2^k).
    pub fn encoder_extents(&self, k: usize) -> [usize; 3] {
        let f = 4 << k;
        self.extents.map(|e| e / f)
    }

    fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            value_enhance: self.value_enhance,
            post_block: true,
        }
    }
}

/// The four head predictions, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs<V> {
    pub p16: V,
    pub p8: V,
    pub p4: V,
    pub p1: V,
}

impl<V: Clone> StageOutputs<V> {
    pub fn as_array(&self) -> [V; 4] {
        [self.p16.clone(), self.p8.clone(), self.p4.clone(), self.p1.clone()]
    }

    pub fn from_array([p16, p8, p4, p1]: [V; 4]) -> Self {
        Self { p16, p8, p4, p1 }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&V) -> Result<U>) -> Result<StageOutputs<U>> {
        Ok(StageOutputs {
            p16: f(&self.p16)?,
            p8: f(&self.p8)?,
            p4: f(&self.p4)?,
            p1: f(&self.p1)?,
        })
    }
}

/// Head outputs plus the intermediate stage features of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub heads: StageOutputs<Var>,
    /// Encoder stage outputs 1-4.
    pub encoder: [Var; 4],
    /// Decoder stage outputs 1-4 (before the heads).
    pub decoder: [Var; 4],
}

#[derive(Clone, Debug)]
enum Block {
    Attention(Tmsm),
    Conv(RefineBlock),
}

impl Block {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Attention(t) => t.forward(ctx, x),
            Block::Conv(r) => r.forward(ctx, x),
        }
    }

    fn flops(&self, grid: [usize; 3]) -> u64 {
        match self {
            Block::Attention(t) => t.flops(),
            Block::Conv(r) => r.flops(grid),
        }
    }
}

#[derive(Clone, Debug)]
enum Skip {
    Cross(Tmcm),
    Sum,
}

/// Layer structure of a model; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    stem: ConvBnAct,
    downs: Vec<ConvBnAct>,
    encoder_blocks: Vec<Vec<Block>>,
    ups: Vec<UpConvBnAct>,
    skips: Vec<Skip>,
    decoder_blocks: Vec<Vec<Block>>,
    final_up: UpConvBnAct,
    input_block: ResidualBlock,
    refine: ResidualBlock,
    project: ConvBnAct,
    heads: Vec<SegmentationHead>,
}

fn stage_blocks<T: Scalar>(
    b: &mut Builder<'_, T>,
    attention: bool,
    channels: usize,
    grid: [usize; 3],
    scales: ScalePair,
    config: &ModelConfig,
) -> Result<Vec<Block>> {
    (0..LAYERS_PER_STAGE)
        .map(|i| {
            if attention {
                let name = format!("tmsm{i}");
                Tmsm::new(b, &name, channels, grid, scales, config.heads, config.attention_options()).map(Block::Attention)
            } else {
                RefineBlock::new(&mut b.scope(&format!("conv{i}")), channels).map(Block::Conv)
            }
        })
        .collect()
}

impl Network {
    pub fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut root = Builder::new(store, &mut rng);
        let c = config.stage_channels;

        let mut encoder_blocks = Vec::with_capacity(4);
        let mut downs = Vec::with_capacity(3);
        let stem = {
            let mut b = root.scope("enc1");
            ConvBnAct::new(
                &mut b.scope("stem"),
                ConvSpec::new(config.in_channels, c[0], 4).with_stride(4),
            )?
        };
        for k in 0..4 {
            let mut b = root.scope(&format!("enc{}", k + 1));
            if k > 0 {
                downs.push(ConvBnAct::new(
                    &mut b.scope("down"),
                    ConvSpec::new(c[k - 1], c[k], 2).with_stride(2),
                )?);
            }
            encoder_blocks.push(stage_blocks(
                &mut b,
                config.tmsm_encoder,
                c[k],
                config.encoder_extents(k),
                ENCODER_SCALES[k],
                config,
            )?);
        }

        let mut ups = Vec::with_capacity(3);
        let mut skips = Vec::with_capacity(3);
        let mut decoder_blocks = Vec::with_capacity(3);
        for k in 0..3 {
            // decoder stage k+1 mirrors encoder stage 3-k
            let level = 2 - k;
            let (cin, cout) = (c[level + 1], c[level]);
            let grid = config.encoder_extents(level);
            let scales = DECODER_SCALES[k];
            let mut b = root.scope(&format!("dec{}", k + 1));
            ups.push(UpConvBnAct::new(&mut b, cin, cout, 2)?);
            skips.push(if config.tmcm {
                Skip::Cross(Tmcm::new(
                    &mut b,
                    "tmcm",
                    cout,
                    grid,
                    scales,
                    config.heads,
                    config.attention_options(),
                )?)
            } else {
                Skip::Sum
            });
            decoder_blocks.push(stage_blocks(&mut b, config.tmsm_decoder, cout, grid, scales, config)?);
        }

        let (final_up, input_block, refine, project) = {
            let mut b = root.scope("dec4");
            (
                UpConvBnAct::new(&mut b, c[0], c[0], 4)?,
                ResidualBlock::new(&mut b.scope("input_block"), config.in_channels, c[0])?,
                ResidualBlock::new(&mut b.scope("refine"), c[0], c[0])?,
                ConvBnAct::new(&mut b.scope("project"), ConvSpec::new(c[0], c[0], 1))?,
            )
        };
        let head_channels = [c[2], c[1], c[0], c[0]];
        let heads = head_channels
            .iter()
            .enumerate()
            .map(|(k, &ch)| SegmentationHead::new(&mut root.scope(&format!("head{}", k + 1)), ch, config.num_targets))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config: config.clone(),
            stem,
            downs,
            encoder_blocks,
            ups,
            skips,
            decoder_blocks,
            final_up,
            input_block,
            refine,
            project,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ForwardOutput> {
        let shape = ctx.tape.value(x)?.shape().to_vec();
        let cfg = &self.config;
        if shape.len() != 5 || shape[1] != cfg.in_channels || shape[2..] != cfg.extents {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "input {shape:?} does not match [N, {}, {:?}]",
                    cfg.in_channels, cfg.extents
                ),
            });
        }

        let mut encoder = Vec::with_capacity(4);
        let mut h = self.stem.forward(ctx, x)?;
        for k in 0..4 {
            if k > 0 {
                h = self.downs[k - 1].forward(ctx, h)?;
            }
            for blk in &self.encoder_blocks[k] {
                h = blk.forward(ctx, h)?;
            }
            encoder.push(h);
        }

        let mut decoder = Vec::with_capacity(4);
        let mut preds = Vec::with_capacity(4);
        for k in 0..3 {
            let partner = encoder[2 - k];
            let up = self.ups[k].forward(ctx, h)?;
            h = match &self.skips[k] {
                Skip::Cross(t) => t.forward(ctx, partner, up)?,
                Skip::Sum => ctx.tape.add(partner, up)?,
            };
            for blk in &self.decoder_blocks[k] {
                h = blk.forward(ctx, h)?;
            }
            decoder.push(h);
            preds.push(self.heads[k].forward(ctx, h)?);
        }

        let up = self.final_up.forward(ctx, h)?;
        let stem = self.input_block.forward(ctx, x)?;
        let fused = ctx.tape.add(stem, up)?;
        let y = self.refine.forward(ctx, fused)?;
        let y = self.project.forward(ctx, y)?;
        decoder.push(y);
        preds.push(self.heads[3].forward(ctx, y)?);

        Ok(ForwardOutput {
            heads: StageOutputs::from_array(preds.try_into().expect("four heads")),
            encoder: encoder.try_into().expect("four stages"),
            decoder: decoder.try_into().expect("four stages"),
        })
    }

    /// Forward FLOPs at the configured extents: `2 * MACs` of every convolution,
    /// transposed convolution, projection and attention product.
    pub fn flops(&self) -> u64 {
        let cfg = &self.config;
        let mut total = self.stem.conv.flops(cfg.extents);
        for k in 0..4 {
            if k > 0 {
                total += self.downs[k - 1].conv.flops(cfg.encoder_extents(k - 1));
            }
            let grid = cfg.encoder_extents(k);
            total += self.encoder_blocks[k].iter().map(|b| b.flops(grid)).sum::<u64>();
        }
        for k in 0..3 {
            let level = 2 - k;
            let grid = cfg.encoder_extents(level);
            total += self.ups[k].flops(cfg.encoder_extents(level + 1));
            if let Skip::Cross(t) = &self.skips[k] {
                total += t.flops();
            }
            total += self.decoder_blocks[k].iter().map(|b| b.flops(grid)).sum::<u64>();
            total += self.heads[k].flops(grid);
        }
        total += self.final_up.flops(cfg.encoder_extents(0));
        total += self.input_block.flops(cfg.extents);
        total += self.refine.flops(cfg.extents);
        total += self.project.conv.flops(cfg.extents);
        total += self.heads[3].flops(cfg.extents);
        total
    }

    /// Attention layers with their token counts, in forward order.
    pub fn token_schedule(&self) -> Vec<TokenSchedule> {
        let mut out = Vec::new();
        let cfg = &self.config;
        for (k, blocks) in self.encoder_blocks.iter().enumerate() {
            let grid = cfg.encoder_extents(k);
            for (i, b) in blocks.iter().enumerate() {
                if let Block::Attention(t) = b {
                    out.push(TokenSchedule::new(format!("enc{}.tmsm{i}", k + 1), grid, t.scales(), t.token_counts()));
                }
            }
        }
        for k in 0..3 {
            let grid = cfg.encoder_extents(2 - k);
            if let Skip::Cross(t) = &self.skips[k] {
                out.push(TokenSchedule::new(format!("dec{}.tmcm", k + 1), grid, t.scales(), t.token_counts()));
            }
            for (i, b) in self.decoder_blocks[k].iter().enumerate() {
                if let Block::Attention(t) = b {
                    out.push(TokenSchedule::new(format!("dec{}.tmsm{i}", k + 1), grid, t.scales(), t.token_counts()));
                }
            }
        }
        out
    }
}

/// Query and key/value token counts of one attention layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSchedule {
    pub layer: String,
    pub queries: usize,
    pub scales: ScalePair,
    pub keys: [usize; 2],
}

impl TokenSchedule {
    fn new(layer: String, grid: [usize; 3], scales: ScalePair, keys: [usize; 2]) -> Self {
        Self {
            layer,
            queries: grid.iter().product(),
            scales,
            keys,
        }
    }
}

/// One row of the stage shape table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub stage: String,
    pub channels: usize,
    pub extents: [usize; 3],
}

/// Feature shapes of every encoder stage, decoder stage and head.
pub fn stage_shapes(config: &ModelConfig) -> Vec<StageShape> {
    let c = config.stage_channels;
    let mut out = Vec::new();
    for k in 0..4 {
        out.push(StageShape {
            stage: format!("enc{}", k + 1),
            channels: c[k],
            extents: config.encoder_extents(k),
        });
    }
    for k in 0..3 {
        out.push(StageShape {
            stage: format!("dec{}", k + 1),
            channels: c[2 - k],
            extents: config.encoder_extents(2 - k),
        });
    }
    out.push(StageShape {
        stage: "dec4".into(),
        channels: c[0],
        extents: config.extents,
    });
    let head_ext = [
        config.encoder_extents(2),
        config.encoder_extents(1),
        config.encoder_extents(0),
        config.extents,
    ];
    for (k, e) in head_ext.into_iter().enumerate() {
        out.push(StageShape {
            stage: format!("head{}", k + 1),
            channels: config.num_targets,
            extents: e,
        });
    }
    out
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    net: Network,
    store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store)?;
        Ok(Self { net, store })
    }

    /// Reassemble from a config and a parameter store laid out by [`Network::build`].
    pub(crate) fn from_parts(net: Network, store: ParamStore<T>) -> Self {
        Self { net, store }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Borrow the layer structure and the parameters separately, for building a [`Ctx`].
    pub fn split(&mut self) -> (&Network, &mut ParamStore<T>) {
        (&self.net, &mut self.store)
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn flops(&self) -> u64 {
        self.net.flops()
    }

    /// Head probabilities for a batch, with parameters held constant.
    pub fn predict(&mut self, input: &Tensor<T>, mode: Mode) -> Result<StageOutputs<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone())?;
        let (net, store) = self.split();
        let mut ctx = Ctx::new(&mut tape, store, mode).frozen();
        let out = net.forward(&mut ctx, x)?;
        out.heads.try_map(|&v| Ok(tape.value(v)?.clone()))
    }

    /// Element-converted copy.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }
}

/// Forward FLOPs of `config` evaluated at `extents`.
pub fn flops_estimate(config: &ModelConfig, extents: [usize; 3]) -> Result<u64> {
    let cfg = ModelConfig {
        extents,
        ..config.clone()
    };
    let mut store = ParamStore::<f32>::new();
    Ok(Network::build(&cfg, &mut store)?.flops())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_problem() {
        let bad = ModelConfig {
            extents: [32, 48, 32],
            ..ModelConfig::toy()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("48")));
        let bad = ModelConfig {
            stage_channels: [8, 16, 30, 64],
            ..ModelConfig::toy()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("stage 3")));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"heads": 4, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"heads": 4, "value_enhance": "identity"}"#).unwrap();
        assert_eq!(ok.value_enhance, ValueEnhance::Identity);
    }

    #[test]
    fn stage_shape_table() {
        let rows = stage_shapes(&ModelConfig::toy());
        let enc: Vec<_> = rows[..4].iter().map(|r| (r.channels, r.extents[0])).collect();
        assert_eq!(enc, vec![(8, 8), (16, 4), (32, 2), (64, 1)]);
        let heads: Vec<_> = rows[8..].iter().map(|r| r.extents[0]).collect();
        assert_eq!(heads, vec![2, 4, 8, 32]);
    }

    #[test]
    fn toy_forward_shapes() {
        let mut m = Model::<f32>::new(&ModelConfig::toy()).unwrap();
        let x = Tensor::from_fn(&[1, 4, 32, 32, 32], |i| ((i % 17) as f32 - 8.0) / 8.0);
        let out = m.predict(&x, Mode::Eval).unwrap();
        assert_eq!(out.p16.shape(), &[1, 3, 2, 2, 2]);
        assert_eq!(out.p8.shape(), &[1, 3, 4, 4, 4]);
        assert_eq!(out.p4.shape(), &[1, 3, 8, 8, 8]);
        assert_eq!(out.p1.shape(), &[1, 3, 32, 32, 32]);
        for t in out.as_array() {
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
