//! Parameter storage, the forward-pass context, and the convolutional blocks
//! shared by the encoder, the decoder and the attention layers.

use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionRecord;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::ops::norm::BATCH_NORM_MOMENTUM;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Default PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable parameter.
    Weight,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter arrays of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Element-converted copy.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix while a model is built.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    /// `name` qualified by this builder's scope.
    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.push(name, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.push(name, value, ParamKind::Buffer)
    }

    /// Kaiming-uniform with the PReLU gain: `U(-b, b)`, `b = gain * sqrt(3 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let gain = (2.0 / (1.0 + PRELU_INIT * PRELU_INIT)).sqrt();
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, self.rng);
        self.param(name, t)
    }

    /// Xavier-uniform: `U(-b, b)`, `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, self.rng);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.param(name, Tensor::full(shape, lit(value)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Running statistics, no state changes.
    Eval,
}

/// Per-forward state: the tape, lazily bound parameters and optional probes.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    attention_log: Option<Vec<AttentionRecord>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Self {
            tape,
            store,
            bound: vec![None; n],
            mode,
            track_params: true,
            attention_log: None,
        }
    }

    /// Record parameters as constants (no gradient).
    pub fn frozen(mut self) -> Self {
        self.track_params = false;
        self
    }

    /// Keep a record of every attention map computed during this forward.
    pub fn with_attention_log(mut self) -> Self {
        self.attention_log = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Variable for a stored parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let value = self.store.entries[id.0].value.clone();
        let v = if self.track_params && self.store.entries[id.0].kind == ParamKind::Weight {
            self.tape.leaf(value)?
        } else {
            self.tape.constant(value)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Parameters that were used in this forward, with their variables.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(id, _)| self.store.entries[id.0].kind == ParamKind::Weight)
            .collect()
    }

    pub(crate) fn log_attention(&mut self, record: AttentionRecord) {
        if let Some(log) = self.attention_log.as_mut() {
            log.push(record);
        }
    }

    pub fn take_attention_log(&mut self) -> Vec<AttentionRecord> {
        self.attention_log.take().unwrap_or_default()
    }
}

/// Per-channel batch normalization over axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: b.constant("gamma", &[channels], 1.0),
            beta: b.zeros("beta", &[channels]),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma)?, ctx.param(self.beta)?);
        match ctx.mode {
            Mode::Train => {
                let count = {
                    let v = ctx.tape.value(x)?;
                    v.numel() / self.channels
                };
                let (y, mean, var) = ctx.tape.batch_norm_train(x, g, b)?;
                let m = lit::<T>(BATCH_NORM_MOMENTUM);
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                let rm = ctx.store.get_mut(self.running_mean);
                for (r, &bm) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * bm;
                }
                let rv = ctx.store.get_mut(self.running_var);
                for (r, &bv) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * bv * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).data().to_vec();
                let var = ctx.store.get(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, g, b, &mean, &var)
            }
        }
    }
}

/// Bare convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels / spec.groups * spec.kernel_volume();
        Ok(Self {
            weight: b.kaiming("weight", &spec.weight_shape(), fan_in),
            bias: b.zeros("bias", &[spec.out_channels]),
            spec,
        })
    }

    /// Convolution whose weight and bias start at zero.
    pub fn zero_init<T: Scalar>(b: &mut Builder<'_, T>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            weight: b.zeros("weight", &spec.weight_shape()),
            bias: b.zeros("bias", &[spec.out_channels]),
            spec,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight)?, ctx.param(self.bias)?);
        ctx.tape.conv3d(x, w, Some(b), &self.spec)
    }

    /// `2 * MACs` at the given input extents.
    pub fn flops(&self, input: [usize; 3]) -> u64 {
        let out = self.spec.output_extents(input).expect("validated extents");
        let vox: usize = out.iter().product();
        2 * (vox * self.spec.out_channels * (self.spec.in_channels / self.spec.groups) * self.spec.kernel_volume())
            as u64
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    slope: ParamId,
}

impl Prelu {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            slope: b.constant("slope", &[channels], PRELU_INIT),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.param(self.slope)?;
        ctx.tape.prelu(x, s)
    }
}

/// Convolution followed by batch norm and PReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    bn: BatchNorm,
    act: Prelu,
}

impl ConvBnAct {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, spec: ConvSpec) -> Result<Self> {
        let conv = Conv::new(&mut b.scope("conv"), spec)?;
        Ok(Self {
            bn: BatchNorm::new(&mut b.scope("bn"), spec.out_channels),
            act: Prelu::new(&mut b.scope("act"), spec.out_channels),
            conv,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        self.act.forward(ctx, y)
    }
}

/// Transposed convolution (kernel = stride = factor) with batch norm and PReLU.
#[derive(Clone, Debug)]
pub struct UpConvBnAct {
    pub spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
    bn: BatchNorm,
    act: Prelu,
}

impl UpConvBnAct {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize, out_channels: usize, factor: usize) -> Result<Self> {
        if factor < 1 {
            return Err(Error::Config("upsampling factor must be >= 1".into()));
        }
        let spec = ConvSpec::new(in_channels, out_channels, factor).with_stride(factor);
        spec.validate()?;
        let k = spec.kernel_volume();
        let mut conv = b.scope("up");
        let weight = conv.kaiming("weight", &spec.transposed_weight_shape(), in_channels * k);
        let bias = conv.zeros("bias", &[out_channels]);
        Ok(Self {
            spec,
            weight,
            bias,
            bn: BatchNorm::new(&mut b.scope("bn"), out_channels),
            act: Prelu::new(&mut b.scope("act"), out_channels),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight)?, ctx.param(self.bias)?);
        let y = ctx.tape.conv_transpose3d(x, w, Some(b), &self.spec)?;
        let y = self.bn.forward(ctx, y)?;
        self.act.forward(ctx, y)
    }

    pub fn flops(&self, input: [usize; 3]) -> u64 {
        let vox: usize = input.iter().product();
        2 * (vox * self.spec.in_channels * self.spec.out_channels * self.spec.kernel_volume()) as u64
    }
}

/// `act(bn(conv3(act(bn(conv3(x))))) + shortcut(x))` with a 1x1x1 shortcut when
/// the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    first: ConvBnAct,
    second: Conv,
    second_bn: BatchNorm,
    shortcut: Option<Conv>,
    act: Prelu,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize, out_channels: usize) -> Result<Self> {
        let first = ConvBnAct::new(
            &mut b.scope("conv1"),
            ConvSpec::new(in_channels, out_channels, 3).with_padding(1),
        )?;
        let second = Conv::new(
            &mut b.scope("conv2"),
            ConvSpec::new(out_channels, out_channels, 3).with_padding(1),
        )?;
        let second_bn = BatchNorm::new(&mut b.scope("bn2"), out_channels);
        let shortcut = if in_channels != out_channels {
            Some(Conv::new(&mut b.scope("shortcut"), ConvSpec::new(in_channels, out_channels, 1))?)
        } else {
            None
        };
        Ok(Self {
            first,
            second,
            second_bn,
            shortcut,
            act: Prelu::new(&mut b.scope("act"), out_channels),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        let y = self.second_bn.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        let y = ctx.tape.add(y, skip)?;
        self.act.forward(ctx, y)
    }

    pub fn flops(&self, input: [usize; 3]) -> u64 {
        self.first.conv.flops(input)
            + self.second.flops(input)
            + self.shortcut.as_ref().map_or(0, |c| c.flops(input))
    }
}

/// Residual refinement `x + conv1(act(bn(conv3(x))))`, last projection zero-initialized.
#[derive(Clone, Debug)]
pub struct RefineBlock {
    body: ConvBnAct,
    project: Conv,
}

impl RefineBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            body: ConvBnAct::new(&mut b.scope("body"), ConvSpec::new(channels, channels, 3).with_padding(1))?,
            project: Conv::zero_init(&mut b.scope("project"), ConvSpec::new(channels, channels, 1))?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.body.forward(ctx, x)?;
        let y = self.project.forward(ctx, y)?;
        ctx.tape.add(x, y)
    }

    pub fn flops(&self, input: [usize; 3]) -> u64 {
        self.body.conv.flops(input) + self.project.flops(input)
    }
}

/// 1x1x1 segmentation head with per-channel sigmoid.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    conv: Conv,
}

impl SegmentationHead {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize, targets: usize) -> Result<Self> {
        let spec = ConvSpec::new(in_channels, targets, 1);
        let bound = (1.0 / in_channels as f64).sqrt();
        let init = Tensor::rand_uniform(&spec.weight_shape(), -bound, bound, b.rng());
        let weight = b.param("weight", init);
        let bias = b.zeros("bias", &[targets]);
        Ok(Self {
            conv: Conv { spec, weight, bias },
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(ctx, x)?;
        ctx.tape.sigmoid(logits)
    }

    pub fn flops(&self, input: [usize; 3]) -> u64 {
        self.conv.flops(input)
    }
}
