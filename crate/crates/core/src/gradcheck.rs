//! Central finite-difference checks of tape gradients in `f64`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionOptions, ScalePair, Tmcm, Tmsm};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{deep_supervision_loss, RegionMask, SupervisionWeights, DICE_SMOOTH};
use crate::network::{Model, ModelConfig};
use crate::nn::{Builder, Ctx, Mode, ParamKind, ParamStore};
use crate::ops::conv::ConvSpec;
use crate::tensor::Tensor;

/// Group of checks selectable on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    All,
    TensorCore,
    Attention,
    Network,
    Loss,
}

impl Scope {
    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Scope::All,
            "tensor-core" | "primitives" => Scope::TensorCore,
            "attention" => Scope::Attention,
            "network" => Scope::Network,
            "loss" | "loss-metrics" => Scope::Loss,
            other => {
                return Err(Error::Config(format!(
                    "unknown scope {other:?} (all, tensor-core, attention, network, loss)"
                )))
            }
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scope::All => "all",
            Scope::TensorCore => "tensor-core",
            Scope::Attention => "attention",
            Scope::Network => "network",
            Scope::Loss => "loss",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub samples: usize,
    pub seed: u64,
    /// Scale the backward pass of the named operation (negative control).
    pub fault: Option<(String, f64)>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            samples: 50,
            seed: 0,
            fault: None,
        }
    }
}

/// Outcome of one unit.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub unit: String,
    pub scope: Scope,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates re-measured at a tenth of the step because the two
    /// estimates disagreed (a non-differentiable point inside the stencil).
    pub kinks: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Objective<'a> = dyn FnMut(&[Tensor<f64>], Option<&(String, f64)>, bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)> + 'a;

/// Compare analytic and central-difference derivatives of `objective` at
/// `inputs` on `opts.samples` random coordinates (all of them if fewer exist).
pub fn check(unit: &str, scope: Scope, inputs: Vec<Tensor<f64>>, objective: &mut Objective<'_>, opts: &Options) -> Result<CheckResult> {
    let (_, grads) = objective(&inputs, opts.fault.as_ref(), true)?;
    let grads = grads.ok_or_else(|| Error::Usage("objective returned no gradient".into()))?;
    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let coords: Vec<usize> = if total <= opts.samples {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, opts.samples).into_vec()
    };
    let mut inputs = inputs;
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    let mut kinks = 0;
    for &flat in &coords {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let analytic = grads[which].data()[idx];
        let mut numeric = central_difference(objective, &mut inputs, which, idx, opts.step)?;
        if relative_error(analytic, numeric, opts.floor) > opts.tolerance {
            let fine = central_difference(objective, &mut inputs, which, idx, opts.step / 10.0)?;
            if relative_error(fine, numeric, opts.floor) > opts.tolerance {
                kinks += 1;
                numeric = fine;
            }
        }
        max_rel = max_rel.max(relative_error(analytic, numeric, opts.floor));
        max_abs = max_abs.max((analytic - numeric).abs());
    }
    Ok(CheckResult {
        unit: unit.to_string(),
        scope,
        coordinates: coords.len(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        kinks,
        passed: max_rel <= opts.tolerance,
    })
}

fn central_difference(
    objective: &mut Objective<'_>,
    inputs: &mut [Tensor<f64>],
    which: usize,
    idx: usize,
    step: f64,
) -> Result<f64> {
    let orig = inputs[which].data()[idx];
    inputs[which].data_mut()[idx] = orig + step;
    let (plus, _) = objective(inputs, None, false)?;
    inputs[which].data_mut()[idx] = orig - step;
    let (minus, _) = objective(inputs, None, false)?;
    inputs[which].data_mut()[idx] = orig;
    Ok((plus - minus) / (2.0 * step))
}

/// `sum(out * w)` with a fixed pseudo-random `w`, making a scalar of any output.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.value(out)?.shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ed);
    let w = tape.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Check a function of leaf tensors, projected to a scalar.
fn check_fn(unit: &str, scope: Scope, inputs: Vec<Tensor<f64>>, build: &Build<'_>, opts: &Options) -> Result<CheckResult> {
    let mut objective = |xs: &[Tensor<f64>], fault: Option<&(String, f64)>, want: bool| {
        let mut tape = Tape::new();
        if let Some((op, f)) = fault {
            tape.inject_gradient_fault(op, *f);
        }
        let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        let value = tape.value(loss)?.item()?;
        if !want {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let gs = vars.iter().map(|&v| grads.get(v).cloned()).collect::<Result<Vec<_>>>()?;
        Ok((value, Some(gs)))
    };
    check(unit, scope, inputs, &mut objective, opts)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_normal(shape, 1.0, rng)
}

fn primitive_suite(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    let s = Scope::TensorCore;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;

    let spec = ConvSpec::new(2, 3, 3).with_padding(1);
    let ins = vec![randn(r, &[1, 2, 4, 4, 4]), randn(r, &spec.weight_shape()), randn(r, &[3])];
    out.push(check_fn("conv3d", s, ins, &move |t, v| t.conv3d(v[0], v[1], Some(v[2]), &spec), opts)?);

    let spec = ConvSpec::new(2, 4, 2).with_stride(2);
    let ins = vec![randn(r, &[2, 2, 4, 4, 2]), randn(r, &spec.weight_shape()), randn(r, &[4])];
    out.push(check_fn("conv3d_strided", s, ins, &move |t, v| t.conv3d(v[0], v[1], Some(v[2]), &spec), opts)?);

    let dw = ConvSpec::depthwise_aggregate(3, 2);
    let ins = vec![randn(r, &[1, 3, 4, 4, 4]), randn(r, &dw.weight_shape()), randn(r, &[3])];
    out.push(check_fn("depthwise_conv3d", s, ins, &|t, v| t.depthwise_aggregate(v[0], v[1], Some(v[2]), 2), opts)?);

    let spec = ConvSpec::new(4, 2, 2).with_stride(2);
    let ins = vec![randn(r, &[1, 4, 2, 2, 2]), randn(r, &spec.transposed_weight_shape()), randn(r, &[2])];
    out.push(check_fn(
        "transposed_conv3d",
        s,
        ins,
        &move |t, v| t.conv_transpose3d(v[0], v[1], Some(v[2]), &spec),
        opts,
    )?);

    let ins = vec![randn(r, &[2, 5, 6]), randn(r, &[6, 4]), randn(r, &[4])];
    out.push(check_fn("linear", s, ins, &|t, v| t.linear(v[0], v[1], Some(v[2])), opts)?);

    let ins = vec![randn(r, &[2, 3, 5, 4]), randn(r, &[2, 3, 6, 4])];
    out.push(check_fn("matmul", s, ins, &|t, v| t.matmul(v[0], v[1], true), opts)?);

    let ins = vec![randn(r, &[4, 3, 7])];
    out.push(check_fn("softmax", s, ins, &|t, v| t.softmax(v[0], 2), opts)?);

    let ins = vec![randn(r, &[3, 5, 8]), randn(r, &[8]), randn(r, &[8])];
    out.push(check_fn("layer_norm", s, ins, &|t, v| t.layer_norm(v[0], v[1], v[2]), opts)?);

    let ins = vec![randn(r, &[2, 3, 3, 2, 2]), randn(r, &[3]), randn(r, &[3])];
    out.push(check_fn(
        "batch_norm_train",
        s,
        ins,
        &|t, v| t.batch_norm_train(v[0], v[1], v[2]).map(|o| o.0),
        opts,
    )?);

    let (mean, var) = (vec![0.3, -0.2, 0.1], vec![0.8, 1.5, 0.4]);
    let ins = vec![randn(r, &[2, 3, 3, 2, 2]), randn(r, &[3]), randn(r, &[3])];
    out.push(check_fn(
        "batch_norm_eval",
        s,
        ins,
        &move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var),
        opts,
    )?);

    let ins = vec![randn(r, &[4, 20])];
    out.push(check_fn("gelu", s, ins, &|t, v| t.gelu(v[0]), opts)?);

    // keep inputs away from the kink at zero so central differences stay smooth
    let mut x = randn(r, &[2, 3, 3, 3, 2]);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    let ins = vec![x, Tensor::rand_uniform(&[3], 0.05, 0.5, r)];
    out.push(check_fn("prelu", s, ins, &|t, v| t.prelu(v[0], v[1]), opts)?);

    let ins = vec![randn(r, &[5, 12])];
    out.push(check_fn("sigmoid", s, ins, &|t, v| t.sigmoid(v[0]), opts)?);

    let ins = vec![randn(r, &[4, 15]), randn(r, &[4, 15])];
    out.push(check_fn(
        "elementwise",
        s,
        ins,
        &|t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[1])?;
            t.scale(m, 0.7)
        },
        opts,
    )?);

    let ins = vec![randn(r, &[2, 3, 4, 5]), randn(r, &[2, 2, 4, 5])];
    out.push(check_fn(
        "layout",
        s,
        ins,
        &|t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let p = t.permute(c, &[0, 3, 1, 2])?;
            let sl = t.slice(p, 2, 1, 3)?;
            t.reshape(sl, &[2, 60])
        },
        opts,
    )?);
    Ok(())
}

fn attention_layer_objective(
    unit: &str,
    cross: bool,
    opts: &Options,
) -> Result<CheckResult> {
    let (c, grid, heads) = (8, [4, 4, 4], 4);
    let scales = ScalePair::new(2, 1)?;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 11);
    enum Layer {
        S(Tmsm),
        C(Tmcm),
    }
    let layer = {
        let mut b = Builder::new(&mut store, &mut rng);
        let o = AttentionOptions::default();
        if cross {
            Layer::C(Tmcm::new(&mut b, "tmcm", c, grid, scales, heads, o)?)
        } else {
            Layer::S(Tmsm::new(&mut b, "tmsm", c, grid, scales, heads, o)?)
        }
    };
    perturb_zero_init(&mut store, &mut rng);
    let n_inputs = if cross { 2 } else { 1 };
    let mut inputs: Vec<Tensor<f64>> = (0..n_inputs).map(|_| randn(&mut rng, &[1, c, 4, 4, 4])).collect();
    let weight_ids: Vec<_> = store
        .ids()
        .filter(|&id| store.entries()[id.index()].kind == ParamKind::Weight)
        .collect();
    inputs.extend(weight_ids.iter().map(|&id| store.get(id).clone()));
    let mut objective = |xs: &[Tensor<f64>], fault: Option<&(String, f64)>, want: bool| {
        for (&id, x) in weight_ids.iter().zip(&xs[n_inputs..]) {
            *store.get_mut(id) = x.clone();
        }
        let mut tape = Tape::new();
        if let Some((op, f)) = fault {
            tape.inject_gradient_fault(op, *f);
        }
        let vars = xs[..n_inputs].iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let y = match &layer {
            Layer::S(t) => t.forward(&mut ctx, vars[0])?,
            Layer::C(t) => t.forward(&mut ctx, vars[0], vars[1])?,
        };
        let bindings = ctx.bindings();
        drop(ctx);
        let loss = project(&mut tape, y)?;
        let value = tape.value(loss)?.item()?;
        if !want {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let mut gs = vars.iter().map(|&v| grads.get(v).cloned()).collect::<Result<Vec<_>>>()?;
        for &id in &weight_ids {
            let g = match bindings.iter().find(|(b, _)| *b == id) {
                Some((_, v)) => grads.get(*v)?.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            };
            gs.push(g);
        }
        Ok((value, Some(gs)))
    };
    check(unit, Scope::Attention, inputs, &mut objective, opts)
}

/// Replace zero-initialized projections with small random values so that every
/// path carries gradient.
fn perturb_zero_init(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let e = &store.entries()[id.index()];
        if e.kind == ParamKind::Weight && e.value.data().iter().all(|&v| v == 0.0) {
            let shape = e.value.shape().to_vec();
            *store.get_mut(id) = Tensor::rand_uniform(&shape, -0.2, 0.2, rng);
        }
    }
}

fn attention_suite(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    out.push(attention_layer_objective("tmsm", false, opts)?);
    out.push(attention_layer_objective("tmcm", true, opts)?);
    Ok(())
}

fn nested_mask(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Result<RegionMask> {
    let vox: usize = shape[2..].iter().product();
    let mut data = vec![0u8; shape.iter().product()];
    for s in 0..shape[0] {
        for i in 0..vox {
            let level = rng.random_range(0..4u8);
            for r in 0..3 {
                // region r present when level > 2 - r, giving ET <= TC <= WT
                data[(s * 3 + r) * vox + i] = (level as usize > 2 - r) as u8;
            }
        }
    }
    RegionMask::new(shape, data)
}

fn loss_suite(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 7);
    let shape = [2, 3, 3, 3, 2];
    let mask = nested_mask(&mut rng, shape)?;
    let target = mask.to_tensor::<f64>();
    let pred = Tensor::rand_uniform(&shape, 0.05, 0.95, &mut rng);
    let mut objective = |xs: &[Tensor<f64>], fault: Option<&(String, f64)>, want: bool| {
        let mut tape = Tape::new();
        if let Some((op, f)) = fault {
            tape.inject_gradient_fault(op, *f);
        }
        let p = tape.leaf(xs[0].clone())?;
        let loss = tape.dice_loss(p, &target, DICE_SMOOTH)?;
        let value = tape.value(loss)?.item()?;
        if !want {
            return Ok((value, None));
        }
        let g = tape.backward(loss)?;
        Ok((value, Some(vec![g.get(p)?.clone()])))
    };
    out.push(check("dice_loss", Scope::Loss, vec![pred], &mut objective, opts)?);
    Ok(())
}

fn network_suite(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    let config = ModelConfig {
        seed: opts.seed,
        ..ModelConfig::toy()
    };
    let mut model = Model::<f64>::new(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 3);
    perturb_zero_init(model.params_mut(), &mut rng);
    let batch = 2;
    let [h, w, d] = config.extents;
    let x = Tensor::rand_normal(&[batch, config.in_channels, h, w, d], 1.0, &mut rng);
    let mask = nested_mask(&mut rng, [batch, 3, h, w, d])?;
    let weights = SupervisionWeights::default();
    let ids: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().entries()[id.index()].kind == ParamKind::Weight)
        .collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params().get(id).clone()).collect();
    let mut objective = |xs: &[Tensor<f64>], fault: Option<&(String, f64)>, want: bool| {
        for (&id, v) in ids.iter().zip(xs) {
            *model.params_mut().get_mut(id) = v.clone();
        }
        let mut tape = Tape::new();
        if let Some((op, f)) = fault {
            tape.inject_gradient_fault(op, *f);
        }
        let xv = tape.constant(x.clone())?;
        let (net, store) = model.split();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let fwd = net.forward(&mut ctx, xv)?;
        let bindings = ctx.bindings();
        drop(ctx);
        let loss = deep_supervision_loss(&mut tape, &fwd.heads, &mask, &weights, true)?.total;
        let value = tape.value(loss)?.item()?;
        if !want {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let gs = ids
            .iter()
            .zip(xs)
            .map(|(&id, x)| match bindings.iter().find(|(b, _)| *b == id) {
                Some((_, v)) => grads.get(*v).cloned(),
                None => Ok(Tensor::zeros(x.shape())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, Some(gs)))
    };
    out.push(check("full_model", Scope::Network, inputs, &mut objective, opts)?);
    Ok(())
}

/// Run every suite selected by `scope`.
pub fn run(scope: Scope, opts: &Options) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if scope.includes(Scope::TensorCore) {
        primitive_suite(opts, &mut out)?;
    }
    if scope.includes(Scope::Attention) {
        attention_suite(opts, &mut out)?;
    }
    if scope.includes(Scope::Loss) {
        loss_suite(opts, &mut out)?;
    }
    if scope.includes(Scope::Network) {
        network_suite(opts, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parsing() {
        assert_eq!("attention".parse::<Scope>().unwrap(), Scope::Attention);
        assert!("bogus".parse::<Scope>().is_err());
        assert_eq!(Scope::TensorCore.to_string(), "tensor-core");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-3), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-3) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn loss_suite_passes_and_fault_is_caught() {
        let r = run(Scope::Loss, &Options::default()).unwrap();
        assert!(r.iter().all(|c| c.passed), "{r:?}");
        let bad = Options {
            fault: Some(("dice_loss".into(), 1.5)),
            ..Options::default()
        };
        let r = run(Scope::Loss, &bad).unwrap();
        assert!(!r[0].passed);
    }
}
