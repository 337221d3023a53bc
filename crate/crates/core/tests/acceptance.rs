//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use tmabts::attention::{qk_flops, HeadSplit};
use tmabts::data::{flip, generate_phantom, load_mask, load_volume, make_batch, save_mask, save_volume};
use tmabts::gradcheck::{self, Scope};
use tmabts::infer::threshold_regions;
use tmabts::loss::{deep_supervision_loss, dice_loss};
use tmabts::metrics::{dsc, hd95};
use tmabts::network::{flops_estimate, ModelConfig};
use tmabts::ops::{conv3d, conv_transpose3d, linear, ConvSpec};
use tmabts::train::{train, EpochLog, TrainConfig};
use tmabts::{checkpoint, Ctx, MaskVolume, Mode, Model, RegionMask, ScalePair, StageOutputs, SupervisionWeights, Tape, Tensor, Volume};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run(Scope::All, &gradcheck::Options::default()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    for unit in ["conv3d", "depthwise_conv3d", "transposed_conv3d", "linear", "softmax", "tmsm", "tmcm", "full_model", "dice_loss"] {
        ensure(results.iter().any(|r| r.unit == unit), format!("unit {unit} missing"))?;
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if let Some(r) = results.iter().find(|r| !r.passed || r.coordinates < 50) {
        return Err(format!("{} failed: rel {:.2e} over {} coordinates", r.unit, r.max_rel_err, r.coordinates));
    }
    let corrupt = gradcheck::Options {
        fault: Some(("conv3d".into(), 1.1)),
        ..Default::default()
    };
    let flagged = gradcheck::run(Scope::TensorCore, &corrupt).map_err(err)?;
    ensure(
        flagged.iter().any(|r| r.unit == "conv3d" && !r.passed),
        "corrupted conv3d gradient was not detected",
    )?;
    ensure(secs < 300.0, format!("took {secs:.0} s"))?;
    Ok(format!("{} units, worst rel {worst:.2e}, {secs:.1} s, corrupted conv3d detected", results.len()))
}

fn forward_shapes(cfg: &ModelConfig) -> Result<(), String> {
    let mut model = Model::<f32>::new(cfg).map_err(err)?;
    let e = cfg.extents;
    let c = cfg.stage_channels;
    let x = Tensor::<f32>::rand_normal(&[1, cfg.in_channels, e[0], e[1], e[2]], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let xv = tape.constant(x).map_err(err)?;
    let (net, store) = model.split();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval).frozen();
    let out = net.forward(&mut ctx, xv).map_err(err)?;
    drop(ctx);
    let at = |f: usize, ch: usize| vec![1, ch, e[0] / f, e[1] / f, e[2] / f];
    let shape = |v| tape.value(v).map(|t| t.shape().to_vec()).map_err(err);
    for (k, f) in [4, 8, 16, 32].into_iter().enumerate() {
        ensure(shape(out.encoder[k])? == at(f, c[k]), format!("encoder {k}"))?;
    }
    for (k, (f, ch)) in [(16, c[2]), (8, c[1]), (4, c[0]), (1, c[0])].into_iter().enumerate() {
        ensure(shape(out.decoder[k])? == at(f, ch), format!("decoder {k}"))?;
    }
    for (k, (v, f)) in out.heads.as_array().into_iter().zip([16, 8, 4, 1]).enumerate() {
        ensure(shape(v)? == at(f, cfg.num_targets), format!("head {k}: {:?}", shape(v)?))?;
    }
    Ok(())
}

fn shape_contracts() -> Outcome {
    let mut checked = 0;
    for ext in [32, 64] {
        for mask in 0..16u8 {
            let cfg = ModelConfig {
                extents: [ext; 3],
                tmsm_encoder: mask & 1 != 0,
                tmsm_decoder: mask & 2 != 0,
                tmcm: mask & 4 != 0,
                deep_supervision: mask & 8 != 0,
                ..ModelConfig::toy()
            };
            forward_shapes(&cfg).map_err(|e| format!("{ext}^3 switches {mask:04b}: {e}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} configurations (16 ablations x 2 extents)"))
}

/// Full-model forward in 64-bit with the attention log enabled.
fn attention_records() -> Result<(Tape<f64>, Vec<tmabts::attention::AttentionRecord>, Vec<tmabts::network::TokenSchedule>), String> {
    let cfg = ModelConfig::toy();
    let mut model = Model::<f64>::new(&cfg).map_err(err)?;
    let schedule = model.network().token_schedule();
    let x = Tensor::<f64>::rand_normal(&[2, 4, 32, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let mut tape = Tape::new();
    let xv = tape.constant(x).map_err(err)?;
    let (net, store) = model.split();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval).frozen().with_attention_log();
    net.forward(&mut ctx, xv).map_err(err)?;
    let log = ctx.take_attention_log();
    Ok((tape, log, schedule))
}

fn token_law(log: &[tmabts::attention::AttentionRecord], schedule: &[tmabts::network::TokenSchedule], tape: &Tape<f64>) -> Outcome {
    ensure(schedule.len() == 24, format!("{} attention layers, expected 24", schedule.len()))?;
    for s in schedule {
        for (b, r) in s.scales.as_array().into_iter().enumerate() {
            ensure(s.keys[b] * r * r * r == s.queries, format!("{} branch {b}: {} keys for l={} r={r}", s.layer, s.keys[b], s.queries))?;
        }
    }
    ensure(log.len() == 2 * schedule.len(), format!("{} logged branches", log.len()))?;
    let mut full = 0;
    for rec in log {
        let r3 = rec.r * rec.r * rec.r;
        ensure(rec.keys * r3 == rec.queries, format!("{} r={}: {} keys", rec.layer, rec.r, rec.keys))?;
        let shape = tape.value(rec.weights).map_err(err)?.shape().to_vec();
        ensure(shape[2] == rec.queries && shape[3] == rec.keys, format!("{}: weights {shape:?}", rec.layer))?;
        if rec.r == 1 && rec.layer.starts_with("enc4") {
            full += 1;
        }
    }
    ensure(full == 6, format!("{full} full-resolution branches in stage 4"))?;
    Ok(format!("{} layers, {} branches checked at construction and in forward", schedule.len(), log.len()))
}

fn attention_rows(log: &[tmabts::attention::AttentionRecord], tape: &Tape<f64>) -> Outcome {
    let (mut rows, mut worst) = (0usize, 0.0f64);
    for rec in log {
        let w = tape.value(rec.weights).map_err(err)?;
        for row in w.data().chunks(rec.keys) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            ensure(row.iter().all(|&v| v >= 0.0), format!("{}: negative weight", rec.layer))?;
            rows += 1;
        }
    }
    ensure(worst <= 1e-6, format!("max |row sum - 1| = {worst:.2e}"))?;
    Ok(format!("{rows} rows over every stage, max |sum - 1| = {worst:.1e}"))
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let mut track = |d: f64, what: &str| -> Result<(), String> {
        worst = worst.max(d);
        ensure(d <= 1e-5, format!("{what}: rel {d:.2e}"))
    };
    for _ in 0..20 {
        let (spec, ext) = random_spec(&mut rng, false);
        let x = Tensor::<f64>::rand_uniform(&[2, spec.in_channels, ext[0], ext[1], ext[2]], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let got = conv3d(&x.cast::<f32>(), &spec, &w.cast(), None).map_err(err)?;
        track(rel_diff(&to_f64(&got), &naive_conv(&x, &spec, &w, None)), "conv3d")?;

        let (spec, ext) = random_spec(&mut rng, true);
        let x = Tensor::<f64>::rand_uniform(&[1, spec.in_channels, ext[0], ext[1], ext[2]], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let got = conv3d(&x.cast::<f32>(), &spec, &w.cast(), None).map_err(err)?;
        track(rel_diff(&to_f64(&got), &naive_conv(&x, &spec, &w, None)), "depthwise")?;

        let k = rng.random_range(1..=3);
        let spec = ConvSpec::new(rng.random_range(1..=3), rng.random_range(1..=3), k)
            .with_stride(rng.random_range(1..=2))
            .with_padding(rng.random_range(0..=(k - 1) / 2));
        let x = Tensor::<f64>::rand_uniform(&[1, spec.in_channels, 3, 2, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&spec.transposed_weight_shape(), -1.0, 1.0, &mut rng);
        let got = conv_transpose3d(&x.cast::<f32>(), &spec, &w.cast(), None).map_err(err)?;
        track(rel_diff(&to_f64(&got), &naive_conv_transpose(&x, &spec, &w, None)), "transposed")?;

        let (rows, cin, cout) = (rng.random_range(1..=8), rng.random_range(1..=10), rng.random_range(1..=6));
        let x = Tensor::<f64>::rand_uniform(&[rows, cin], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[cin, cout], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[cout], -1.0, 1.0, &mut rng);
        let got = linear(&x.cast::<f32>(), &w.cast(), Some(&b.cast())).map_err(err)?;
        track(rel_diff(&to_f64(&got), &naive_linear(&x, &w, Some(&b))), "linear")?;
    }
    let (mut pairs, mut hd_worst) = (0, 0.0f64);
    while pairs < 50 {
        let ext = [0; 3].map(|_| rng.random_range(2..=8));
        let spacing = [0; 3].map(|_| rng.random_range(0.5..2.0));
        let (a, b) = (random_mask(&mut rng, ext), random_mask(&mut rng, ext));
        let Some(want) = brute_hd95(&a, &b, ext, spacing) else { continue };
        let got = hd95(&a, &b, ext, spacing).map_err(err)?.mm;
        hd_worst = hd_worst.max((got - want).abs());
        ensure(dsc(&a, &b).map_err(err)? == set_dsc(&a, &b), "dsc differs from set arithmetic")?;
        pairs += 1;
    }
    ensure(hd_worst <= 1e-6, format!("hd95 abs err {hd_worst:.2e}"))?;
    Ok(format!(
        "20 instances each of conv/depthwise/transposed/linear (worst rel {worst:.1e}); {pairs} hd95 pairs (worst {hd_worst:.1e}); dsc exact"
    ))
}

/// Corner-sampling downsample written independently of the library.
fn corner_downsample(t: &[f64], n: usize, e: usize, f: usize) -> Vec<f64> {
    let o = e / f;
    let mut out = Vec::with_capacity(n * 3 * o * o * o);
    for plane in t.chunks(e * e * e) {
        for x in 0..o {
            for y in 0..o {
                for z in 0..o {
                    out.push(plane[((x * f) * e + y * f) * e + z * f]);
                }
            }
        }
    }
    out
}

fn dice_reference(p: &[f64], t: &[f64], n: usize) -> f64 {
    let vox = p.len() / (n * 3);
    let mut total = 0.0;
    for c in 0..3 {
        let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
        for s in 0..n {
            let base = (s * 3 + c) * vox;
            for i in base..base + vox {
                pt += p[i] * t[i];
                pp += p[i] * p[i];
                tt += t[i] * t[i];
            }
        }
        total += (2.0 * pt + 1e-5) / (pp + tt + 1e-5);
    }
    1.0 - total / 3.0
}

fn supervised(heads: &[Tensor<f64>; 4], target: &RegionMask, weights: [f64; 4]) -> Result<(f64, [f64; 4]), String> {
    let mut tape = Tape::new();
    let vars: Vec<_> = heads.iter().map(|h| tape.constant(h.clone())).collect::<Result<_, _>>().map_err(err)?;
    let out = StageOutputs::from_array([vars[0], vars[1], vars[2], vars[3]]);
    let l = deep_supervision_loss(&mut tape, &out, target, &SupervisionWeights(weights), true).map_err(err)?;
    let stages = l.stages.map(|v| tape.value(v).unwrap().item().unwrap());
    Ok((tape.value(l.total).map_err(err)?.item().map_err(err)?, stages))
}

fn loss_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, e) = (2, 32);
    let alpha = [0.125, 0.25, 0.5, 1.0];
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let cases: Vec<_> = (0..n)
            .map(|i| generate_phantom(rng.random(), [e; 3], 1 + i, (4.0, 8.0)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let (_, target) = make_batch::<f64>(&cases).map_err(err)?;
        let full = target.to_tensor::<f64>();
        let heads: [Tensor<f64>; 4] = [16, 8, 4, 1].map(|f| Tensor::rand_uniform(&[n, 3, e / f, e / f, e / f], 0.0, 1.0, &mut rng));
        let (total, _) = supervised(&heads, &target, alpha)?;
        let reference: f64 = [16, 8, 4, 1]
            .iter()
            .zip(&heads)
            .zip(alpha)
            .map(|((&f, h), a)| a * dice_reference(h.data(), &corner_downsample(full.data(), n, e, f), n))
            .sum();
        worst = worst.max((total - reference).abs());
    }
    ensure(worst <= 1e-6, format!("sum mismatch {worst:.2e}"))?;

    // constant 0.5 predictions against all-ones targets give equal stage losses
    let ones = RegionMask::new([4, 3, 64, 64, 64], vec![1; 4 * 3 * 64 * 64 * 64]).map_err(err)?;
    let heads = [16, 8, 4, 1].map(|f| Tensor::full(&[4, 3, 64 / f, 64 / f, 64 / f], 0.5));
    let (total, stages) = supervised(&heads, &ones, alpha)?;
    let l = stages[3];
    let spread = stages.iter().map(|s| (s - l).abs()).fold(0.0, f64::max);
    let dev = (total - 1.875 * l).abs();
    ensure(dev <= 1e-6, format!("equal-loss total {total} vs 1.875 L = {}", 1.875 * l))?;
    Ok(format!("max |total - sum a_k L_k| = {worst:.1e}; equal losses (spread {spread:.0e}): |total - 1.875 L| = {dev:.1e}"))
}

struct Trained {
    model: Model<f32>,
    last: EpochLog,
    secs: f64,
}

fn run_training(cfg: &TrainConfig, cases: &[(Volume, MaskVolume)]) -> Result<Trained, String> {
    let start = Instant::now();
    let mut last = None;
    let model = train(cfg, cases, |log, _| {
        last = Some(log.clone());
        Ok(())
    })
    .map_err(err)?;
    Ok(Trained {
        model,
        last: last.ok_or("no epochs ran")?,
        secs: start.elapsed().as_secs_f64(),
    })
}

struct Evaluation {
    dice_loss: f64,
    dsc_wt: Vec<f64>,
    dsc_mean: f64,
}

fn evaluate(model: &mut Model<f32>, cases: &[(Volume, MaskVolume)]) -> Result<Evaluation, String> {
    let (x, target) = make_batch::<f32>(cases).map_err(err)?;
    let out = model.predict(&x, Mode::Eval).map_err(err)?;
    let regions = threshold_regions(&out.p1, 0.5).map_err(err)?;
    let mut dsc_wt = Vec::new();
    let mut all = Vec::new();
    for s in 0..cases.len() {
        for r in 0..3 {
            let d = dsc(regions.channel(s, r), target.channel(s, r)).map_err(err)?;
            all.push(d);
            if r == 2 {
                dsc_wt.push(d);
            }
        }
    }
    Ok(Evaluation {
        dice_loss: dice_loss(&out.p1, &target).map_err(err)? as f64,
        dsc_wt,
        dsc_mean: all.iter().sum::<f64>() / all.len() as f64,
    })
}

fn overfit(full: &mut Option<(Trained, Evaluation)>, cases: &[(Volume, MaskVolume)]) -> Outcome {
    let cfg = TrainConfig::overfit();
    let mut t = run_training(&cfg, cases)?;
    let ev = evaluate(&mut t.model, cases)?;
    let min_wt = ev.dsc_wt.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_wt = ev.dsc_wt.iter().sum::<f64>() / ev.dsc_wt.len() as f64;
    let line = format!(
        "{} steps in {:.0} s: last-epoch full-res Dice loss {:.4} (train mode), eval Dice loss {:.4}, DSC(WT) mean {mean_wt:.2} min {min_wt:.2}",
        cfg.epochs * cfg.data.count.div_ceil(cfg.batch_size),
        t.secs,
        t.last.loss_per_stage[3],
        ev.dice_loss
    );
    let ok = ev.dice_loss < 0.05 && mean_wt > 90.0 && t.secs < 900.0;
    *full = Some((t, ev));
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn ablation(full: &Option<(Trained, Evaluation)>, cases: &[(Volume, MaskVolume)]) -> Outcome {
    let (_, full_eval) = full.as_ref().ok_or("overfit run unavailable")?;
    let mut cfg = TrainConfig::overfit();
    cfg.model = cfg.model.without_modules();
    let mut t = run_training(&cfg, cases)?;
    let off = evaluate(&mut t.model, cases)?;
    let line = format!("mean DSC full {:.2} vs all-off {:.2} after {} epochs each", full_eval.dsc_mean, off.dsc_mean, cfg.epochs);
    if full_eval.dsc_mean >= off.dsc_mean {
        Ok(line)
    } else {
        Err(line)
    }
}

fn flop_law() -> Outcome {
    let split = HeadSplit::new(64, 4).map_err(err)?;
    for l in [512, 4096, 32768] {
        let base = qk_flops(split, l, 1);
        for r in [2, 4, 8] {
            ensure(qk_flops(split, l, r) * (r * r * r) as u64 == base, format!("l={l} r={r}"))?;
        }
    }
    let pairs = [ScalePair::new(8, 4), ScalePair::new(2, 1), ScalePair::new(4, 2)]
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let rows = tmabts::bench::run([8, 8, 8], 16, 4, &pairs, 5).map_err(err)?;
    ensure(rows.windows(2).all(|w| w[0].r1 > w[1].r1 && w[0].qk_flops < w[1].qk_flops), "bench rows not monotone")?;
    ensure(rows.iter().all(|r| r.reps >= 5), "fewer than 5 repetitions")?;
    let cfg = ModelConfig::default();
    let params = Model::<f32>::new(&cfg).map_err(err)?.param_count() as f64 / 1e6;
    let gflops = flops_estimate(&cfg, [128; 3]).map_err(err)? as f64 / 1e9;
    Ok(format!(
        "qk(r=4) = qk(r=1)/64 exactly; bench monotone over r1 = {:?}; default model {params:.2} M params ({:+.1}% vs 30.85), {gflops:.1} GFLOPs ({:+.1}% vs 141.79, reported only)",
        rows.iter().map(|r| r.r1).collect::<Vec<_>>(),
        100.0 * (params - 30.85) / 30.85,
        100.0 * (gflops - 141.79) / 141.79
    ))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let model = Model::<f32>::new(&ModelConfig { seed: 9, ..ModelConfig::toy() }).map_err(err)?;
    let path = dir.path().join("m.tmab");
    checkpoint::save(&model, &path).map_err(err)?;
    let back: Model<f32> = checkpoint::load(&path).map_err(err)?;
    for (a, b) in model.params().entries().iter().zip(back.params().entries()) {
        ensure(a.name == b.name && a.value.data() == b.value.data(), format!("checkpoint entry {} differs", a.name))?;
    }
    let (v, m) = generate_phantom(12, [32; 3], 2, (4.0, 8.0)).map_err(err)?;
    let (vp, mp) = (dir.path().join("v.json"), dir.path().join("m.json"));
    save_volume(&v, &vp).map_err(err)?;
    save_mask(&m, v.spacing, &mp).map_err(err)?;
    ensure(load_volume(&vp).map_err(err)? == v, "volume round trip differs")?;
    ensure(load_mask(&mp).map_err(err)?.0 == m, "mask round trip differs")?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..100 {
        let ext = [0; 3].map(|_| rng.random_range(1..=7));
        let data: Vec<f32> = (0..2 * ext.iter().product::<usize>()).map(|_| rng.random()).collect();
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        ensure(flip(&flip(&data, ext, flips), ext, flips) == data, format!("double flip case {case}"))?;
    }
    Ok("checkpoint bitwise, volume and mask files, 100 double-flip cases".into())
}

fn main() -> ExitCode {
    let start = Instant::now();
    let cases = TrainConfig::overfit().data.generate([32; 3]).expect("phantoms");
    let (tape, log, schedule) = match attention_records() {
        Ok(r) => r,
        Err(e) => {
            println!("acceptance: attention forward failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut full = None;
    let outcomes: Vec<(&str, Outcome)> = vec![
        ("1 gradient suite", gradient_suite()),
        ("2 shape contracts", shape_contracts()),
        ("3 token-count law", token_law(&log, &schedule, &tape)),
        ("4 attention normalization", attention_rows(&log, &tape)),
        ("5 oracle equivalence", oracles()),
        ("6 loss composition", loss_composition()),
        ("7 overfit target", overfit(&mut full, &cases)),
        ("8 ablation ordering", ablation(&full, &cases)),
        ("9 flop accounting", flop_law()),
        ("10 round trips", round_trips()),
    ];
    let mut failed = 0;
    for (name, outcome) in &outcomes {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        outcomes.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
