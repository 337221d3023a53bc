use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use tmabts::attention::ScalePair;
use tmabts::data::{encode_regions, load_mask, load_volume, save_mask, save_volume, MaskVolume, Volume};
use tmabts::gradcheck::{self, Scope};
use tmabts::metrics::evaluate_regions;
use tmabts::network::{flops_estimate, stage_shapes, ModelConfig};
use tmabts::train::{train, TrainConfig};
use tmabts::{checkpoint, infer, Model};

/// Reference size of the default model at 128³.
const REFERENCE_PARAMS_M: f64 = 30.85;
const REFERENCE_FLOPS_G: f64 = 141.79;

#[derive(Parser)]
#[command(name = "tmabts", version, about = "Multi-scale token-aggregation transformer for 3D tumour segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic phantoms or an exported dataset directory.
    Train(TrainArgs),
    /// Predict a label mask for one volume.
    Infer(InferArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Stage shapes, parameter count and FLOPs of a configuration.
    ModelCard(ModelCardArgs),
    /// Time one self-attention layer across scale pairs (CSV).
    Bench(BenchArgs),
    /// Export synthetic phantoms as volume/mask file pairs.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ModelOverrides {
    /// JSON run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the overfit profile instead of the defaults.
    #[arg(long)]
    overfit: bool,
    /// Use the toy model (32³, channels 8,16,32,64).
    #[arg(long)]
    toy: bool,
    /// Spatial extents, e.g. 32,32,32.
    #[arg(long, value_parser = parse_extents)]
    extents: Option<[usize; 3]>,
    #[arg(long)]
    no_tmsm_encoder: bool,
    #[arg(long)]
    no_tmsm_decoder: bool,
    #[arg(long)]
    no_tmcm: bool,
    #[arg(long)]
    no_deep_supervision: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelOverrides,
    /// Output directory for checkpoints and the log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Directory written by `gen-data`; phantoms are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume header (JSON).
    #[arg(long)]
    volume: PathBuf,
    /// Output mask header (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Reflect-pad extents not divisible by 32 and crop back.
    #[arg(long)]
    pad: bool,
    /// Ground-truth mask for a metric report.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Scale the backward pass of an operation, `op` or `op=factor`.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ModelCardArgs {
    #[command(flatten)]
    model: ModelOverrides,
}

#[derive(Args)]
struct BenchArgs {
    /// Token grid of the layer.
    #[arg(long, value_parser = parse_extents, default_value = "16,16,16")]
    extents: [usize; 3],
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Scale pairs separated by `;`, e.g. "8,4;4,2;2,1".
    #[arg(long, default_value = "8,4;4,2;2,1;1,1")]
    scales: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, value_parser = parse_extents, default_value = "32,32,32")]
    extents: [usize; 3],
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    lesions: usize,
}

fn parse_extents(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!("expected one or three extents, got {s:?}")),
    }
}

fn parse_scales(s: &str) -> Result<Vec<ScalePair>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(',').with_context(|| format!("scale pair {p:?} is not r1,r2"))?;
            Ok(ScalePair::new(a.trim().parse()?, b.trim().parse()?)?)
        })
        .collect()
}

fn emit(value: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

impl ModelOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None if self.overfit => TrainConfig::overfit(),
            None => TrainConfig::default(),
        };
        if self.toy {
            cfg.model = ModelConfig {
                seed: cfg.model.seed,
                ..ModelConfig::toy()
            };
        }
        let m = &mut cfg.model;
        if let Some(e) = self.extents {
            m.extents = e;
        }
        m.tmsm_encoder &= !self.no_tmsm_encoder;
        m.tmsm_decoder &= !self.no_tmsm_decoder;
        m.tmcm &= !self.no_tmcm;
        m.deep_supervision &= !self.no_deep_supervision;
        Ok(cfg)
    }
}

fn read_cases(dir: &Path) -> Result<Vec<(Volume, MaskVolume)>> {
    let mut headers: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    headers.retain(|p| p.to_string_lossy().ends_with("_vol.json"));
    headers.sort();
    if headers.is_empty() {
        bail!("no *_vol.json files in {}", dir.display());
    }
    headers
        .iter()
        .map(|vol| {
            let mask = PathBuf::from(vol.to_string_lossy().replace("_vol.json", "_mask.json"));
            let mut v = load_volume(vol)?;
            v.normalize();
            let (m, _) = load_mask(&mask)?;
            Ok((v, m))
        })
        .collect()
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.model.resolve()?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let cases = match &args.data {
        Some(dir) => read_cases(dir)?,
        None => cfg.data.generate(cfg.model.extents)?,
    };
    fs::create_dir_all(&args.out)?;
    emit(&json!({ "event": "config", "config": cfg, "cases": cases.len() }))?;
    let last = args.out.join("last.tmab");
    let best = args.out.join("best.tmab");
    let mut best_loss = f64::INFINITY;
    let result = train(&cfg, &cases, |log, model| {
        emit(log).map_err(|e| tmabts::Error::Io(io::Error::other(e.to_string())))?;
        checkpoint::save(model, &last)?;
        if log.loss_total < best_loss {
            best_loss = log.loss_total;
            checkpoint::save(model, &best)?;
        }
        Ok(())
    });
    match result {
        Ok(model) => {
            let final_path = args.out.join("final.tmab");
            checkpoint::save(&model, &final_path)?;
            emit(&json!({ "event": "done", "final": final_path, "best": best, "best_loss": best_loss }))?;
            Ok(())
        }
        Err(e) => {
            emit(&json!({ "event": "abort", "error": e.to_string(), "last_good": last.exists().then_some(&last) }))?;
            Err(e.into())
        }
    }
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let mut model: Model<f32> = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut volume = load_volume(&args.volume).with_context(|| format!("loading {}", args.volume.display()))?;
    volume.normalize();
    let pred = infer::predict(&mut model, &volume, args.threshold, args.pad)?;
    save_mask(&pred.labels, volume.spacing, &args.out)?;
    let empty = pred.regions.data().iter().all(|&v| v == 0);
    let mut flags = pred.flags.clone();
    if empty {
        flags.push(tmabts::metrics::MetricFlag::EmptyPrediction);
    }
    let metrics = match &args.truth {
        Some(path) => {
            let (truth, _) = load_mask(path)?;
            if truth.extents() != volume.extents() {
                bail!("truth extents {:?} differ from volume {:?}", truth.extents(), volume.extents());
            }
            Some(evaluate_regions(
                &args.volume.display().to_string(),
                &pred.regions,
                &encode_regions(&truth),
                0,
                volume.spacing,
            )?)
        }
        None => None,
    };
    emit(&json!({
        "event": "infer",
        "config": model.config(),
        "threshold": args.threshold,
        "out": args.out,
        "voxels": {
            "et": pred.regions.channel(0, 0).iter().filter(|&&v| v == 1).count(),
            "tc": pred.regions.channel(0, 1).iter().filter(|&&v| v == 1).count(),
            "wt": pred.regions.channel(0, 2).iter().filter(|&&v| v == 1).count(),
        },
        "flags": flags,
        "metrics": metrics,
    }))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let scope: Scope = args.scope.parse()?;
    let fault = match &args.corrupt {
        None => None,
        Some(spec) => Some(match spec.split_once('=') {
            Some((op, f)) => (op.to_string(), f.parse::<f64>().context("corrupt factor")?),
            None => (spec.clone(), 1.5),
        }),
    };
    let opts = gradcheck::Options {
        samples: args.samples,
        seed: args.seed,
        tolerance: args.tolerance,
        fault: fault.clone(),
        ..gradcheck::Options::default()
    };
    emit(&json!({ "event": "config", "scope": scope, "options": {
        "step": opts.step, "tolerance": opts.tolerance, "floor": opts.floor,
        "samples": opts.samples, "seed": opts.seed, "corrupt": fault,
    }}))?;
    let results = gradcheck::run(scope, &opts)?;
    for r in &results {
        emit(r)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.unit.as_str()).collect();
    emit(&json!({ "event": "summary", "units": results.len(), "failed": failed }))?;
    Ok(failed.is_empty())
}

#[derive(Serialize)]
struct Reference {
    params_m: f64,
    flops_g: f64,
    params_deviation_pct: f64,
    flops_deviation_pct: f64,
}

fn cmd_model_card(args: &ModelCardArgs) -> Result<()> {
    let cfg = args.model.resolve()?.model;
    cfg.validate()?;
    let model = Model::<f32>::new(&cfg)?;
    let params = model.param_count();
    let flops = flops_estimate(&cfg, cfg.extents)?;
    emit(&json!({ "event": "config", "config": cfg }))?;
    for s in stage_shapes(&cfg) {
        emit(&json!({ "event": "stage", "stage": s.stage, "channels": s.channels, "extents": s.extents }))?;
    }
    let params_m = params as f64 / 1e6;
    let flops_g = flops as f64 / 1e9;
    let is_reference = cfg == ModelConfig { seed: cfg.seed, ..ModelConfig::default() } && cfg.extents == [128; 3];
    let reference = is_reference.then(|| Reference {
        params_m: REFERENCE_PARAMS_M,
        flops_g: REFERENCE_FLOPS_G,
        params_deviation_pct: 100.0 * (params_m - REFERENCE_PARAMS_M) / REFERENCE_PARAMS_M,
        flops_deviation_pct: 100.0 * (flops_g - REFERENCE_FLOPS_G) / REFERENCE_FLOPS_G,
    });
    emit(&json!({
        "event": "summary",
        "params": params,
        "params_m": params_m,
        "flops": flops,
        "flops_g": flops_g,
        "macs_g": flops_g / 2.0,
        "reference": reference,
    }))
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let scales = parse_scales(&args.scales)?;
    let rows = tmabts::bench::run(args.extents, args.channels, args.heads, &scales, args.reps)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", tmabts::bench::BenchRow::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    for i in 0..args.count {
        let seed = args.seed + i as u64;
        let (v, m) = tmabts::data::generate_phantom(seed, args.extents, args.lesions, (4.0, 8.0))?;
        let vol = args.out.join(format!("case_{i:04}_vol.json"));
        let mask = args.out.join(format!("case_{i:04}_mask.json"));
        save_volume(&v, &vol)?;
        save_mask(&m, v.spacing, &mask)?;
        emit(&json!({ "event": "case", "index": i, "seed": seed, "volume": vol, "mask": mask }))?;
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TMA_THREADS") {
        let n: usize = v.parse().with_context(|| format!("TMA_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Infer(a) => cmd_infer(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::ModelCard(a) => cmd_model_card(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::GenData(a) => cmd_gen_data(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = emit(&json!({ "event": "error", "error": format!("{e:#}") }));
            ExitCode::from(2)
        }
    }
}
