use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmabts::data::{encode_regions, generate_phantom, load_mask, load_volume, save_mask, save_volume};
use tmabts::infer::predict;
use tmabts::network::{stage_shapes, ModelConfig};
use tmabts::nn::{Builder, Conv};
use tmabts::{checkpoint, ConvSpec, Error, Model, ParamStore, ScalePair, Tensor, ValueEnhance};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}

/// conv + batch-norm affine + per-channel PReLU slope
fn conv_bn_act(cin: usize, cout: usize, k: usize) -> usize {
    conv(cin, cout, k) + 3 * cout
}

fn refine(c: usize) -> usize {
    conv_bn_act(c, c, 3) + conv(c, c, 1)
}

fn residual(ci: usize, co: usize) -> usize {
    let shortcut = if ci != co { conv(ci, co, 1) } else { 0 };
    conv_bn_act(ci, co, 3) + conv(co, co, 3) + 2 * co + shortcut + co
}

fn attention(c: usize, s: ScalePair, enhance: bool) -> usize {
    let query = c * c + c;
    let tmmm: usize = [s.r1, s.r2].iter().map(|r| c * r * r * r + c + 2 * c).sum();
    let enh = if enhance { (c / 2) * 27 + c / 2 } else { 0 };
    let kv = 2 * (c * c + c + enh);
    query + tmmm + kv + refine(c)
}

const ENC: [(usize, usize); 4] = [(8, 4), (4, 2), (2, 1), (1, 1)];
const DEC: [(usize, usize); 3] = [(2, 1), (4, 2), (8, 4)];

fn pair((a, b): (usize, usize)) -> ScalePair {
    ScalePair::new(a, b).unwrap()
}

/// Parameter total derived layer by layer from the architecture description.
fn closed_form(cfg: &ModelConfig) -> usize {
    let c = cfg.stage_channels;
    let enh = cfg.value_enhance == ValueEnhance::Depthwise3;
    let block = |on: bool, ch: usize, s: (usize, usize)| if on { attention(ch, pair(s), enh) } else { refine(ch) };
    let mut total = conv_bn_act(cfg.in_channels, c[0], 4);
    for k in 0..4 {
        if k > 0 {
            total += conv_bn_act(c[k - 1], c[k], 2);
        }
        total += 3 * block(cfg.tmsm_encoder, c[k], ENC[k]);
    }
    for k in 0..3 {
        let (ci, co) = (c[2 - k + 1], c[2 - k]);
        total += ci * co * 8 + co + 3 * co;
        if cfg.tmcm {
            total += attention(co, pair(DEC[k]), enh);
        }
        total += 3 * block(cfg.tmsm_decoder, co, DEC[k]);
    }
    total += c[0] * c[0] * 64 + c[0] + 3 * c[0];
    total += residual(cfg.in_channels, c[0]) + residual(c[0], c[0]) + conv_bn_act(c[0], c[0], 1);
    total += [c[2], c[1], c[0], c[0]].iter().map(|&ch| ch * cfg.num_targets + cfg.num_targets).sum::<usize>();
    total
}

#[test]
fn single_conv_count() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Conv::new(&mut Builder::new(&mut store, &mut rng), ConvSpec::new(4, 32, 4).with_stride(4)).unwrap();
    assert_eq!(store.param_count(), 8224);
}

#[test]
fn toy_and_default_counts_match_closed_form() {
    for cfg in [ModelConfig::toy(), ModelConfig::default()] {
        let m = Model::<f32>::new(&cfg).unwrap();
        assert_eq!(m.param_count(), closed_form(&cfg), "{cfg:?}");
    }
}

#[test]
fn ablation_counts_match_closed_form() {
    for mask in 0..8u8 {
        let cfg = ModelConfig {
            tmsm_encoder: mask & 1 != 0,
            tmsm_decoder: mask & 2 != 0,
            tmcm: mask & 4 != 0,
            ..ModelConfig::toy()
        };
        assert_eq!(Model::<f32>::new(&cfg).unwrap().param_count(), closed_form(&cfg), "mask {mask}");
    }
}

#[test]
fn disabling_tmcm_removes_exactly_its_parameters() {
    let on = ModelConfig::toy();
    let off = ModelConfig { tmcm: false, ..on.clone() };
    let c = on.stage_channels;
    let tmcm_total: usize = (0..3).map(|k| attention(c[2 - k], pair(DEC[k]), true)).sum();
    let diff = Model::<f32>::new(&on).unwrap().param_count() - Model::<f32>::new(&off).unwrap().param_count();
    assert_eq!(diff, tmcm_total);
}

#[test]
fn stage_shapes_follow_resolution_schedule() {
    let cfg = ModelConfig::toy();
    let shapes = stage_shapes(&cfg);
    let ext = |name: &str| shapes.iter().find(|s| s.stage == name).unwrap().extents;
    for (k, f) in [4, 8, 16, 32].iter().enumerate() {
        assert_eq!(ext(&format!("enc{}", k + 1)), [32 / f; 3]);
    }
    for (k, f) in [16, 8, 4, 1].iter().enumerate() {
        assert_eq!(ext(&format!("head{}", k + 1)), [32 / f; 3]);
    }
}

#[test]
fn invalid_configs_name_the_problem() {
    let bad = ModelConfig { extents: [32, 48, 32], ..ModelConfig::toy() };
    assert!(matches!(Model::<f32>::new(&bad), Err(Error::Config(_))));
    let heads = ModelConfig { heads: 3, ..ModelConfig::toy() };
    let err = Model::<f32>::new(&heads).unwrap_err().to_string();
    assert!(err.contains("head"), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let cfg = ModelConfig { seed: 11, ..ModelConfig::toy() };
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tmab");
    checkpoint::save(&model, &path).unwrap();
    let mut back: Model<f32> = checkpoint::load(&path).unwrap();
    let x = Tensor::<f32>::rand_normal(&[1, 4, 32, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let a = model.predict(&x, tmabts::Mode::Eval).unwrap();
    let b = back.predict(&x, tmabts::Mode::Eval).unwrap();
    assert_eq!(a.p1, b.p1);
    assert_eq!(a.p16, b.p16);
}

#[test]
fn checkpoint_rejects_mismatched_manifest() {
    let model = Model::<f32>::new(&ModelConfig::toy()).unwrap();
    let mut bytes = checkpoint::to_bytes(&model).unwrap();
    // corrupt the first character of the first entry name
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let name_at = 12 + cfg_len + 4 + 4;
    bytes[name_at] = b'X';
    let err = checkpoint::from_bytes::<f32>(&bytes).unwrap_err().to_string();
    assert!(err.contains("entry 0"), "{err}");
}

#[test]
fn volume_and_mask_files_round_trip() {
    let (v, m) = generate_phantom(5, [32, 32, 32], 2, (4.0, 8.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (vp, mp) = (dir.path().join("v.json"), dir.path().join("m.json"));
    save_volume(&v, &vp).unwrap();
    save_mask(&m, v.spacing, &mp).unwrap();
    let v2 = load_volume(&vp).unwrap();
    let (m2, spacing) = load_mask(&mp).unwrap();
    assert_eq!(v2.data, v.data);
    assert_eq!(v2.modality_names, v.modality_names);
    assert_eq!(spacing, v.spacing);
    assert_eq!(m2, m);
}

#[test]
fn corrupt_mask_file_is_rejected() {
    let (v, m) = generate_phantom(5, [32, 32, 32], 1, (4.0, 6.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mp = dir.path().join("m.json");
    save_mask(&m, v.spacing, &mp).unwrap();
    let raw = tmabts::data::payload_path(&mp);
    let mut bytes = std::fs::read(&raw).unwrap();
    bytes[100] = 3;
    std::fs::write(&raw, &bytes).unwrap();
    assert!(load_mask(&mp).is_err());
    std::fs::write(&raw, &bytes[..10]).unwrap();
    assert!(load_mask(&mp).is_err());
}

#[test]
fn negative_head_bias_yields_empty_flagged_prediction() {
    let cfg = ModelConfig::toy();
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().entries()[id.index()].name.clone();
        if name.starts_with("head4.") {
            let t = model.params_mut().get_mut(id);
            let fill = if name.ends_with("bias") { -10.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
    let (mut v, mask) = generate_phantom(2, [32, 32, 32], 2, (4.0, 8.0)).unwrap();
    v.normalize();
    let pred = predict(&mut model, &v, 0.5, false).unwrap();
    assert!(pred.regions.data().iter().all(|&x| x == 0));
    let records = tmabts::metrics::evaluate_regions("p", &pred.regions, &encode_regions(&mask), 0, [1.0; 3]).unwrap();
    assert!(records.iter().all(|r| r.flags.contains(&tmabts::metrics::MetricFlag::EmptyPrediction)));
}

#[test]
fn threshold_one_is_always_empty() {
    let mut model = Model::<f32>::new(&ModelConfig::toy()).unwrap();
    let (mut v, _) = generate_phantom(4, [32, 32, 32], 1, (4.0, 8.0)).unwrap();
    v.normalize();
    let pred = predict(&mut model, &v, 1.0, false).unwrap();
    assert!(pred.labels.labels().iter().all(|&l| l == 0));
}

#[test]
fn phantom_lesion_voxel_count_matches_ellipsoid_oracle() {
    use tmabts::data::{render_phantom, Lesion};
    let lesion = Lesion { center: [16.0, 16.0, 16.0], radii: [3.0; 3] };
    let (_, m) = render_phantom(0, [32, 32, 32], &[lesion]).unwrap();
    // lattice points within radius 3 of an integer center: 123
    let inside = |r2: i64| {
        let mut n = 0;
        for x in -3i64..=3 {
            for y in -3i64..=3 {
                for z in -3i64..=3 {
                    n += (x * x + y * y + z * z <= r2) as usize;
                }
            }
        }
        n
    };
    assert_eq!(inside(9), 123);
    let count = |l: &[u8]| m.labels().iter().filter(|v| l.contains(v)).count();
    assert_eq!(count(&[1, 2, 4]), 123);
    // enhancing within 0.9 voxels: only the center; core within 1.8: |p|^2 <= 3
    assert_eq!(count(&[4]), inside(0));
    assert_eq!(count(&[1, 4]), inside(3));
    let regions = encode_regions(&m);
    assert!(regions.is_nested());
}
