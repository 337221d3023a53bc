use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmabts::attention::AttentionOptions;
use tmabts::data::{apply_augment, crop, encode_regions, flip, AugmentParams, AugmentPolicy};
use tmabts::loss::{deep_supervision_loss, dice_loss};
use tmabts::metrics::dsc;
use tmabts::nn::Builder;
use tmabts::ops::softmax;
use tmabts::{Ctx, MaskVolume, Mode, ParamStore, RegionMask, ScalePair, StageOutputs, SupervisionWeights, Tape, Tensor, Tmsm, ValueEnhance, Volume};

fn nested_from_levels(levels: &[u8], ext: [usize; 3]) -> RegionMask {
    let vox = levels.len();
    let mut data = vec![0u8; 3 * vox];
    for (i, &l) in levels.iter().enumerate() {
        data[i] = (l >= 3) as u8;
        data[vox + i] = (l >= 2) as u8;
        data[2 * vox + i] = (l >= 1) as u8;
    }
    RegionMask::new([1, 3, ext[0], ext[1], ext[2]], data).unwrap()
}

fn label_volume(ext: [usize; 3]) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4]), ext.iter().product::<usize>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(
        xs in prop::collection::vec(-20.0f64..20.0, 12),
        c in -50.0f64..50.0,
    ) {
        let x = Tensor::new(&[3, 4], xs).unwrap();
        let shifted = x.map(|v| v + c);
        for axis in 0..2 {
            let d = softmax(&x, axis).unwrap().max_abs_diff(&softmax(&shifted, axis).unwrap()).unwrap();
            prop_assert!(d <= 1e-12, "axis {} diff {}", axis, d);
        }
    }

    #[test]
    fn downsampling_preserves_nesting(levels in prop::collection::vec(0u8..4, 512), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let m = nested_from_levels(&levels, [8, 8, 8]);
        prop_assert!(m.is_nested());
        prop_assert!(m.downsample(f).unwrap().is_nested());
    }

    #[test]
    fn dice_loss_is_symmetric_on_binary_masks(a in prop::collection::vec(0u8..2, 3 * 27), b in prop::collection::vec(0u8..2, 3 * 27)) {
        let ma = RegionMask::new([1, 3, 3, 3, 3], a).unwrap();
        let mb = RegionMask::new([1, 3, 3, 3, 3], b).unwrap();
        let ab = dice_loss(&ma.to_tensor::<f64>(), &mb).unwrap();
        let ba = dice_loss(&mb.to_tensor::<f64>(), &ma).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-15);
    }

    #[test]
    fn supervision_loss_is_linear_in_weights(
        wa in prop::array::uniform4(0.0f64..2.0),
        wb in prop::array::uniform4(0.0f64..2.0),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = nested_from_levels(&(0..4096).map(|i| ((i * 7 + seed as usize) % 4) as u8).collect::<Vec<_>>(), [16, 16, 16]);
        let heads: Vec<Tensor<f64>> = [1usize, 2, 4, 16]
            .iter()
            .map(|&e| Tensor::rand_uniform(&[1, 3, e, e, e], 0.0, 1.0, &mut rng))
            .collect();
        let total = |w: [f64; 4]| {
            let mut tape = Tape::new();
            let vars: Vec<_> = heads.iter().map(|h| tape.constant(h.clone()).unwrap()).collect();
            let out = StageOutputs::from_array([vars[0], vars[1], vars[2], vars[3]]);
            let l = deep_supervision_loss(&mut tape, &out, &target, &SupervisionWeights(w), true).unwrap();
            tape.value(l.total).unwrap().item().unwrap()
        };
        let sum: [f64; 4] = std::array::from_fn(|k| wa[k] + wb[k]);
        prop_assert!((total(sum) - total(wa) - total(wb)).abs() <= 1e-12);
    }

    #[test]
    fn dsc_is_invariant_under_voxel_permutation(
        a in prop::collection::vec(0u8..2, 64),
        b in prop::collection::vec(0u8..2, 64),
        seed in any::<u64>(),
    ) {
        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<u8> = order.iter().map(|&i| a[i]).collect();
        let pb: Vec<u8> = order.iter().map(|&i| b[i]).collect();
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&pa, &pb).unwrap());
    }

    #[test]
    fn flipping_twice_is_identity(data in prop::collection::vec(any::<i16>(), 2 * 60), flips in prop::array::uniform3(any::<bool>())) {
        let ext = [3, 4, 5];
        prop_assert_eq!(flip(&flip(&data, ext, flips), ext, flips), data);
    }

    #[test]
    fn augmentation_commutes_with_region_encoding(labels in label_volume([4, 4, 4]), seed in any::<u64>()) {
        let ext = [4, 4, 4];
        let mask = MaskVolume::new(ext, labels).unwrap();
        let volume = Volume::new(Tensor::zeros(&[1, 4, 4, 4]), [1.0; 3], vec!["t1".into()]).unwrap();
        let policy = AugmentPolicy { crop: Some([3, 2, 4]), flip_prob: 0.5, ..AugmentPolicy::default() };
        let params = AugmentParams::sample(seed, ext, 1, &policy).unwrap();
        let (_, augmented) = apply_augment(&volume, &mask, &params).unwrap();
        let direct = encode_regions(&augmented);
        let regions = encode_regions(&mask);
        let moved = crop(&flip(regions.data(), ext, params.flips), ext, params.corner, params.size);
        prop_assert_eq!(direct.data(), &moved[..]);
    }
}

/// Self-attention with full-resolution keys and no spatial mixing outside the
/// attention product commutes with any permutation of voxels.
#[test]
fn full_attention_is_permutation_equivariant() {
    let (c, grid) = (8, [2, 2, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let opts = AttentionOptions {
        value_enhance: ValueEnhance::Identity,
        post_block: false,
    };
    let layer = Tmsm::new(&mut Builder::new(&mut store, &mut rng), "eq", c, grid, ScalePair::new(1, 1).unwrap(), 4, opts).unwrap();
    let run = |store: &mut ParamStore<f64>, x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval).frozen();
        let y = layer.forward(&mut ctx, xv).unwrap();
        drop(ctx);
        tape.value(y).unwrap().clone()
    };
    for trial in 0..16 {
        let x = Tensor::<f64>::rand_normal(&[1, c, 2, 2, 2], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor<f64>| {
            let d: Vec<f64> = (0..c).flat_map(|ch| perm.iter().map(move |&p| (ch, p))).map(|(ch, p)| t.data()[ch * 8 + p]).collect();
            Tensor::new(t.shape(), d).unwrap()
        };
        let y = run(&mut store, &x);
        let yp = run(&mut store, &permute(&x));
        let d = permute(&y).max_abs_diff(&yp).unwrap();
        assert!(d <= 1e-10, "trial {trial}: {d}");
    }
}
