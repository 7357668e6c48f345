mod common;

use common::*;
use pcp_core::model::{compression_ratio, ChannelSelection, ModelGraph};
use pcp_core::toybench::{build_reference_model, Architecture};
use pcp_core::Tensor;
use proptest::prelude::*;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random monotone pruning of every prunable layer, weights untouched.
fn random_pruning(m: &ModelGraph, seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for l in m.prunable_layers() {
        let len = out.input_mask(l).unwrap().len();
        let keep = rng.random_range(1..=len);
        let mut kept = index::sample(&mut rng, len, keep).into_vec();
        kept.sort_unstable();
        let sel = ChannelSelection::from_kept(len, &kept).unwrap();
        let w = out.conv(l).unwrap().weight.clone();
        out = out.apply_selection(l, &sel, w).unwrap();
    }
    out
}

fn arch(resnet: bool) -> Architecture {
    if resnet {
        Architecture::TinyRes
    } else {
        Architecture::TinyVgg
    }
}

#[test]
fn reference_flops_match_hand_counts() {
    let vgg = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
    let res = build_reference_model(Architecture::TinyRes, 3, 8, 4, 0).unwrap();
    assert_eq!(vgg.flops().unwrap(), TINY_VGG_FLOPS);
    assert_eq!(res.flops().unwrap(), TINY_RES_FLOPS);
    assert_eq!(compression_ratio(&vgg, &vgg).unwrap(), 1.0);
}

#[test]
fn dropping_one_mid_channel_costs_its_hand_counted_share() {
    let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
    let sel = ChannelSelection::from_kept(16, &(0..16).filter(|&c| c != 2).collect::<Vec<_>>()).unwrap();
    let p = m.apply_selection(2, &sel, m.conv(2).unwrap().weight.clone()).unwrap();
    // One input channel of conv 2 and one filter of conv 0, both at 8x8.
    let saved = 8 * 8 * 16 * 9 + 8 * 8 * 3 * 9;
    assert_eq!(m.flops().unwrap() - p.flops().unwrap(), saved);
}

#[test]
fn residual_first_conv_pruning_keeps_the_shortcut() {
    let m = build_reference_model(Architecture::TinyRes, 3, 8, 4, 0).unwrap();
    let first = m.prunable_layers()[1];
    let len = m.input_mask(first).unwrap().len();
    let sel = ChannelSelection::from_kept(len, &(1..len).collect::<Vec<_>>()).unwrap();
    let p = m.apply_selection(first, &sel, m.conv(first).unwrap().weight.clone()).unwrap();
    assert_eq!(p.input_mask(first).unwrap().nnz(), len - 1);
    assert_eq!(p.output_shape().unwrap(), m.output_shape().unwrap());
    let (entry, exit) = p.block_of(first).unwrap();
    let shapes = p.layer_input_shapes().unwrap();
    assert_eq!(shapes[entry], shapes[exit]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn flops_match_an_independent_count(seed in any::<u64>(), resnet in any::<bool>()) {
        let m = build_reference_model(arch(resnet), 3, 8, 4, seed).unwrap();
        let p = random_pruning(&m, seed);
        prop_assert_eq!(p.flops().unwrap(), independent_flops(&p));
        prop_assert!(compression_ratio(&m, &p).unwrap() >= 1.0);
    }

    #[test]
    fn executor_matches_the_scalar_interpreter(seed in any::<u64>(), resnet in any::<bool>()) {
        let m = random_pruning(&build_reference_model(arch(resnet), 3, 8, 4, seed).unwrap(), seed ^ 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        let logits = m.logits(&x).unwrap();
        let net = Net64::from_model(&m);
        let per = x.item_len();
        for n in 0..3 {
            let image: Vec<f64> = x.data()[n * per..(n + 1) * per].iter().map(|&v| v as f64).collect();
            let expected = net.logits(&image);
            for (k, e) in expected.iter().enumerate() {
                let g = logits.data()[n * 4 + k] as f64;
                prop_assert!((g - e).abs() <= 1e-5 * (1.0 + e.abs()), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn masked_models_match_their_compact_export(seed in any::<u64>(), resnet in any::<bool>()) {
        let m = random_pruning(&build_reference_model(arch(resnet), 3, 8, 4, seed).unwrap(), seed ^ 2);
        let compact = m.export_compact().unwrap();
        prop_assert_eq!(compact.flops().unwrap(), m.flops().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
        let d = m.logits(&x).unwrap().max_abs_diff(&compact.logits(&x).unwrap()).unwrap();
        prop_assert!(d < 1e-5, "max diff {d}");
    }

    #[test]
    fn pruned_models_survive_a_disk_round_trip(seed in any::<u64>(), resnet in any::<bool>()) {
        let m = random_pruning(&build_reference_model(arch(resnet), 3, 8, 4, seed).unwrap(), seed);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ModelGraph::load(dir.path()).unwrap();
        prop_assert!(back.bitwise_eq(&m));
    }
}
