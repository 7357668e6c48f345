use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::toybench::{build_reference_model, Architecture};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn batch(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, 3, 8, 8], 1.0, &mut rng(seed))
}

fn single_conv() -> ModelGraph {
    let conv = Conv2d {
        weight: Tensor::randn(&[8, 3, 3, 3], 0.3, &mut rng(1)),
        bias: vec![0.1; 8],
        stride: 1,
        pad: 1,
    };
    let fc = Linear {
        weight: Tensor::randn(&[2, 8 * 64], 0.1, &mut rng(2)),
        bias: vec![0.0; 2],
    };
    ModelGraph::new(
        "single",
        [3, 8, 8],
        vec![LayerSpec::prunable(LayerOp::Conv(conv)), LayerSpec::new(LayerOp::Fc(fc))],
    )
    .unwrap()
}

/// Keeps `kept` at `layer` without touching weights.
fn prune_mask(model: &ModelGraph, layer: usize, kept: &[usize]) -> ModelGraph {
    let len = model.input_mask(layer).unwrap().len();
    let sel = ChannelSelection::from_kept(len, kept).unwrap();
    let w = model.conv(layer).unwrap().weight.clone();
    model.apply_selection(layer, &sel, w).unwrap()
}

#[test]
fn conv_flops_hand_values() {
    let m = single_conv();
    let rows = m.flops_breakdown().unwrap();
    assert_eq!(rows[0].macs, 13_824);
    assert_eq!(rows[1].macs, 1_024);
    let pruned = prune_mask(&m, 0, &[1]);
    assert_eq!(pruned.flops_breakdown().unwrap()[0].macs, 4_608);
    let ratio = compression_ratio(&m, &pruned).unwrap();
    assert!((ratio - (13_824.0 + 1_024.0) / (4_608.0 + 1_024.0)).abs() < 1e-12);
}

#[test]
fn pruning_inputs_removes_producer_filters() {
    let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
    let p = prune_mask(&m, 2, &(0..8).collect::<Vec<_>>());
    let rows = p.flops_breakdown().unwrap();
    assert_eq!(rows[0].macs, 27_648 / 2);
    assert_eq!(rows[1].macs, 147_456 / 2);
    assert_eq!(rows[1].in_channels, 8);
    assert_eq!(rows[0].out_channels, 8);
    assert!(p.flops().unwrap() < m.flops().unwrap());
}

#[test]
fn residual_first_conv_keeps_producer_filters() {
    let m = build_reference_model(Architecture::TinyRes, 3, 8, 4, 0).unwrap();
    let p = prune_mask(&m, 6, &[0, 3, 5]);
    assert_eq!(p.samplers()[&5].nnz(), 3);
    assert!(!p.selections().contains_key(&6));
    let rows = p.flops_breakdown().unwrap();
    let conv2 = rows.iter().find(|r| r.layer == 2).unwrap();
    assert_eq!(conv2.out_channels, 16);
    let first = rows.iter().find(|r| r.layer == 6).unwrap();
    assert_eq!(first.macs, 3 * 16 * 16);
}

#[test]
fn residual_roles_and_topology() {
    let m = build_reference_model(Architecture::TinyRes, 3, 8, 4, 0).unwrap();
    assert_eq!(m.residual_role(6), Some(ResidualRole::First));
    assert_eq!(m.residual_role(8), Some(ResidualRole::Middle));
    assert_eq!(m.residual_role(10), Some(ResidualRole::Third));
    assert_eq!(m.residual_role(2), None);
    assert_eq!(m.block_of(8), Some((5, 11)));
    assert_eq!(m.producer(6), None);
    assert_eq!(m.producer(8), Some(6));
    assert_eq!(m.consumer(2), None);
    assert!(m.removes_producer_filters(10));
    assert!(!m.removes_producer_filters(6));
}

#[test]
fn masked_model_matches_compact_export() {
    for arch in [Architecture::TinyVgg, Architecture::TinyRes] {
        let mut m = build_reference_model(arch, 3, 8, 4, 3).unwrap();
        for (i, l) in m.prunable_layers().into_iter().enumerate() {
            let len = m.input_mask(l).unwrap().len();
            let kept: Vec<usize> = (0..len).filter(|c| (c + i) % 3 != 0).collect();
            m = prune_mask(&m, l, &kept);
        }
        let compact = m.export_compact().unwrap();
        assert!(compact.is_compact());
        assert_eq!(compact.flops().unwrap(), m.flops().unwrap());
        let x = batch(5, 11);
        let a = m.logits(&x).unwrap();
        let b = compact.logits(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-4, "{arch:?}");
        let params = |g: &ModelGraph| -> usize {
            g.conv_layers().iter().map(|&l| g.conv(l).unwrap().weight.len()).sum()
        };
        assert!(params(&compact) < params(&m));
    }
}

#[test]
fn compact_models_refuse_further_pruning() {
    let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
    let c = m.export_compact().unwrap();
    let w = c.conv(2).unwrap().weight.clone();
    assert!(c.apply_selection(2, &ChannelSelection::all(16), w).is_err());
}

#[test]
fn selections_only_shrink() {
    let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
    let p = prune_mask(&m, 5, &[0, 1, 2]);
    let revive = ChannelSelection::from_kept(16, &[0, 1, 2, 3]).unwrap();
    let w = p.conv(5).unwrap().weight.clone();
    assert!(p.apply_selection(5, &revive, w.clone()).is_err());
    assert!(p.apply_selection(0, &ChannelSelection::all(3), m.conv(0).unwrap().weight.clone()).is_err());
    assert!(p.apply_selection(5, &ChannelSelection::all(8), w).is_err());
    assert!(ChannelSelection::from_mask(vec![false; 4]).is_err());
}

#[test]
fn malformed_graphs_are_rejected() {
    let conv = || {
        LayerOp::Conv(Conv2d {
            weight: Tensor::zeros(&[3, 3, 1, 1]),
            bias: vec![0.0; 3],
            stride: 1,
            pad: 0,
        })
    };
    let unclosed = vec![LayerSpec::new(LayerOp::ResidualEntry), LayerSpec::new(conv())];
    assert!(ModelGraph::new("x", [3, 4, 4], unclosed).is_err());
    let empty_block = vec![LayerSpec::new(LayerOp::ResidualEntry), LayerSpec::new(LayerOp::ResidualExit)];
    assert!(ModelGraph::new("x", [3, 4, 4], empty_block).is_err());
    let prunable_relu = vec![LayerSpec::prunable(LayerOp::Relu)];
    assert!(ModelGraph::new("x", [3, 4, 4], prunable_relu).is_err());
    let wrong_channels = vec![LayerSpec::new(conv())];
    assert!(ModelGraph::new("x", [4, 4, 4], wrong_channels).is_err());
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let m = single_conv();
    assert!(m.forward(&Tensor::zeros(&[1, 3, 6, 6]), &[]).is_err());
}

#[test]
fn recorded_features_are_pre_mask_inputs() {
    let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
    let p = prune_mask(&m, 5, &[0, 1]);
    let x = batch(2, 4);
    let a = m.forward(&x, &[5]).unwrap().recorded.remove(&5).unwrap();
    let b = p.forward(&x, &[5]).unwrap().recorded.remove(&5).unwrap();
    assert!(a.input.bitwise_eq(&b.input));
    assert!(!a.output.bitwise_eq(&b.output));
}

// Independent straight-line interpreter used as an oracle for the graph
// executor: scalar loops, no im2col, no GEMM.
mod oracle {
    use super::*;

    pub struct Feat {
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub v: Vec<f64>,
    }

    fn conv(f: &Feat, c: &Conv2d, mask: Option<&ChannelSelection>) -> Feat {
        let s = c.weight.shape();
        let (o, i, kh, kw) = (s[0], s[1], s[2], s[3]);
        let oh = (f.h + 2 * c.pad - kh) / c.stride + 1;
        let ow = (f.w + 2 * c.pad - kw) / c.stride + 1;
        let mut v = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = c.bias[oc] as f64;
                    for ic in 0..i {
                        if mask.is_some_and(|m| !m.is_kept(ic)) {
                            continue;
                        }
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * c.stride + ky) as i64 - c.pad as i64;
                                let ix = (x * c.stride + kx) as i64 - c.pad as i64;
                                if iy < 0 || ix < 0 || iy >= f.h as i64 || ix >= f.w as i64 {
                                    continue;
                                }
                                let wv = c.weight.data()[((oc * i + ic) * kh + ky) * kw + kx] as f64;
                                acc += wv * f.v[(ic * f.h + iy as usize) * f.w + ix as usize];
                            }
                        }
                    }
                    v[(oc * oh + y) * ow + x] = acc;
                }
            }
        }
        Feat { c: o, h: oh, w: ow, v }
    }

    fn pool(f: &Feat, size: usize, stride: usize) -> Feat {
        let oh = (f.h - size) / stride + 1;
        let ow = (f.w - size) / stride + 1;
        let mut v = Vec::new();
        for c in 0..f.c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..size {
                        for kx in 0..size {
                            best = best.max(f.v[(c * f.h + y * stride + ky) * f.w + x * stride + kx]);
                        }
                    }
                    v.push(best);
                }
            }
        }
        Feat { c: f.c, h: oh, w: ow, v }
    }

    pub fn run(m: &ModelGraph, image: &[f32]) -> Vec<f64> {
        let [c, h, w] = m.input_shape();
        let mut f = Feat {
            c,
            h,
            w,
            v: image.iter().map(|&x| x as f64).collect(),
        };
        let mut saved: Option<Vec<f64>> = None;
        for (i, l) in m.layers().iter().enumerate() {
            f = match &l.op {
                LayerOp::Conv(cv) => conv(&f, cv, m.input_mask(i)),
                LayerOp::Relu => Feat {
                    v: f.v.iter().map(|x| x.max(0.0)).collect(),
                    ..f
                },
                LayerOp::MaxPool { size, stride } => pool(&f, *size, *stride),
                LayerOp::ResidualEntry => {
                    saved = Some(f.v.clone());
                    f
                }
                LayerOp::ResidualExit => Feat {
                    v: f.v.iter().zip(saved.take().unwrap()).map(|(a, b)| a + b).collect(),
                    ..f
                },
                LayerOp::Fc(fc) => {
                    let (o, n) = (fc.out_features(), fc.in_features());
                    let v = (0..o)
                        .map(|r| {
                            fc.bias[r] as f64
                                + (0..n).map(|k| fc.weight.data()[r * n + k] as f64 * f.v[k]).sum::<f64>()
                        })
                        .collect();
                    Feat { c: o, h: 1, w: 1, v }
                }
            };
        }
        f.v
    }
}

#[test]
fn executor_matches_scalar_oracle() {
    for arch in [Architecture::TinyVgg, Architecture::TinyRes] {
        let m = build_reference_model(arch, 3, 8, 4, 5).unwrap();
        let m = prune_mask(&m, m.prunable_layers()[1], &[1, 4, 9, 15]);
        let x = batch(3, 6);
        let logits = m.logits(&x).unwrap();
        for n in 0..3 {
            let expected = oracle::run(&m, &x.data()[n * 192..(n + 1) * 192]);
            for (k, e) in expected.iter().enumerate() {
                let got = logits.data()[n * 4 + k] as f64;
                assert!((got - e).abs() < 1e-5 * (1.0 + e.abs()), "{arch:?} sample {n} class {k}: {got} vs {e}");
            }
        }
    }
}

#[test]
fn serialization_round_trips_bitwise() {
    let m = build_reference_model(Architecture::TinyRes, 3, 8, 4, 8).unwrap();
    let m = prune_mask(&m, 6, &[2, 3]);
    let m = prune_mask(&m, 10, &[0, 1, 2, 3, 4]);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = ModelGraph::load(dir.path()).unwrap();
    assert!(back.bitwise_eq(&m));
    let c = m.export_compact().unwrap();
    let (manifest, bytes) = c.serialize();
    assert!(ModelGraph::deserialize(&manifest, &bytes).unwrap().bitwise_eq(&c));
}

#[test]
fn truncated_payload_fails_checksum() {
    let m = single_conv();
    let (manifest, bytes) = m.serialize();
    let err = ModelGraph::deserialize(&manifest, &bytes[..bytes.len() - 8]).unwrap_err();
    assert!(matches!(err, PcpError::Checksum { .. }));
}

#[test]
fn declared_shape_mismatch_is_rejected() {
    let m = single_conv();
    let (mut manifest, bytes) = m.serialize();
    if let io::LayerEntry::Conv { weight, .. } = &mut manifest.layers[0] {
        weight.shape = vec![8, 3, 3, 2];
    }
    let err = ModelGraph::deserialize(&manifest, &bytes).unwrap_err();
    assert!(matches!(err, PcpError::Format(_)), "{err}");

    let (mut manifest, bytes) = m.serialize();
    manifest.format_version = 99;
    assert!(matches!(
        ModelGraph::deserialize(&manifest, &bytes),
        Err(PcpError::Version { found: 99, .. })
    ));
}

#[test]
fn sampler_only_gates_the_branch() {
    let m = build_reference_model(Architecture::TinyRes, 3, 8, 4, 2).unwrap();
    let p = prune_mask(&m, 6, &[0]);
    let x = batch(2, 3);
    let a = m.forward(&x, &[5, 11]).unwrap();
    let b = p.forward(&x, &[5, 11]).unwrap();
    // Shortcut (input to the exit's sum) is identical in both.
    assert!(a.recorded[&5].output.bitwise_eq(&b.recorded[&5].output));
    assert!(!a.recorded[&11].output.bitwise_eq(&b.recorded[&11].output));
}
