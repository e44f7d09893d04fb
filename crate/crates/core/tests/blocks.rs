mod common;

use cloudmask_core::backbone::MobileFormerBlock;
use cloudmask_core::gate::Lwam;
use cloudmask_core::layers::{Builder, Conv2d, CostCx, Dsc};
use cloudmask_core::pyramid::{Lwfpm, SdBlock};
use cloudmask_core::{Ctx, FpmConfig, Kind, LwamConfig, Model, ModelConfig, ParamStore, Tensor};
use common::{assert_close, uniform, zero};

fn lwam_cfg() -> LwamConfig {
    LwamConfig { enabled: true, pooling_ps: vec![1.0, 2.0], mlp_reduction: 4 }
}

fn fpm_cfg(hff: bool) -> FpmConfig {
    FpmConfig { enabled: true, inner_width: 4, out_channels: 6, dilation_rates: vec![1, 2, 3], hff }
}

#[test]
fn dsc_counts_match_enumeration() {
    let mut b = Builder::new(0);
    let dsc = Dsc::new(&mut b, "d", 32, 32, 1).unwrap();
    let mut cc = CostCx::new(&b.store);
    dsc.cost(&mut cc, &[1, 32, 8, 8]).unwrap();
    let conv_params: u64 = cc.rows.iter().filter(|r| r.layer.ends_with(".conv")).map(|r| r.params).sum();
    let bn_params: u64 = cc.rows.iter().filter(|r| r.layer.ends_with(".bn")).map(|r| r.params).sum();
    assert_eq!(conv_params, 9 * 32 + 32 * 32);
    assert_eq!(conv_params, 1312);
    assert_eq!(bn_params, 128);
    assert_eq!(cc.rows.iter().map(|r| r.macs).sum::<u64>(), 83968);

    let mut b = Builder::new(0);
    let dsc = Dsc::new(&mut b, "d", 1, 1, 1).unwrap();
    let mut cc = CostCx::new(&b.store);
    dsc.cost(&mut cc, &[1, 1, 4, 4]).unwrap();
    let conv_params: u64 = cc.rows.iter().filter(|r| r.layer.ends_with(".conv")).map(|r| r.params).sum();
    assert_eq!(conv_params, 10);
}

#[test]
fn conv_mac_example() {
    let mut b = Builder::new(0);
    let conv = Conv2d::new(&mut b, "c", 16, 32, 3, 1, 1, 1, false).unwrap();
    let mut cc = CostCx::new(&b.store);
    let out = conv.cost(&mut cc, &[1, 16, 8, 8]).unwrap();
    assert_eq!(out, vec![1, 32, 8, 8]);
    assert_eq!(cc.rows[0].macs, 294912);
    assert_eq!(cc.rows[0].params, 9 * 16 * 32);
}

#[test]
fn empty_cost_is_zero() {
    let store = ParamStore::<f64>::new();
    let cc = CostCx::new(&store);
    let r = cloudmask_core::CostReport::from_rows(&[1, 4, 8, 8], cc.rows);
    assert_eq!((r.total_params, r.total_macs), (0, 0));
}

fn former_only(block: &MobileFormerBlock, cx: &mut Ctx<f64>, z: cloudmask_core::Var) -> cloudmask_core::Var {
    let t = block.ln1.forward(cx, z).unwrap();
    let t = block.attn.forward(cx, t).unwrap();
    let z = cx.graph.add(z, t).unwrap();
    let t = block.ln2.forward(cx, z).unwrap();
    let t = block.ffn.forward(cx, t).unwrap();
    cx.graph.add(z, t).unwrap()
}

#[test]
fn zeroed_cross_attention_decouples_branches() {
    for (cin, cout, stride) in [(8, 8, 1), (8, 12, 2)] {
        let mut b = Builder::new(5);
        let block = MobileFormerBlock::new(&mut b, "mf", cin, cout, stride, 16, 2, 2, 3).unwrap();
        let mut store = b.store;
        zero(&mut store, &block.cross_attention_outputs());
        let x = uniform(1, &[2, cin, 8, 8], -1.0, 1.0);
        let z = uniform(2, &[2, 3, 16], -1.0, 1.0);

        let mut cx = Ctx::eval(&store);
        let xv = cx.graph.input(x.clone()).unwrap();
        let zv = cx.graph.input(z.clone()).unwrap();
        let (y, zo) = block.forward(&mut cx, xv, zv).unwrap();
        let plain = block.mobile.forward(&mut cx, xv).unwrap();
        let alone = former_only(&block, &mut cx, zv);
        assert_close(cx.graph.value(y), cx.graph.value(plain), 1e-6);
        assert_close(cx.graph.value(zo), cx.graph.value(alone), 1e-6);
        assert_eq!(cx.graph.shape(y), &[2, cout, 8 / stride, 8 / stride]);
        assert_eq!(cx.graph.shape(zo), &[2, 3, 16]);
    }
}

#[test]
fn cross_attention_is_live_by_default() {
    let mut b = Builder::new(5);
    let block = MobileFormerBlock::new(&mut b, "mf", 8, 8, 1, 16, 2, 2, 3).unwrap();
    let store = b.store;
    let mut cx = Ctx::eval(&store);
    let xv = cx.graph.input(uniform(1, &[1, 8, 4, 4], -1.0, 1.0)).unwrap();
    let zv = cx.graph.input(uniform(2, &[1, 3, 16], -1.0, 1.0)).unwrap();
    let (y, _) = block.forward(&mut cx, xv, zv).unwrap();
    let plain = block.mobile.forward(&mut cx, xv).unwrap();
    let d = cx.graph.tensor(y).max_abs_diff(&cx.graph.tensor(plain));
    assert!(d > 1e-9, "cross attention had no effect ({d:e})");
}

#[test]
fn mobile_former_rejects_mismatched_tokens() {
    let mut b = Builder::new(5);
    let block = MobileFormerBlock::new(&mut b, "mf", 8, 8, 1, 16, 2, 2, 3).unwrap();
    let store = b.store;
    let mut cx = Ctx::eval(&store);
    let xv = cx.graph.input(Tensor::zeros(&[1, 8, 4, 4])).unwrap();
    let zv = cx.graph.input(Tensor::zeros(&[1, 3, 12])).unwrap();
    let e = block.forward(&mut cx, xv, zv).unwrap_err();
    assert!(e.to_string().contains("mf"), "{e}");
    assert!(MobileFormerBlock::new(&mut Builder::new(0), "bad", 6, 8, 1, 16, 4, 2, 3).is_err());
}

#[test]
fn sd_block_zero_dilated_conv_returns_reduced_input() {
    let mut b = Builder::new(3);
    let sd = SdBlock::new(&mut b, "sd", 6, 4, 2).unwrap();
    let sc = Conv2d::new(&mut b, "sc", 4, 4, 3, 1, 1, 1, false).unwrap();
    let mut store = b.store;
    zero(&mut store, &[sd.dc.conv.weight]);
    let mut cx = Ctx::eval(&store);
    let x = cx.graph.input(uniform(4, &[2, 6, 5, 5], -1.0, 1.0)).unwrap();
    let y = sd.forward(&mut cx, x, &sc).unwrap();
    let p = sd.pw.forward(&mut cx, x).unwrap();
    assert_eq!(cx.graph.value(y), cx.graph.value(p));
}

#[test]
fn sd_block_keeps_spatial_size() {
    for rate in [1, 2, 6, 12, 18] {
        let mut b = Builder::new(3);
        let sd = SdBlock::new(&mut b, "sd", 6, 4, rate).unwrap();
        let sc = Conv2d::new(&mut b, "sc", 4, 4, 3, 1, 1, 1, false).unwrap();
        let store = b.store;
        let mut cx = Ctx::eval(&store);
        let x = cx.graph.input(uniform(4, &[1, 6, 7, 9], -1.0, 1.0)).unwrap();
        let y = sd.forward(&mut cx, x, &sc).unwrap();
        assert_eq!(cx.graph.shape(y), &[1, 4, 7, 9], "rate {rate}");
    }
}

#[test]
fn shared_conv_is_one_tensor() {
    let mut b = Builder::new(9);
    let fpm = Lwfpm::new(&mut b, "fpm", 8, &fpm_cfg(true)).unwrap();
    let store = b.store;
    let shared: Vec<&str> =
        store.entries().iter().map(|e| e.name.as_str()).filter(|n| n.starts_with("fpm.sc")).collect();
    assert_eq!(shared, vec!["fpm.sc.weight"]);

    let mut cc = CostCx::new(&store);
    fpm.cost(&mut cc, &[1, 8, 6, 6]).unwrap();
    let weight = |suffix: &str| -> u64 {
        cc.rows.iter().filter(|r| r.layer.starts_with("fpm.sd") && r.layer.ends_with(suffix)).map(|r| r.params).sum()
    };
    let sc_rows: Vec<_> = cc.rows.iter().filter(|r| r.layer == "fpm.sc").collect();
    assert_eq!(sc_rows.len(), 3, "shared conv runs once per SDblock");
    let sc_params: u64 = sc_rows.iter().map(|r| r.params).sum();
    assert_eq!(sc_params, 9 * 4 * 4, "counted once");
    let (pw, dc) = (weight(".pw.conv"), weight(".dc.conv"));
    assert_eq!(pw, 3 * 8 * 4);
    assert_eq!(dc, 3 * 9 * 4 * 4);
    assert!(pw + dc + sc_params < 3 * (8 * 4 + 9 * 4 * 4 + 9 * 4 * 4));
}

#[test]
fn shared_conv_feeds_every_sd_block() {
    let mut b = Builder::new(9);
    let fpm = Lwfpm::new(&mut b, "fpm", 8, &fpm_cfg(false)).unwrap();
    let mut store = b.store;
    let x = uniform(6, &[1, 8, 6, 6], -1.0, 1.0);
    let run = |store: &ParamStore<f64>| -> Vec<Tensor<f64>> {
        let mut cx = Ctx::eval(store);
        let xv = cx.graph.input(x.clone()).unwrap();
        fpm.paths(&mut cx, xv).unwrap().into_iter().map(|v| cx.graph.tensor(v)).collect()
    };
    let before = run(&store);
    store.get_mut(fpm.sc.weight).data_mut()[0] += 0.5;
    let after = run(&store);
    assert_eq!(before[0], after[0]);
    assert_eq!(before[1], after[1]);
    for k in 2..5 {
        assert!(before[k].max_abs_diff(&after[k]) > 0.0, "path {k} ignores the shared conv");
    }
}

#[test]
fn hierarchical_fusion_is_running_sum_without_parameters() {
    let (mut b1, mut b2) = (Builder::new(9), Builder::new(9));
    let with = Lwfpm::new(&mut b1, "fpm", 8, &fpm_cfg(true)).unwrap();
    let without = Lwfpm::new(&mut b2, "fpm", 8, &fpm_cfg(false)).unwrap();
    assert_eq!(b1.store.num_trainable(), b2.store.num_trainable());
    let mut c1 = CostCx::new(&b1.store);
    let mut c2 = CostCx::new(&b2.store);
    with.cost(&mut c1, &[1, 8, 6, 6]).unwrap();
    without.cost(&mut c2, &[1, 8, 6, 6]).unwrap();
    assert_eq!(c1.rows, c2.rows);

    let x = uniform(6, &[2, 8, 6, 6], -1.0, 1.0);
    let mut cx = Ctx::eval(&b1.store);
    let xv = cx.graph.input(x.clone()).unwrap();
    let f: Vec<Tensor<f64>> = with.paths(&mut cx, xv).unwrap().into_iter().map(|v| cx.graph.tensor(v)).collect();
    let mut cx = Ctx::eval(&b2.store);
    let xv = cx.graph.input(x).unwrap();
    let d: Vec<Tensor<f64>> = without.paths(&mut cx, xv).unwrap().into_iter().map(|v| cx.graph.tensor(v)).collect();
    assert_eq!(f[2], d[2]);
    let sum = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect::<Vec<_>>();
    let f12 = sum(&d[2], &d[3]);
    assert_eq!(f[3].data(), &f12[..]);
    let f18: Vec<f64> = f12.iter().zip(d[4].data()).map(|(x, y)| x + y).collect();
    assert_eq!(f[4].data(), &f18[..]);
}

#[test]
fn fuse_sees_five_paths() {
    let mut b = Builder::new(9);
    let fpm = Lwfpm::new(&mut b, "fpm", 8, &fpm_cfg(true)).unwrap();
    assert_eq!(fpm.fuse.conv.in_ch, 5 * 4);
    let store = b.store;
    let mut cx = Ctx::eval(&store);
    let xv = cx.graph.input(uniform(2, &[1, 8, 5, 7], -1.0, 1.0)).unwrap();
    let y = fpm.forward(&mut cx, xv).unwrap();
    assert_eq!(cx.graph.shape(y), &[1, 6, 5, 7]);
}

#[test]
fn pyramid_keeps_constant_maps_constant() {
    let mut b = Builder::new(9);
    let fpm = Lwfpm::new(&mut b, "fpm", 8, &fpm_cfg(true)).unwrap();
    let store = b.store;
    let mut cx = Ctx::eval(&store);
    let v = cx.graph.input(Tensor::from_vec(&[1, 8, 1, 1], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap()).unwrap();
    let x = cx.graph.expand(v, &[1, 8, 12, 12]).unwrap();
    let mut paths = fpm.paths(&mut cx, x).unwrap();
    paths.push(fpm.forward(&mut cx, x).unwrap());
    // shared 3x3 plus the widest dilation reach 1 + 3 pixels, so the centre avoids the zero ring
    let margin = 4;
    for (k, p) in paths.iter().enumerate() {
        let t = cx.graph.tensor(*p);
        for c in 0..t.shape()[1] {
            let centre = t.get(&[0, c, margin, margin]);
            for i in margin..12 - margin {
                for j in margin..12 - margin {
                    assert!((t.get(&[0, c, i, j]) - centre).abs() < 1e-12, "path {k} channel {c}");
                }
            }
        }
    }
}

#[test]
fn pyramid_rejects_empty_maps() {
    let mut b = Builder::new(9);
    let fpm = Lwfpm::new(&mut b, "fpm", 8, &fpm_cfg(true)).unwrap();
    let store = b.store;
    let mut cx = Ctx::eval(&store);
    let xv = cx.graph.input(Tensor::zeros(&[1, 8, 0, 4])).unwrap();
    assert_eq!(fpm.forward(&mut cx, xv).unwrap_err().kind(), "degenerate_output");
}

fn gate_values(g: &Lwam, store: &ParamStore<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut cx = Ctx::eval(store);
    let xv = cx.graph.input(x.clone()).unwrap();
    let gc = g.cam.forward(&mut cx, xv).unwrap();
    let gs = g.sam.forward(&mut cx, xv).unwrap();
    let y = g.forward(&mut cx, xv).unwrap();
    (cx.graph.tensor(gc), cx.graph.tensor(gs), cx.graph.tensor(y))
}

#[test]
fn gate_contracts_and_preserves_shape() {
    let mut b = Builder::new(4);
    let g = Lwam::new(&mut b, "g", 8, &lwam_cfg()).unwrap();
    let x = uniform(8, &[2, 8, 5, 6], -3.0, 3.0);
    let (gc, gs, y) = gate_values(&g, &b.store, &x);
    assert_eq!(gc.shape(), &[2, 8, 1, 1]);
    assert_eq!(gs.shape(), &[2, 1, 5, 6]);
    assert_eq!(y.shape(), x.shape());
    assert!(gc.data().iter().chain(gs.data()).all(|&v| v > 0.0 && v < 1.0));
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
}

#[test]
fn zero_gate_weights_give_one_half() {
    let mut b = Builder::new(4);
    let g = Lwam::new(&mut b, "g", 8, &lwam_cfg()).unwrap();
    let mut store = b.store;
    let mut ids = g.cam.fc1.params();
    ids.extend(g.cam.fc2.params());
    ids.extend(g.sam.conv.params());
    zero(&mut store, &ids);
    let x = uniform(8, &[1, 8, 4, 4], -3.0, 3.0);
    let (gc, gs, y) = gate_values(&g, &store, &x);
    assert!(gc.data().iter().chain(gs.data()).all(|&v| v == 0.5));
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| *a == b * 0.25));
}

#[test]
fn channel_gate_is_permutation_equivariant() {
    let c = 8;
    let mut b = Builder::new(4);
    let g = Lwam::new(&mut b, "g", c, &lwam_cfg()).unwrap();
    let store = b.store;
    let perm: Vec<usize> = vec![3, 0, 7, 1, 6, 2, 5, 4];
    let x = uniform(8, &[1, c, 3, 3], -2.0, 2.0);
    let mut xp = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        for s in 0..9 {
            xp.data_mut()[i * 9 + s] = x.data()[p * 9 + s];
        }
    }
    // the MLP mixes channels, so its weights are permuted alongside the input
    let mut sp = store.clone();
    let hidden = g.cam.fc1.out;
    let w1 = store.get(g.cam.fc1.weight).data().to_vec();
    for h in 0..hidden {
        for (i, &p) in perm.iter().enumerate() {
            sp.get_mut(g.cam.fc1.weight).data_mut()[h * c + i] = w1[h * c + p];
        }
    }
    let w2 = store.get(g.cam.fc2.weight).data().to_vec();
    let b2 = store.get(g.cam.fc2.bias.unwrap()).data().to_vec();
    for (i, &p) in perm.iter().enumerate() {
        for h in 0..hidden {
            sp.get_mut(g.cam.fc2.weight).data_mut()[i * hidden + h] = w2[p * hidden + h];
        }
        sp.get_mut(g.cam.fc2.bias.unwrap()).data_mut()[i] = b2[p];
    }
    let (gc, _, _) = gate_values(&g, &store, &x);
    let (gcp, _, _) = gate_values(&g, &sp, &xp);
    for (i, &p) in perm.iter().enumerate() {
        assert!((gcp.data()[i] - gc.data()[p]).abs() < 1e-15);
    }
}

#[test]
fn spatial_gate_translates_with_input() {
    let mut b = Builder::new(4);
    let g = Lwam::new(&mut b, "g", 4, &lwam_cfg()).unwrap();
    let store = b.store;
    let (h, w) = (8, 8);
    let x = uniform(8, &[1, 4, h, w], -2.0, 2.0);
    let mut xs = Tensor::<f64>::zeros(&[1, 4, h, w]);
    for c in 0..4 {
        for i in 0..h {
            for j in 1..w {
                xs.set(&[0, c, i, j], x.get(&[0, c, i, j - 1]));
            }
        }
    }
    let (_, gs, _) = gate_values(&g, &store, &x);
    let (_, gss, _) = gate_values(&g, &store, &xs);
    for i in 1..h - 1 {
        for j in 2..w - 1 {
            assert!((gss.get(&[0, 0, i, j]) - gs.get(&[0, 0, i, j - 1])).abs() < 1e-15);
        }
    }
}

#[test]
fn gate_parameter_footprint() {
    for (c, r) in [(16usize, 4usize), (24, 8), (8, 2)] {
        let cfg = LwamConfig { mlp_reduction: r, ..lwam_cfg() };
        let mut b = Builder::new(0);
        let g = Lwam::new(&mut b, "g", c, &cfg).unwrap();
        let mut cc = CostCx::new(&b.store);
        g.cost(&mut cc, &[1, c, 8, 8]).unwrap();
        let total: u64 = cc.rows.iter().map(|r| r.params).sum();
        let h = c / r;
        assert_eq!(total as usize, 2 * c * h + h + c + 19);
    }
}

fn tiny_model() -> (Model, ParamStore<f64>) {
    Model::new::<f64>(&ModelConfig::tiny()).unwrap()
}

#[test]
fn model_output_is_a_probability_map() {
    let (m, s) = tiny_model();
    let x = uniform(3, &[2, 4, 32, 32], 0.0, 1.0);
    let p = m.infer(&s, &x).unwrap();
    assert_eq!(p.shape(), &[2, 1, 32, 32]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn batch_equals_per_sample_runs() {
    let (m, s) = tiny_model();
    let x = uniform(3, &[2, 4, 16, 16], 0.0, 1.0);
    let both = m.infer(&s, &x).unwrap();
    let a = m.infer(&s, &x.narrow_batch(0, 1).unwrap()).unwrap();
    let b = m.infer(&s, &x.narrow_batch(1, 1).unwrap()).unwrap();
    let cat = Tensor::cat_batch(&[a, b]).unwrap();
    assert!(both.max_abs_diff(&cat) <= 1e-5);
}

#[test]
fn same_seed_same_output() {
    let x = uniform(3, &[1, 4, 16, 16], 0.0, 1.0);
    let (m1, s1) = tiny_model();
    let (m2, s2) = tiny_model();
    assert_eq!(m1.infer(&s1, &x).unwrap(), m2.infer(&s2, &x).unwrap());
    let mut cfg = ModelConfig::tiny();
    cfg.seed = 1;
    let (m3, s3) = Model::new::<f64>(&cfg).unwrap();
    assert_ne!(m1.infer(&s1, &x).unwrap(), m3.infer(&s3, &x).unwrap());
}

#[test]
fn input_must_be_stride_aligned() {
    let (m, s) = tiny_model();
    let e = m.infer(&s, &Tensor::zeros(&[1, 4, 20, 16])).unwrap_err();
    assert!(e.to_string().contains("pad"), "{e}");
    assert!(m.infer(&s, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
}

#[test]
fn threshold_ties_and_monotonicity() {
    let p = Tensor::from_vec(&[5], vec![0.7f64, 0.5, 0.49, 0.1, 0.9]).unwrap();
    assert_eq!(cloudmask_core::model::binarize(&p, 0.5).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0]);
    let (m, s) = tiny_model();
    let x = uniform(5, &[1, 4, 16, 16], 0.0, 1.0);
    let mut last = f64::INFINITY;
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let pos: f64 = m.predict_mask(&s, &x, t).unwrap().data().iter().sum();
        assert!(pos <= last);
        last = pos;
    }
    assert!(cloudmask_core::model::binarize(&p, 1.0).is_err());
}

#[test]
fn reference_shapes_propagate() {
    let (m, s) = Model::build(&ModelConfig::reference()).unwrap();
    let mut cc = CostCx::new(&s);
    let feats = m.backbone.cost(&mut cc, &[1, 4, 384, 384]).unwrap();
    assert_eq!(
        feats,
        vec![
            vec![1, 16, 192, 192],
            vec![1, 24, 96, 96],
            vec![1, 32, 48, 48],
            vec![1, 64, 24, 24],
            vec![1, 96, 12, 12]
        ]
    );
}

#[test]
fn ablation_switches_remove_modules() {
    let cfg = ModelConfig::tiny();
    for (name, c) in cfg.ablations() {
        let (_, s) = Model::build(&c).unwrap();
        let has = |p: &str| s.entries().iter().any(|e| e.name.starts_with(p) && e.kind == Kind::Param);
        assert_eq!(has("fpm."), c.fpm.enabled, "{name}");
        assert_eq!(has("fpm_off."), !c.fpm.enabled, "{name}");
        assert_eq!(s.entries().iter().any(|e| e.name.contains(".gate.")), c.lwam.enabled, "{name}");
    }
    let gates = Model::build(&cfg).unwrap().0.decoder.iter().filter(|l| l.gate.is_some()).count();
    assert_eq!(gates, cfg.stages());
}
