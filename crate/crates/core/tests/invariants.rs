use cloudmask_core::data::pnm::{decode_pgm, encode_pgm};
use cloudmask_core::data::raster::Raster;
use cloudmask_core::data::{crop, stitch, Scene};
use cloudmask_core::metrics::confusion;
use cloudmask_core::ops::conv::{ConvGeom, ConvSpec};
use cloudmask_core::train::{lr_schedule, TrainConfig};
use cloudmask_core::{ConfusionCounts, Graph, Tensor};
use proptest::prelude::*;

fn eval(shape: &[usize], data: Vec<f64>, f: impl Fn(&mut Graph<f64>, cloudmask_core::Var) -> cloudmask_core::Var) -> Tensor<f64> {
    let mut g = Graph::inference();
    let x = g.input(Tensor::from_vec(shape, data).unwrap()).unwrap();
    let y = f(&mut g, x);
    g.tensor(y)
}

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, tn, fp, fn_)| ConfusionCounts { tp, tn, fp, fn_ })
}

fn mask(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f32), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, scale in 1.0f64..2000.0, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 500.0 - 1.0) * scale).collect();
        let y = eval(&[rows, cols], data, |g, x| g.softmax(x, 1).unwrap());
        for r in 0..rows {
            let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.data()[r * cols..(r + 1) * cols].iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn lp_one_is_mean_and_large_p_is_max(data in prop::collection::vec(0.01f64..5.0, 1..40)) {
        let n = data.len();
        let p1 = eval(&[1, n], data.clone(), |g, x| g.lp_pool(x, &[1], 1.0).unwrap());
        let mean = eval(&[1, n], data.clone(), |g, x| g.mean(x, &[1]).unwrap());
        prop_assert!((p1.data()[0] - mean.data()[0]).abs() < 1e-12);
        let max = data.iter().cloned().fold(0.0, f64::max);
        let big = eval(&[1, n], data.clone(), |g, x| g.lp_pool(x, &[1], 5000.0).unwrap());
        // (1/n)^(1/p) <= result / max <= 1
        prop_assert!(big.data()[0] <= max * (1.0 + 1e-12));
        prop_assert!(big.data()[0] >= max * (1.0 / n as f64).powf(1.0 / 5000.0) * (1.0 - 1e-12));
        let p2 = eval(&[1, n], data, |g, x| g.lp_pool(x, &[1], 2.0).unwrap());
        prop_assert!(p2.data()[0] >= p1.data()[0] - 1e-12);
    }

    #[test]
    fn crop_then_stitch_is_identity(h in 1usize..70, w in 1usize..70, k in 1usize..4, bands in 1usize..3) {
        let p = 16 * k;
        let data: Vec<f32> = (0..bands * h * w).map(|i| (i % 97) as f32).collect();
        let m: Vec<f32> = (0..h * w).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let s = Scene::new("s", Tensor::from_vec(&[bands, h, w], data).unwrap(), Some(Tensor::from_vec(&[h, w], m).unwrap())).unwrap();
        let set = crop(&s, p).unwrap();
        prop_assert_eq!(set.patches.len(), h.div_ceil(p) * w.div_ceil(p));
        let masks: Vec<Tensor<f32>> = set.patches.iter().map(|q| q.mask.clone().unwrap()).collect();
        prop_assert_eq!(&stitch(&set, &masks).unwrap(), s.mask.as_ref().unwrap());
        for b in 0..bands {
            let maps: Vec<Tensor<f32>> = set.patches.iter()
                .map(|q| Tensor::from_vec(&[p, p], q.bands.data()[b * p * p..(b + 1) * p * p].to_vec()).unwrap())
                .collect();
            let back = stitch(&set, &maps).unwrap();
            prop_assert_eq!(back.data(), &s.bands.data()[b * h * w..(b + 1) * h * w]);
        }
    }

    #[test]
    fn merge_is_associative_and_commutative(a in counts(), b in counts(), c in counts()) {
        prop_assert_eq!((a + b) + c, a + (b + c));
        prop_assert_eq!(a + b, b + a);
        prop_assert_eq!(a.merge(ConfusionCounts::default()), a);
        prop_assert_eq!([a, b, c].into_iter().sum::<ConfusionCounts>(), a + b + c);
    }

    #[test]
    fn split_masks_merge_to_whole(p in mask(64), t in mask(64), cut in 0usize..64) {
        let whole = confusion(&p, &t).unwrap();
        let parts = confusion(&p[..cut], &t[..cut]).unwrap() + confusion(&p[cut..], &t[cut..]).unwrap();
        prop_assert_eq!(whole, parts);
        prop_assert_eq!(whole.total(), 64);
    }

    #[test]
    fn f1_is_harmonic_mean_and_iou_is_smallest(c in counts()) {
        let m = c.metrics();
        if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
            if p + r > 0.0 {
                prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
        if c.tp > 0 {
            let iou = m.miou.unwrap();
            prop_assert!(iou <= m.precision.unwrap().min(m.recall.unwrap()) + 1e-15);
        }
        for v in [m.miou, m.precision, m.recall, m.f1, m.oa].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn schedule_decays_from_lr0_to_zero(total in 1usize..5000, power in 0.1f64..3.0) {
        let cfg = TrainConfig { poly_power: power, ..TrainConfig::paper() };
        prop_assert_eq!(lr_schedule(0, total, &cfg).unwrap(), 0.001);
        prop_assert_eq!(lr_schedule(total, total, &cfg).unwrap(), 0.0);
        let mut last = f64::INFINITY;
        for s in (0..=total).step_by((total / 50).max(1)) {
            let lr = lr_schedule(s, total, &cfg).unwrap();
            prop_assert!(lr <= last && lr >= 0.0);
            last = lr;
        }
    }

    #[test]
    fn conv_macs_follow_closed_form(
        n in 1usize..3, g in 1usize..4, cpg in 1usize..4, opg in 1usize..4,
        k in 1usize..6, stride in 1usize..4, pad in 0usize..3, dil in 1usize..3,
        h in 1usize..20, w in 1usize..20,
    ) {
        let spec = ConvSpec::new(stride, pad, dil, g);
        let geom = ConvGeom::new(&[n, g * cpg, h, w], &[g * opg, cpg, k, k], spec);
        let span = dil * (k - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            prop_assert_eq!(geom.unwrap_err().kind(), "degenerate_output");
        } else {
            let geom = geom.unwrap();
            let ho = (h + 2 * pad - span) / stride + 1;
            let wo = (w + 2 * pad - span) / stride + 1;
            let mut loops = 0u64;
            for _ in 0..n * g * opg * ho * wo {
                for _ in 0..cpg * k * k {
                    loops += 1;
                }
            }
            prop_assert_eq!(geom.macs(), loops);
            prop_assert_eq!(geom.out_shape(), [n, g * opg, ho, wo]);
        }
    }

    #[test]
    fn loss_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 1..30), seed in any::<u64>()) {
        let n = p.len();
        let mut y: Vec<f64> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        y[0] = 1.0;
        let mut g = Graph::<f64>::inference();
        let v = g.input(Tensor::from_vec(&[1, 1, 1, n], p).unwrap()).unwrap();
        let l = g.dice_bce(v, &Tensor::from_vec(&[1, 1, 1, n], y.clone()).unwrap()).unwrap();
        prop_assert!(g.value(l)[0] >= 0.0);
        let mut g = Graph::<f64>::inference();
        let v = g.input(Tensor::from_vec(&[1, 1, 1, n], y.clone()).unwrap()).unwrap();
        let l = g.dice_bce(v, &Tensor::from_vec(&[1, 1, 1, n], y).unwrap()).unwrap();
        prop_assert!(g.value(l)[0] < 1e-5);
    }

    #[test]
    fn upsampling_preserves_constants(c in -5.0f64..5.0, h in 1usize..6, w in 1usize..6) {
        let y = eval(&[1, 2, h, w], vec![c; 2 * h * w], |g, x| g.upsample2x(x).unwrap());
        prop_assert_eq!(y.shape(), &[1, 2, 2 * h, 2 * w]);
        prop_assert!(y.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn file_formats_round_trip(h in 1usize..20, w in 1usize..20, m in mask(400), seed in any::<u32>()) {
        let m = m[..h * w].to_vec();
        let (hh, ww, back) = decode_pgm(&encode_pgm(h, w, &m)).unwrap();
        prop_assert_eq!((hh, ww), (h, w));
        prop_assert_eq!(back, m);
        let data: Vec<f32> = (0..h * w).map(|i| f32::from_bits(seed.wrapping_add(i as u32) & 0x3fff_ffff)).collect();
        let r = Raster::new(h, w, data).unwrap();
        prop_assert_eq!(Raster::from_bytes(&r.to_bytes()).unwrap(), r);
    }
}
