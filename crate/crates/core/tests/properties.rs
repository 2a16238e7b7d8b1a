use dfcil_core::backbone::{cosine_logits_values, BackboneConfig, Model};
use dfcil_core::continual_norm::{
    cn_forward, gn_normalize, update_running_moments, BatchMoments, CnLayerState, LayerMoments, Mode,
    NormConfig,
};
use dfcil_core::datasets::{
    build_task_schedule, class_mean_image, ClassOrder, ImageShape, LabeledImageSet, SplitTag,
};
use dfcil_core::losses::{
    class_centroids, cn_ce_loss, distillation_loss, idc_loss, margin_loss, pseudo_labels, total_loss, Domain,
    LossTerms, LossWeights,
};
use dfcil_core::params::ParamStore;
use dfcil_core::synthesis::{r_cn_values, r_l2, r_tv};
use dfcil_core::continual_norm::CnSnapshot;
use dfcil_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data)
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn cn_layer(c: usize) -> (CnLayerState, ParamStore) {
    let mut store = ParamStore::default();
    let s = store.add("scale", Tensor::ones(&[c]), false);
    let b = store.add("shift", Tensor::zeros(&[c]), false);
    (CnLayerState::new(c, &NormConfig::default(), s, b).unwrap(), store)
}

// Row-major rows of width `w`, each with norm ≥ 0.1 so normalization is
// far from its epsilon guard.
fn rows(n: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    values(n * w, -1.0, 1.0).prop_filter("row norm ≥ 0.1", move |v| {
        v.chunks(w).all(|r| r.iter().map(|x| x * x).sum::<f64>() >= 0.01)
    })
}

fn scalar(g: &Graph, v: f64) -> dfcil_tensor::Var {
    g.constant(Tensor::scalar(v))
}

// (B, C, D) with B·D ≥ 16.
fn bcd() -> impl Strategy<Value = (usize, usize, usize)> {
    (2usize..5, prop::sample::select(vec![2usize, 4, 8, 16]), 4usize..10)
        .prop_filter("B·D ≥ 16", |(b, _, d)| b * d >= 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cn_train_output_is_standardized_per_channel(
        (b, c, d) in bcd(),
        seed in any::<u64>(),
        scale in 0.5f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[b, c, d], |_| scale * rand::Rng::random_range(&mut rng, -1.0..1.0));
        let (mut st, store) = cn_layer(c);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let xv = g.constant(x);
        let (scale_v, shift_v) = (p[st.affine_scale], p[st.affine_shift]);
        let y = cn_forward(&g, xv, &mut st, scale_v, shift_v, Mode::Train).unwrap();
        let y = g.value(y);
        let n = (b * d) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| y.data()[(i * c + ch) * d + j]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-5, "channel {ch} mean {mean}");
            prop_assert!((var - 1.0).abs() <= 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn gn_is_shift_invariant_per_group(
        (b, c, d) in bcd(),
        seed in any::<u64>(),
        shifts in values(64, -50.0, 50.0),
    ) {
        let g_count = dfcil_core::continual_norm::default_groups(c);
        let per = c / g_count;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[b, c, d], |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let shifted = Tensor::from_fn(&[b, c, d], |i| {
            let (bi, ch) = (i / (c * d), (i / d) % c);
            x.data()[i] + shifts[(bi * g_count + ch / per) % shifts.len()]
        });
        let (y0, _, _) = gn_normalize(&x, g_count, 1e-5).unwrap();
        let (y1, _, _) = gn_normalize(&shifted, g_count, 1e-5).unwrap();
        prop_assert!(y0.max_abs_diff(&y1) <= 1e-6);
    }

    #[test]
    fn running_moments_converge_geometrically(
        momentum in 0.01f64..0.99,
        target in values(2, -3.0, 3.0),
        steps in 1usize..40,
    ) {
        let (mut st, _) = cn_layer(2);
        let g_count = st.num_groups;
        let start_mean = st.bn_running_mean.clone();
        let start_var = st.bn_running_var.clone();
        let batch = BatchMoments {
            gn_mean: Some(Tensor::full(&[1, g_count], 0.5)),
            gn_var: Some(Tensor::full(&[1, g_count], 2.0)),
            bn_mean: tensor(&[2], target.clone()),
            bn_var: tensor(&[2], target.iter().map(|v| v.abs()).collect()),
        };
        for _ in 0..steps {
            update_running_moments(&mut st, &batch, momentum).unwrap();
        }
        let factor = (1.0 - momentum).powi(steps as i32);
        for k in 0..2 {
            let want = factor * (start_mean[k] - target[k]).abs();
            prop_assert!(((st.bn_running_mean[k] - target[k]).abs() - want).abs() <= 1e-12);
            let tv = target[k].abs();
            let want = factor * (start_var[k] - tv).abs();
            prop_assert!(((st.bn_running_var[k] - tv).abs() - want).abs() <= 1e-12);
        }
        let want = factor * (0.0f64 - 0.5).abs();
        prop_assert!(((st.gn_running_mean[0] - 0.5).abs() - want).abs() <= 1e-12);
    }

    #[test]
    fn cosine_argmax_ignores_feature_scale(
        f in rows(3, 6),
        theta in values(5 * 6, -1.0, 1.0),
        eta in 0.1f64..10.0,
        s in prop::sample::select(vec![1e-3, 0.5, 7.0, 1000.0]),
    ) {
        let f = tensor(&[3, 6], f);
        let theta = tensor(&[5, 6], theta);
        let base = cosine_logits_values(&f, &theta, eta);
        let scaled = cosine_logits_values(&f.scale(s), &theta, eta);
        prop_assert_eq!(base.argmax_rows(), scaled.argmax_rows());
        prop_assert_eq!(pseudo_labels(&base), pseudo_labels(&scaled));
        prop_assert!(base.max_abs_diff(&scaled) <= 1e-6);
    }

    #[test]
    fn losses_respect_bounds(
        a in rows(4, 6),
        b in values(4 * 6, -1.0, 1.0),
        theta in values(3 * 6, -1.0, 1.0),
        s in 0.01f64..100.0,
    ) {
        let g = Graph::new();
        let fa = g.constant(tensor(&[4, 6], a.clone()));
        let fs = g.constant(tensor(&[4, 6], a.iter().map(|v| v * s).collect()));
        let fb = g.constant(tensor(&[4, 6], b));
        let th = g.constant(tensor(&[3, 6], theta));
        let eta = scalar(&g, 2.0);
        let labels = [0, 1, 2, 1];
        let ce = g.scalar_value(cn_ce_loss(&g, fa, th, eta, &labels).unwrap());
        let ce_s = g.scalar_value(cn_ce_loss(&g, fs, th, eta, &labels).unwrap());
        prop_assert!(ce >= 0.0);
        prop_assert!((ce - ce_s).abs() <= 1e-9);
        let d = g.scalar_value(distillation_loss(&g, fa, fb).unwrap());
        prop_assert!((0.0..=2.0).contains(&d));
        let m = g.scalar_value(margin_loss(&g, fa, &[0, 0, 1, 1], th, &[2], 0.5).unwrap());
        prop_assert!(m >= 0.0);
        let cls = [0, 1, 2];
        let cs = class_centroids(&g, fa, &labels, &cls, Domain::Source).unwrap();
        let ct = class_centroids(&g, fb, &labels, &cls, Domain::Target).unwrap();
        let present: Vec<usize> = cls.iter().copied()
            .filter(|&k| cs.row_of(k).is_some() && ct.row_of(k).is_some()).collect();
        let idc = g.scalar_value(idc_loss(&g, &cs, &ct, 5.0, &present).unwrap());
        prop_assert!(idc >= 0.0);
    }

    #[test]
    fn margin_is_monotone_in_similarities(
        a_true in 0.0f64..3.0,
        a_true2 in 0.0f64..3.0,
        a_neg in 0.0f64..3.0,
        a_neg2 in 0.0f64..3.0,
    ) {
        // Anchor on the x-axis; cosine to an embedding at angle a is cos a.
        let loss = |t: f64, n: f64| {
            let g = Graph::new();
            let f = g.constant(tensor(&[1, 2], vec![1.0, 0.0]));
            let th = g.constant(tensor(&[2, 2], vec![t.cos(), t.sin(), n.cos(), -n.sin()]));
            g.scalar_value(margin_loss(&g, f, &[0], th, &[1], 0.5).unwrap())
        };
        let (close, far) = if a_true <= a_true2 { (a_true, a_true2) } else { (a_true2, a_true) };
        prop_assert!(loss(close, a_neg) <= loss(far, a_neg) + 1e-12);
        let (near_neg, far_neg) = if a_neg <= a_neg2 { (a_neg, a_neg2) } else { (a_neg2, a_neg) };
        prop_assert!(loss(a_true, near_neg) >= loss(a_true, far_neg) - 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(
        parts in values(4, 0.0, 3.0),
        w in values(3, 0.0, 10.0),
        bump in 0.0f64..5.0,
        which in 0usize..3,
    ) {
        let g = Graph::new();
        let terms = LossTerms {
            ce: scalar(&g, parts[0]),
            dist: Some(scalar(&g, parts[1])),
            idc: Some(scalar(&g, parts[2])),
            margin: Some(scalar(&g, parts[3])),
        };
        let base = LossWeights { dist: w[0], idc: w[1], margin: w[2], ..LossWeights::default() };
        let mut more = base;
        match which {
            0 => more.dist += bump,
            1 => more.idc += bump,
            _ => more.margin += bump,
        }
        let (t0, _) = total_loss(&g, &terms, &base).unwrap();
        let (t1, _) = total_loss(&g, &terms, &more).unwrap();
        let diff = g.scalar_value(t1) - g.scalar_value(t0);
        prop_assert!((diff - bump * parts[1 + which]).abs() <= 1e-9);
    }

    #[test]
    fn regularizers_nonnegative_and_homogeneous(px in values(2 * 3 * 4 * 4, 0.0, 1.0)) {
        let x = tensor(&[2, 3, 4, 4], px);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let x2 = g.constant(x.scale(2.0));
        let (tv, tv2) = (g.scalar_value(r_tv(&g, xv)), g.scalar_value(r_tv(&g, x2)));
        let (l2, l22) = (g.scalar_value(r_l2(&g, xv)), g.scalar_value(r_l2(&g, x2)));
        prop_assert!(tv >= 0.0 && l2 >= 0.0);
        prop_assert!((tv2 - 4.0 * tv).abs() <= 1e-9 * tv.max(1.0));
        prop_assert!((l22 - 2.0 * l2).abs() <= 1e-9 * l2.max(1.0));
    }

    #[test]
    fn schedules_partition_the_classes(
        sizes in prop::collection::vec(1usize..5, 1..6),
        seed in any::<u64>(),
    ) {
        let k: usize = sizes.iter().sum();
        let s = build_task_schedule(k, &sizes, &ClassOrder::Seeded(seed)).unwrap();
        s.validate().unwrap();
        let mut all: Vec<usize> = s.tasks().iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
        for t in 1..s.num_tasks() {
            let prev = s.seen_classes(t - 1);
            let now = s.seen_classes(t);
            prop_assert!(prev.iter().all(|c| now.contains(c)));
        }
    }

    #[test]
    fn mean_image_matches_brute_force_and_padding_keeps_interior(
        px in prop::collection::vec(any::<u8>(), 6 * 9 * 9),
        labels in prop::collection::vec(0usize..2, 6),
    ) {
        let shape = ImageShape { height: 9, width: 9, channels: 1 };
        let mut labels = labels;
        labels[0] = 0;
        let set = LabeledImageSet::from_u8(shape, 2, &px, labels.clone(), SplitTag::Train).unwrap();
        let m = class_mean_image(&set, 0).unwrap();
        let members: Vec<usize> = (0..6).filter(|&i| labels[i] == 0).collect();
        for p in 0..81 {
            let brute = members.iter().map(|&i| px[i * 81 + p] as f64 / 255.0).sum::<f64>() / members.len() as f64;
            prop_assert!((m.pixels[p] - brute).abs() <= 1e-6);
        }
        let padded = set.pad_to(13);
        for i in 0..6 {
            for y in 0..9 {
                for x in 0..9 {
                    prop_assert_eq!(padded.image(i)[(y + 2) * 13 + x + 2], set.image(i)[y * 9 + x]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn features_are_finite_on_unit_range_inputs(seed in any::<u64>(), extreme in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig { in_channels: 3, stem_width: 8, widths: [8, 16, 16], ..BackboneConfig::default() };
        let mut model = Model::new(cfg, &mut rng).unwrap();
        model.expand_classifier(3, &mut rng).unwrap();
        let x = match extreme {
            0 => Tensor::zeros(&[3, 3, 8, 8]),
            1 => Tensor::ones(&[3, 3, 8, 8]),
            _ => Tensor::from_fn(&[3, 3, 8, 8], |_| rand::Rng::random_range(&mut rng, 0.0..=1.0)),
        };
        {
            let g = Graph::new();
            let p = model.params.bind(&g, false);
            let xv = g.constant(x.clone());
            let f = model.forward_features(&g, &p, xv, Mode::Train).unwrap();
            prop_assert!(g.value(f).is_finite());
        }
        let f = model.embed(&x, 2).unwrap();
        prop_assert_eq!(f.shape(), &[3, 16]);
        prop_assert!(f.is_finite());
        prop_assert!(model.predict_logits(&x, 2).unwrap().is_finite());
    }

    #[test]
    fn moment_distance_vanishes_on_matched_moments(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig { in_channels: 1, stem_width: 4, widths: [4, 8, 8], ..BackboneConfig::default() };
        let model = Model::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rand::Rng::random_range(&mut rng, 0.0..1.0));
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let xv = g.constant(x);
        let pass = model.forward_capture(&g, &p, xv).unwrap();
        let read = |v: Option<dfcil_tensor::Var>| v.map_or(Vec::new(), |v| g.value(v).data().to_vec());
        let layers: Vec<LayerMoments> = pass.captured.iter().map(|c| LayerMoments {
            gn_mean: read(c.gn_mean),
            gn_var: read(c.gn_var),
            bn_mean: read(Some(c.bn_mean)),
            bn_var: read(Some(c.bn_var)),
        }).collect();
        let snap = CnSnapshot::from_layers(layers.clone());
        prop_assert_eq!(r_cn_values(&layers, &snap).unwrap(), 0.0);
        let mut off = layers.clone();
        off[0].bn_mean[0] += 0.25;
        prop_assert!((r_cn_values(&off, &snap).unwrap() - 0.25).abs() <= 1e-12);
    }
}
