//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! The property criteria always run. The BloodMNIST criteria need
//! `DFCIL_BLOODMNIST=<path to bloodmnist.npz>`; the full-budget ones also
//! need `DFCIL_FULL_SCALE=1`. Run directories go to `DFCIL_ACCEPTANCE_OUT`
//! (default: a temporary directory).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dfcil_cli::config::{Ablation, ExperimentConfig};
use dfcil_cli::run::{execute, prepare};
use dfcil_core::backbone::{cosine_logits_values, BackboneConfig, Model};
use dfcil_core::continual_norm::{
    cn_forward, gn_normalize, CnLayerState, CnSnapshot, LayerMoments, Mode, NormConfig,
};
use dfcil_core::datasets::{ImageShape, MeanImage};
use dfcil_core::losses::{
    class_centroids, cn_ce_loss, distillation_loss, idc_loss, margin_loss, Domain,
};
use dfcil_core::params::ParamStore;
use dfcil_core::synthesis::{initial_images, r_cn_values, synthesis_objective, synthesize_batch, SynthesisConfig};
use dfcil_core::trainer::MetricsLog;
use dfcil_tensor::{numeric_gradient, relative_error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

// ---------------------------------------------------------------- helpers

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec())
}

fn grad_error(x0: &Tensor, build: impl Fn(&Graph, Var) -> Var) -> f64 {
    let eval = |x: &Tensor, grad: bool| {
        let g = Graph::new();
        let xv = if grad { g.leaf(x.clone()) } else { g.constant(x.clone()) };
        let y = build(&g, xv);
        (g.scalar_value(y), grad.then(|| g.backward(y).get_or_zeros(xv, x.shape())))
    };
    let analytic = eval(x0, true).1.unwrap();
    let numeric = numeric_gradient(x0, 1e-6, |x| eval(x, false).0);
    if numeric.data().iter().all(|v| v.abs() < 1e-9) {
        return f64::INFINITY;
    }
    relative_error(&analytic, &numeric, 1e-8)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tiny_model(rng: &mut ChaCha8Rng, classes: usize) -> Model {
    let cfg = BackboneConfig { in_channels: 1, stem_width: 4, widths: [4, 4, 8], ..BackboneConfig::default() };
    let mut m = Model::new(cfg, rng).unwrap();
    m.expand_classifier(classes, rng).unwrap();
    let warm = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let g = Graph::new();
    let p = m.params.bind(&g, false);
    let x = g.constant(warm);
    m.forward_features(&g, &p, x, Mode::Train).unwrap();
    m
}

// --------------------------------------------------------- property suite

fn normalization_oracle() -> Outcome {
    let x = t(&[1, 2, 2], &[1., 3., 5., 7.]);
    let (y, _, _) = gn_normalize(&x, 1, 1e-12).unwrap();
    let gn_want = [-3.0 / 5f64.sqrt(), -1.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt(), 3.0 / 5f64.sqrt()];
    let gn_err = y.data().iter().zip(gn_want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let layer = |c: usize, eps: f64| {
        let mut store = ParamStore::default();
        let s = store.add("s", Tensor::ones(&[c]), false);
        let b = store.add("b", Tensor::zeros(&[c]), false);
        let cfg = NormConfig { eps, groups: Some(1), ..NormConfig::default() };
        (CnLayerState::new(c, &cfg, s, b).unwrap(), store)
    };
    let train = |x: &Tensor, st: &mut CnLayerState, store: &ParamStore| {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let (s, b) = (p[st.affine_scale], p[st.affine_shift]);
        let xv = g.constant(x.clone());
        (*g.value(cn_forward(&g, xv, st, s, b, Mode::Train).unwrap())).clone()
    };
    let (mut st, store) = layer(2, 1e-12);
    let y = train(&x, &mut st, &store);
    let cn_err = y.data().iter().zip([-1.0, 1.0, -1.0, 1.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Per-channel moments on a larger batch at the default eps.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, c, d) = (4, 8, 9);
    let xb = Tensor::from_fn(&[b, c, d], |_| rng.random_range(-3.0..3.0));
    let (mut st, store) = layer(c, NormConfig::default().eps);
    let yb = train(&xb, &mut st, &store);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for ch in 0..c {
        let v: Vec<f64> = (0..b).flat_map(|i| (0..d).map(move |j| (i * c + ch) * d + j)).map(|k| yb.data()[k]).collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(m.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    verdict(
        gn_err <= 1e-5 && cn_err <= 1e-5 && worst_mean <= 1e-4 && worst_var <= 1e-4,
        format!(
            "gn err {gn_err:.1e}, cn err {cn_err:.1e} (tol 1e-5); channel |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e} (tol 1e-4)"
        ),
    )
}

fn loss_closed_forms() -> Outcome {
    let g = Graph::new();
    let c = |shape: &[usize], d: &[f64]| g.constant(t(shape, d));
    let eye = c(&[2, 2], &[1., 0., 0., 1.]);

    let ce = g.scalar_value(cn_ce_loss(&g, c(&[1, 2], &[1., 0.]), eye, c(&[], &[1.0]), &[0]).unwrap());
    let ce_want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    // Four-decimal value and the exact closed form.
    let ce_ok = (ce - 0.3133).abs() <= 1e-4 && (ce - ce_want).abs() <= 1e-9;

    let cs = class_centroids(&g, eye, &[0, 1], &[0, 1], Domain::Source).unwrap();
    let ct = class_centroids(&g, eye, &[0, 1], &[0, 1], Domain::Target).unwrap();
    let idc = g.scalar_value(idc_loss(&g, &cs, &ct, 1.0, &[0, 1]).unwrap());
    let idc_want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
    let idc_ok = (idc - 0.5514).abs() <= 1e-4 && (idc - idc_want).abs() <= 1e-9;

    // Anchor e1; embeddings placed so their cosines to it are exact.
    let unit = |cos: f64| [cos, (1.0 - cos * cos).sqrt(), 0.0];
    let margin = |true_cos: f64, negs: &[f64]| {
        let mut rows = unit(true_cos).to_vec();
        for &n in negs {
            rows.extend([n, 0.0, (1.0 - n * n).sqrt()]);
        }
        let theta = c(&[1 + negs.len(), 3], &rows);
        let idx: Vec<usize> = (1..=negs.len()).collect();
        g.scalar_value(margin_loss(&g, c(&[1, 3], &[1., 0., 0.]), &[0], theta, &idx, 0.5).unwrap())
    };
    let hinge = [margin(0.9, &[0.1]), margin(0.9, &[0.6]), margin(0.9, &[0.6, 0.7])];
    let hinge_ok = hinge.iter().zip([0.0, 0.2, 0.5]).all(|(a, b)| (a - b).abs() <= 1e-9);

    let a = c(&[1, 2], &[1., 0.]);
    let dist: Vec<f64> = [[1., 0.], [0., 1.], [-1., 0.]]
        .iter()
        .map(|v| g.scalar_value(distillation_loss(&g, a, c(&[1, 2], v)).unwrap()))
        .collect();
    let dist_ok = dist.iter().zip([0.0, 1.0, 2.0]).all(|(x, y)| (x - y).abs() <= 1e-9);

    verdict(
        ce_ok && idc_ok && hinge_ok && dist_ok,
        format!(
            "cn_ce {ce:.6} (0.3133±1e-4), idc {idc:.6} (0.5514±1e-4), margin {:?} ([0, 0.2, 0.5] ±1e-9), distillation {:?} ([0, 1, 2] ±1e-9)",
            hinge.map(|v| (v * 1e9).round() / 1e9),
            dist.iter().map(|v| (v * 1e9).round() / 1e9).collect::<Vec<_>>()
        ),
    )
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let f = random(&[5, 8], &mut rng);
    let theta = random(&[4, 8], &mut rng);
    let labels = [0, 3, 1, 2, 3];
    errs.push((
        "cn_ce",
        grad_error(&f, |g, fv| cn_ce_loss(g, fv, g.constant(theta.clone()), g.constant(Tensor::scalar(1.5)), &labels).unwrap()),
    ));

    let anchors = random(&[4, 8], &mut rng);
    let theta5 = random(&[5, 8], &mut rng);
    errs.push((
        "margin",
        grad_error(&anchors, |g, a| margin_loss(g, a, &[0, 1, 1, 0], g.constant(theta5.clone()), &[2, 3, 4], 3.0).unwrap()),
    ));

    let src = random(&[6, 8], &mut rng);
    let tgt = random(&[6, 8], &mut rng);
    let lab = [0, 1, 2, 0, 1, 2];
    errs.push((
        "idc",
        grad_error(&src, |g, s| {
            let cs = class_centroids(g, s, &lab, &[0, 1, 2], Domain::Source).unwrap();
            let ct = class_centroids(g, g.constant(tgt.clone()), &lab, &[0, 1, 2], Domain::Target).unwrap();
            idc_loss(g, &cs, &ct, 5.0, &[0, 1, 2]).unwrap()
        }),
    ));

    let old = random(&[4, 8], &mut rng);
    let new = random(&[4, 8], &mut rng);
    errs.push(("distillation", grad_error(&new, |g, n| distillation_loss(g, g.constant(old.clone()), n).unwrap())));

    let model = tiny_model(&mut rng, 2);
    let frozen = model.clone_frozen();
    let snapshot = frozen.snapshot();
    let cfg = SynthesisConfig { alpha_tv: 0.5, alpha_l2: 0.1, alpha_cn: 2.0, ..SynthesisConfig::default() };
    let x0 = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(0.1..0.9));
    errs.push((
        "synthesis objective",
        grad_error(&x0, |g, x| {
            let p = frozen.bind(g);
            synthesis_objective(g, x, &[0, 1], &frozen, &p, &snapshot, &cfg).unwrap().0
        }),
    ));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(worst <= 1e-3, format!("relative error: {detail} (tol 1e-3)"))
}

fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 200;
    let mut same = 0;
    for _ in 0..trials {
        let f = random(&[4, 16], &mut rng);
        let theta = random(&[6, 16], &mut rng);
        let a = cosine_logits_values(&f, &theta, 1.3).argmax_rows();
        let b = cosine_logits_values(&f.scale(1000.0), &theta, 1.3).argmax_rows();
        same += usize::from(a == b);
    }

    let model = tiny_model(&mut rng, 2);
    let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let xv = g.constant(x);
    let pass = model.forward_capture(&g, &p, xv).unwrap();
    let read = |v: Option<Var>| v.map_or(Vec::new(), |v| g.value(v).data().to_vec());
    let layers: Vec<LayerMoments> = pass
        .captured
        .iter()
        .map(|c| LayerMoments {
            gn_mean: read(c.gn_mean),
            gn_var: read(c.gn_var),
            bn_mean: read(Some(c.bn_mean)),
            bn_var: read(Some(c.bn_var)),
        })
        .collect();
    let rcn = r_cn_values(&layers, &CnSnapshot::from_layers(layers.clone())).unwrap();

    let frozen = model.clone_frozen();
    let shape = ImageShape { height: 8, width: 8, channels: 1 };
    let means: BTreeMap<usize, MeanImage> = (0..2)
        .map(|k| (k, MeanImage { class_id: k, shape, pixels: (0..64).map(|i| (i + 10 * k) as f64 / 100.0).collect() }))
        .collect();
    let labels = [0, 1, 1, 0];
    let cfg = SynthesisConfig { iterations: 0, ..SynthesisConfig::default() };
    let (init, _) = initial_images(&means, &labels, [1, 8, 8], &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let batch = synthesize_batch(
        &frozen,
        &frozen.snapshot(),
        &means,
        &labels,
        [1, 8, 8],
        &cfg,
        0,
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let bitwise = batch.images.data().iter().zip(init.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    verdict(
        same == trials && rcn == 0.0 && bitwise,
        format!("argmax kept at 1000x in {same}/{trials}; r_cn on matched moments {rcn}; 0-iteration synthesis bitwise = {bitwise}"),
    )
}

// ------------------------------------------------------ BloodMNIST criteria

fn bloodmnist() -> Option<PathBuf> {
    std::env::var_os("DFCIL_BLOODMNIST").map(PathBuf::from).filter(|p| p.exists())
}

fn full_scale() -> bool {
    std::env::var("DFCIL_FULL_SCALE").is_ok_and(|v| v == "1")
}

fn out_root() -> PathBuf {
    std::env::var_os("DFCIL_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dfcil_acceptance"))
}

fn blood_run(data: &Path, name: &str, ablate: &[Ablation], desk: bool) -> Result<MetricsLog, String> {
    let mut cfg = ExperimentConfig { name: name.into(), output_dir: Some(out_root()), ..ExperimentConfig::default() };
    cfg.dataset.name = Some("bloodmnist".into());
    cfg.dataset.path = Some(data.to_path_buf());
    cfg.schedule.classes_per_task = vec![2, 2, 2, 2];
    if desk {
        cfg.dataset.train_per_class = Some(500);
        cfg.train.epochs = 20;
        cfg.synthesis.iterations = 500;
    }
    for &a in ablate {
        cfg.add_ablation(a);
    }
    let p = prepare(&cfg, None).map_err(|e| e.to_string())?;
    execute(&p).map_err(|e| e.to_string())
}

fn pct(log: &MetricsLog) -> Vec<f64> {
    log.accuracies().iter().map(|a| 100.0 * a).collect()
}

fn fmt_pct(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/")
}

fn desk_scale() -> Outcome {
    let Some(data) = bloodmnist() else {
        return Skip("DFCIL_BLOODMNIST not set to a local bloodmnist.npz".into());
    };
    let runs = [
        ("desk_default", vec![]),
        ("desk_no_synthesis", vec![Ablation::NoSynthesis]),
        ("desk_finetune", vec![Ablation::Finetune]),
    ];
    let mut logs = Vec::new();
    for (name, ab) in &runs {
        match blood_run(&data, name, ab, true) {
            Ok(l) => logs.push(pct(&l)),
            Err(e) => return Fail(format!("{name}: {e}")),
        }
    }
    let last = |v: &Vec<f64>| *v.last().unwrap();
    let (d, ns, ft) = (&logs[0], &logs[1], &logs[2]);
    let ok = last(d) - last(ns) >= 5.0 && last(d) - last(ft) >= 5.0 && d[0] >= 95.0;
    verdict(
        ok,
        format!(
            "default {} vs no_synthesis {} vs finetune {} (final margins ≥ 5 points, task-1 ≥ 95)",
            fmt_pct(d),
            fmt_pct(ns),
            fmt_pct(ft)
        ),
    )
}

const REFERENCE_DEFAULT: [f64; 4] = [99.70, 87.14, 74.74, 79.10];

fn full_scale_runs(data: &Path) -> Result<Vec<(&'static str, Vec<f64>)>, String> {
    let configs: [(&str, &[Ablation]); 8] = [
        ("full_default", &[]),
        ("full_norm_bn", &[Ablation::NormBn]),
        ("full_softmax_ce", &[Ablation::SoftmaxCe]),
        ("full_no_synthesis", &[Ablation::NoSynthesis]),
        ("full_no_margin", &[Ablation::NoMargin]),
        ("full_no_mean_init", &[Ablation::NoMeanInit]),
        ("full_no_idc", &[Ablation::NoIdc]),
        ("full_no_reg", &[Ablation::NoReg]),
    ];
    configs
        .iter()
        .map(|(name, ab)| blood_run(data, name, ab, false).map(|l| (*name, pct(&l))))
        .collect()
}

fn full_scale_trend(runs: Option<&Result<Vec<(&'static str, Vec<f64>)>, String>>) -> Outcome {
    let Some(runs) = runs else {
        return Skip("needs DFCIL_BLOODMNIST and DFCIL_FULL_SCALE=1".into());
    };
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Fail(e.clone()),
    };
    let d = &runs[0].1;
    let ok = d.len() == 4 && d.iter().zip(REFERENCE_DEFAULT).all(|(a, b)| (a - b).abs() <= 5.0);
    verdict(ok, format!("per-task {} vs 99.70/87.14/74.74/79.10 (±5 points)", fmt_pct(d)))
}

/// Tiers from best to worst; items in adjacent tiers may swap by < 3 points.
fn ordering_holds(tiers: &[Vec<f64>]) -> bool {
    for (i, upper) in tiers.iter().enumerate() {
        for (j, lower) in tiers.iter().enumerate().skip(i + 1) {
            let slack = if j == i + 1 { 3.0 } else { 0.0 };
            if upper.iter().any(|&a| lower.iter().any(|&b| a <= b - slack)) {
                return false;
            }
        }
    }
    true
}

fn ablation_ordering(runs: Option<&Result<Vec<(&'static str, Vec<f64>)>, String>>) -> Outcome {
    let Some(runs) = runs else {
        return Skip("needs DFCIL_BLOODMNIST and DFCIL_FULL_SCALE=1".into());
    };
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return Fail(e.clone()),
    };
    let fin: Vec<f64> = runs.iter().map(|(_, v)| *v.last().unwrap()).collect();
    let tiers = vec![vec![fin[0]], vec![fin[1], fin[2]], vec![fin[3], fin[4]], vec![fin[5], fin[6]], vec![fin[7]]];
    let detail = runs
        .iter()
        .zip(&fin)
        .map(|((n, _), a)| format!("{} {a:.2}", n.trim_start_matches("full_")))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(ordering_holds(&tiers), format!("final accuracy: {detail}"))
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches nothing here skips the suite.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    assert!(ordering_holds(&[vec![79.1], vec![72.9, 72.2], vec![68.6, 68.5], vec![63.05, 62.51], vec![37.91]]));
    assert!(!ordering_holds(&[vec![60.0], vec![70.0]]));

    let full = (bloodmnist().is_some() && full_scale()).then(|| full_scale_runs(&bloodmnist().unwrap()));
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("normalization oracle", Box::new(normalization_oracle)),
        ("loss closed forms", Box::new(loss_closed_forms)),
        ("gradient checks", Box::new(gradient_checks)),
        ("invariances", Box::new(invariances)),
        ("desk-scale BloodMNIST run", Box::new(desk_scale)),
        ("full-scale per-task trend", Box::new(|| full_scale_trend(full.as_ref()))),
        ("full-scale ablation ordering", Box::new(|| ablation_ordering(full.as_ref()))),
    ];
    let mut failed = 0;
    println!();
    for (name, check) in &criteria {
        let (tag, detail) = match check() {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("{tag}  {name}: {detail}");
    }
    println!();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
