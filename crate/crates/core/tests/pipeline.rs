use std::fs;

use dfcil_core::backbone::BackboneConfig;
use dfcil_core::checkpoint::Checkpoint;
use dfcil_core::datasets::{build_task_schedule, ClassOrder, Dataset};
use dfcil_core::losses::LossWeights;
use dfcil_core::synthesis::{load_replay, synthesize_batch, SynthesisConfig};
use dfcil_core::toy::{make_dataset, ToySpec};
use dfcil_core::trainer::{
    evaluate, run_pipeline, Learner, PipelineConfig, ReplayMode, TrainConfig, ACCURACY_CSV, SUMMARY_JSON,
    SYNTHETIC_DIR,
};
use dfcil_core::Error;
use dfcil_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(classes: usize) -> Dataset {
    make_dataset(&ToySpec { num_classes: classes, train_per_class: 30, test_per_class: 20, ..ToySpec::default() })
        .unwrap()
}

fn small(epochs: usize, iterations: usize) -> PipelineConfig {
    PipelineConfig {
        backbone: BackboneConfig { stem_width: 8, widths: [8, 16, 16], ..BackboneConfig::default() },
        train: TrainConfig { epochs, batch_size: 20, ..TrainConfig::default() },
        synthesis: SynthesisConfig { iterations, images_per_class: 10, batch_size: 20, ..SynthesisConfig::default() },
        ..PipelineConfig::default()
    }
}

fn finetune(mut cfg: PipelineConfig) -> PipelineConfig {
    cfg.replay = ReplayMode::None;
    cfg.weights = LossWeights { dist: 0.0, idc: 0.0, margin: 0.0, ..LossWeights::default() };
    cfg
}

#[test]
fn single_task_schedule_needs_no_synthesis() {
    let data = toy(2);
    let schedule = build_task_schedule(2, &[2], &ClassOrder::Ascending).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (log, _) = run_pipeline(&data, &schedule, &small(10, 5), Some(dir.path())).unwrap();
    assert_eq!(log.tasks.len(), 1);
    assert_eq!(log.tasks[0].replay_images, 0);
    assert!(!dir.path().join(SYNTHETIC_DIR).exists());
    let rows = fs::read_to_string(dir.path().join(ACCURACY_CSV)).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(log.tasks[0].accuracy >= 0.95, "{}", log.tasks[0].accuracy);
}

#[test]
fn single_class_task_is_trivially_accurate() {
    let data = toy(3);
    let schedule = build_task_schedule(3, &[1, 2], &ClassOrder::Ascending).unwrap();
    let mut learner = Learner::new(small(1, 0), 1, None).unwrap();
    let rec = learner.train_first_task(&data, &schedule).unwrap();
    assert_eq!(rec.accuracy, 1.0);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = toy(4);
    let schedule = build_task_schedule(4, &[2, 2], &ClassOrder::Ascending).unwrap();
    let cfg = small(2, 3);
    let (a, ma) = run_pipeline(&data, &schedule, &cfg, None).unwrap();
    let (b, mb) = run_pipeline(&data, &schedule, &cfg, None).unwrap();
    assert_eq!(a.accuracies(), b.accuracies());
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(ma, mb);
    let mut other = cfg.clone();
    other.train.seed = 9;
    let (_, mc) = run_pipeline(&data, &schedule, &other, None).unwrap();
    assert_ne!(ma, mc);
}

#[test]
fn evaluated_classes_accumulate_and_accuracy_is_a_fraction() {
    let data = toy(6);
    let schedule = build_task_schedule(6, &[2, 2, 2], &ClassOrder::Seeded(3)).unwrap();
    let (log, model) = run_pipeline(&data, &schedule, &small(1, 2), None).unwrap();
    assert_eq!(log.tasks.len(), 3);
    for (t, rec) in log.tasks.iter().enumerate() {
        let mut want = schedule.seen_classes(t);
        want.sort_unstable();
        assert_eq!(rec.seen_classes, want);
        assert!((0.0..=1.0).contains(&rec.accuracy));
        assert_eq!(rec.per_task.len(), t + 1);
    }
    assert_eq!(model.num_classes(), 6);
}

#[test]
fn incremental_step_leaves_the_frozen_model_untouched() {
    let data = toy(4);
    let schedule = build_task_schedule(4, &[2, 2], &ClassOrder::Ascending).unwrap();
    let mut learner = Learner::new(small(2, 3), 1, None).unwrap();
    learner.train_first_task(&data, &schedule).unwrap();
    let before = learner.model.clone();
    let out = learner.incremental_step(&data, &schedule).unwrap();
    assert_eq!(out.frozen.model(), &before);
    assert_ne!(learner.model.params, before.params);
    assert_eq!(out.record.replay_images, 20);
    assert!(!out.record.degraded);
    let mut counts = [0usize; 4];
    for b in &out.replay {
        assert_eq!(b.source_task, 0);
        for &l in &b.labels {
            counts[l] += 1;
        }
    }
    assert_eq!(counts, [10, 10, 0, 0]);
}

#[test]
fn no_replay_is_flagged_degraded() {
    let data = toy(4);
    let schedule = build_task_schedule(4, &[2, 2], &ClassOrder::Ascending).unwrap();
    let mut learner = Learner::new(finetune(small(1, 0)), 1, None).unwrap();
    learner.train_first_task(&data, &schedule).unwrap();
    let out = learner.incremental_step(&data, &schedule).unwrap();
    assert!(out.record.degraded);
    assert_eq!(out.record.replay_images, 0);
}

#[test]
fn replay_reduces_forgetting_against_finetuning() {
    let data = toy(4);
    let schedule = build_task_schedule(4, &[2, 2], &ClassOrder::Ascending).unwrap();
    let cfg = small(10, 30);
    let (with, _) = run_pipeline(&data, &schedule, &cfg, None).unwrap();
    let (naive, _) = run_pipeline(&data, &schedule, &finetune(cfg), None).unwrap();
    let old_with = with.tasks[1].per_task[0];
    let old_naive = naive.tasks[1].per_task[0];
    assert!(old_with >= old_naive + 0.2, "old-class accuracy {old_with} vs finetune {old_naive}");
}

#[test]
fn synthesis_descends_and_beats_raw_means_on_a_trained_model() {
    let data = toy(2);
    let schedule = build_task_schedule(2, &[2], &ClassOrder::Ascending).unwrap();
    let mut learner = Learner::new(small(6, 0), 1, None).unwrap();
    learner.train_first_task(&data, &schedule).unwrap();
    let frozen = learner.model.clone_frozen();
    let snapshot = frozen.snapshot();
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let s = data.shape();
    let cfg = SynthesisConfig { iterations: 50, ..SynthesisConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = synthesize_batch(
        &frozen,
        &snapshot,
        &learner.means,
        &labels,
        [s.channels, s.height, s.width],
        &cfg,
        0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(batch.labels, labels);
    assert_eq!(batch.trace.len(), 50);
    assert!(batch.final_objective <= batch.trace[0]);
    let head: f64 = batch.trace[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = batch.trace[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "objective {head} → {tail}");
    assert!(batch.images.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let acc = |x: &Tensor, labels: &[usize]| {
        let pred = frozen.model().predict_logits(x, 64).unwrap().argmax_rows();
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
    };
    let mean_imgs: Vec<Tensor> = [0usize, 1].iter().map(|c| learner.means[c].to_tensor()).collect();
    let mean_batch = Tensor::concat(&mean_imgs.iter().collect::<Vec<_>>(), 0);
    assert!(acc(&batch.images, &labels) >= acc(&mean_batch, &[0, 1]));
}

#[test]
fn run_directory_holds_checkpoints_and_replay() {
    let data = toy(4);
    let schedule = build_task_schedule(4, &[2, 2], &ClassOrder::Ascending).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (log, model) = run_pipeline(&data, &schedule, &small(1, 2), Some(dir.path())).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoints/task_1.ckpt")).unwrap();
    assert_eq!(ck.model, model);
    assert_eq!(ck.seen_classes, vec![0, 1, 2, 3]);
    assert_eq!(ck.mean_images.len(), 4);
    let replay = load_replay(&dir.path().join(SYNTHETIC_DIR).join("task_1.bin")).unwrap();
    assert_eq!(replay.iter().map(|b| b.labels.len()).sum::<usize>(), log.tasks[1].replay_images);
    let acc = evaluate(&ck.model, &data.test, &ck.seen_classes, 50).unwrap();
    assert_eq!(acc, log.tasks[1].accuracy);
}

#[test]
fn abort_flushes_a_partial_log() {
    let mut data = toy(4);
    // Class 3 has no test images, so evaluation after task 2 fails.
    let keep: Vec<usize> = (0..data.test.len()).filter(|&i| data.test.labels()[i] != 3).collect();
    data.test = data.test.subset(&keep);
    let schedule = build_task_schedule(4, &[2, 1, 1], &ClassOrder::Ascending).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&data, &schedule, &small(1, 1), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Evaluation(_)), "{err}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(summary["status"], "aborted");
    assert_eq!(summary["accuracies"].as_array().unwrap().len(), 2);
}

#[test]
fn empty_evaluation_union_is_an_error() {
    let data = toy(2);
    let learner = Learner::new(small(1, 0), 1, None).unwrap();
    let empty = data.test.subset(&[]);
    assert!(matches!(evaluate(&learner.model, &empty, &[0, 1], 10), Err(Error::Evaluation(_))));
}
