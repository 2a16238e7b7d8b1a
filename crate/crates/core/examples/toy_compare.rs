use dfcil_core::backbone::BackboneConfig;
use dfcil_core::datasets::{build_task_schedule, ClassOrder};
use dfcil_core::toy::{make_dataset, ToySpec};
use dfcil_core::trainer::{run_pipeline, PipelineConfig, ReplayMode};
use dfcil_core::losses::LossWeights;

fn main() {
    let spec = ToySpec { num_classes: 4, ..ToySpec::default() };
    let data = make_dataset(&spec).unwrap();
    let schedule = build_task_schedule(4, &[2, 2], &ClassOrder::Ascending).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.backbone = BackboneConfig { stem_width: 8, widths: [8, 16, 16], ..BackboneConfig::default() };
    cfg.train.epochs = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    cfg.train.batch_size = 20;
    cfg.synthesis.iterations = std::env::var("ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(50);
    cfg.synthesis.images_per_class = 20;
    cfg.synthesis.batch_size = 20;
    for (name, replay, w) in [
        ("default", ReplayMode::Synthesize, cfg.weights),
        ("mean_noise", ReplayMode::MeanNoise, cfg.weights),
        ("naive", ReplayMode::None, LossWeights { dist: 0.0, idc: 0.0, margin: 0.0, ..LossWeights::default() }),
    ] {
        let mut c = cfg.clone();
        c.replay = replay;
        c.weights = w;
        let t = std::time::Instant::now();
        let (log, _) = run_pipeline(&data, &schedule, &c, None).unwrap();
        println!("{name}: {:?} per_task {:?} ({:.1}s)", log.accuracies(), log.tasks.last().unwrap().per_task, t.elapsed().as_secs_f64());
    }
}
