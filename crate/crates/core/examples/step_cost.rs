//! Wall-clock cost of one full-size training step and one synthesis
//! iteration (batch 40, 3×32×32, default backbone).

use std::collections::BTreeMap;
use std::time::Instant;

use dfcil_core::backbone::{BackboneConfig, Model};
use dfcil_core::continual_norm::Mode;
use dfcil_core::losses::cross_entropy;
use dfcil_core::synthesis::{synthesize_batch, SynthesisConfig};
use dfcil_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let reps: usize = std::env::var("REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(BackboneConfig::default(), &mut rng).unwrap();
    model.expand_classifier(8, &mut rng).unwrap();
    let x = Tensor::from_fn(&[40, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..40).map(|i| i % 8).collect();

    let t = Instant::now();
    for _ in 0..reps {
        let g = Graph::new();
        let p = model.params.bind(&g, true);
        let xv = g.constant(x.clone());
        let f = model.forward_features(&g, &p, xv, Mode::Train).unwrap();
        let z = model.logits(&g, &p, f);
        let loss = cross_entropy(&g, z, &labels).unwrap();
        let _ = g.backward(loss);
    }
    let step = t.elapsed().as_secs_f64() / reps as f64;
    println!("train step (forward + backward): {:.3} s", step);

    let frozen = model.clone_frozen();
    let snapshot = frozen.snapshot();
    let cfg = SynthesisConfig { iterations: reps, ..SynthesisConfig::default() };
    let t = Instant::now();
    synthesize_batch(&frozen, &snapshot, &BTreeMap::new(), &labels, [3, 32, 32], &cfg, 0, &mut rng).unwrap();
    let iter = t.elapsed().as_secs_f64() / reps as f64;
    println!("synthesis iteration: {:.3} s", iter);
}
