//! Throughput probe: per-step wall time across model widths.

use std::time::Instant;

use selfflow_core::config::RunConfig;
use selfflow_core::data::{self, Split};
use selfflow_core::model::{init_params, TransformerConfig};
use selfflow_core::objectives::{train_step, ObjectiveConfig, ObjectiveVariant, TrainState};
use selfflow_core::rng::Philox;
use selfflow_core::tensor::Tensor;

fn main() {
    let base = RunConfig::toy_default(ObjectiveVariant::SelfFlow, 0);
    for (hidden, heads, batch) in [(32usize, 4usize, 8usize), (48, 4, 8), (64, 4, 8), (128, 4, 16)] {
        for variant in [ObjectiveVariant::Vanilla, ObjectiveVariant::SelfFlow] {
            let model = TransformerConfig {
                depth: 6,
                hidden,
                heads,
                head_hidden: hidden / 2,
                ..TransformerConfig::toy_default()
            };
            let objective = ObjectiveConfig::for_variant(variant, &model);
            let params = init_params(&model, &mut Philox::seed(1)).unwrap();
            let mut state = TrainState::new(params);
            let spec = &base.dataset;

            let steps = 30u64;
            let t0 = Instant::now();
            for step in 0..steps {
                let indices: Vec<usize> =
                    (0..batch).map(|i| (step as usize * batch + i) % spec.n_train).collect();
                let tb = data::batch(spec, base.data_seed, Split::Train, &indices).unwrap();
                let mut nrng = Philox::keyed(7, step);
                let x1 = Tensor::new(
                    tb.x.shape().to_vec(),
                    (0..tb.x.numel()).map(|_| nrng.normal()).collect(),
                )
                .unwrap();
                let mut prng = Philox::keyed(8, step);
                train_step(
                    &mut state,
                    &tb,
                    &x1,
                    &objective,
                    &base.distribution,
                    &base.optimizer,
                    None,
                    &mut prng,
                )
                .unwrap();
            }
            let per_step = t0.elapsed().as_secs_f64() / steps as f64;
            println!(
                "H={hidden:3} B={batch:2} {variant:?}: {:7.2} ms/step  -> 20k steps = {:5.1} min",
                per_step * 1e3,
                per_step * 20_000.0 / 60.0
            );
        }
    }
}
