//! Trains the inception network and the PointNet-style comparator on
//! synthetic lamps, then scores both under point dropout and coordinate noise.
//!
//! ```text
//! cargo run --release --example robustness_grid -- [epochs]
//! ```

use std::time::Instant;

use pignet::data::{synth_generate, AugmentConfig, SynthShape};
use pignet::eval::robustness_run;
use pignet::model::{BaselineConfig, ModelConfig, PigNet, PointNetBaseline, Segmenter};
use pignet::train::{train_category, TrainConfig};

fn main() -> pignet::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(60, |a| a.parse().expect("epochs must be an integer"));
    let shape = SynthShape::Lamp;
    let clouds = synth_generate(shape, 8, 256, 7)?;
    let cfg = TrainConfig { epochs, seed: 7, points: 256, ..TrainConfig::default() };
    let aug = AugmentConfig { enabled: false, ..AugmentConfig::default() };

    let mut model = PigNet::new(
        ModelConfig { inception_plan: vec![8, 16, 24], num_parts: shape.num_parts(), ..ModelConfig::default() },
        7,
    )?;
    let mut baseline = PointNetBaseline::new(
        BaselineConfig { num_parts: shape.num_parts(), ..BaselineConfig::default() },
        7,
    )?;
    for (name, m) in [("inception", &mut model as &mut dyn Segmenter), ("comparator", &mut baseline)] {
        let start = Instant::now();
        let h = train_category(m, &clouds, &[], &cfg, &aug)?;
        println!(
            "{name}: {} parameters, loss {:.4} -> {:.4} in {:.1}s",
            m.count_parameters(),
            h.initial_loss,
            h.epoch_loss.last().unwrap(),
            start.elapsed().as_secs_f64()
        );
    }

    let report = robustness_run(&model, &baseline, &clouds, 7)?;
    print!("{}", report.to_tsv());
    Ok(())
}
