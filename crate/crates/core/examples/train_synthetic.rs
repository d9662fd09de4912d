//! Trains a reduced network on synthetic lamps and reports the fit.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [epochs] [shape]
//! ```

use std::time::Instant;

use pignet::data::{synth_generate, AugmentConfig, SynthShape};
use pignet::eval::evaluate_split;
use pignet::model::{ModelConfig, PigNet, Segmenter};
use pignet::train::{train_category, TrainConfig};

fn main() -> pignet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(40, |a| a.parse().expect("epochs must be an integer"));
    let shape: SynthShape = args.next().as_deref().unwrap_or("lamp").parse()?;

    let clouds = synth_generate(shape, 8, 256, 7)?;
    let config = ModelConfig {
        inception_plan: vec![8, 16, 24],
        num_parts: shape.num_parts(),
        ..ModelConfig::default()
    };
    let mut model = PigNet::new(config, 7)?;
    println!("{}", model.describe());
    println!("trainable parameters: {}", model.count_parameters());

    let train_cfg = TrainConfig { epochs, seed: 7, points: 256, ..TrainConfig::default() };
    let aug = AugmentConfig { enabled: false, ..AugmentConfig::default() };
    let start = Instant::now();
    let history = train_category(&mut model, &clouds, &[], &train_cfg, &aug)?;
    let elapsed = start.elapsed().as_secs_f64();
    println!("initial loss {:.4}", history.initial_loss);
    for (i, loss) in history.epoch_loss.iter().enumerate() {
        if (i + 1) % 10 == 0 || i + 1 == history.epoch_loss.len() {
            println!("epoch {:>4}  loss {loss:.5}", i + 1);
        }
    }
    let report = evaluate_split(&model, &clouds, 256, 7)?;
    println!(
        "training split: instance mIoU {:.4}, point accuracy {:.4}, {elapsed:.1}s for {epochs} epochs",
        report.instance_miou, report.point_accuracy
    );
    Ok(())
}
