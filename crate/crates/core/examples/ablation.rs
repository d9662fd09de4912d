//! Trains the five architecture variants at reduced width and prints the
//! comparison table.
//!
//! ```text
//! cargo run --release --example ablation -- [epochs] [divisor]
//! ```

use pignet::data::{synth_generate, AugmentConfig, SynthShape};
use pignet::eval::{ablation_run, ablation_variants};
use pignet::layers::TNetWidths;
use pignet::model::ModelConfig;
use pignet::train::TrainConfig;

fn main() -> pignet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(15, |a| a.parse().expect("epochs must be an integer"));
    let divisor: usize = args.next().map_or(8, |a| a.parse().expect("divisor must be an integer"));

    let mut train = Vec::new();
    let mut test = Vec::new();
    for kind in [SynthShape::Lamp, SynthShape::Table] {
        let shapes = synth_generate(kind, 10, 256, 11)?;
        train.extend_from_slice(&shapes[..8]);
        test.extend_from_slice(&shapes[8..]);
    }
    let small = TNetWidths { conv: vec![32, 64, 128], fc: vec![64, 32] };
    let base = ModelConfig {
        input_tnet: small.clone(),
        feature_tnet: small,
        head_widths: vec![64, 32],
        ..ModelConfig::default()
    };
    let variants = ablation_variants(&base, divisor)?;
    let cfg = TrainConfig { epochs, seed: 11, points: 256, ..TrainConfig::default() };
    let aug = AugmentConfig { enabled: false, ..AugmentConfig::default() };
    let table = ablation_run(&train, &test, &variants, &cfg, &aug)?;
    print!("{}", table.to_tsv());
    Ok(())
}
