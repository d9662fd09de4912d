//! Prints parameter counts per component for a few configurations and times
//! a reduced network.
//!
//! ```text
//! cargo run --release --example inspect_parameters
//! ```

use pignet::data::{synth_generate, SynthShape};
use pignet::eval::{complexity_report, ComplexityReport};
use pignet::model::{BaselineConfig, ModelConfig, PigNet, PointNetBaseline};
use pignet::train::TrainConfig;

fn show(name: &str, config: &ModelConfig) {
    println!("{name}: plan {:?}, K = {}", config.inception_plan, config.stack_width());
    for (part, n) in config.parameter_breakdown() {
        println!("  {part:<20} {n:>12}");
    }
    println!("  {:<20} {:>12}", "total", config.parameter_count());
}

fn main() -> pignet::Result<()> {
    show("default", &ModelConfig::default());
    show("reduced feature transform", &ModelConfig { feature_reduce: Some(64), ..ModelConfig::default() });
    show("no feature transform", &ModelConfig { feature_transform: false, ..ModelConfig::default() });
    println!("comparator: {}", BaselineConfig::default().parameter_count());

    let shapes = synth_generate(SynthShape::Lamp, 4, 256, 1)?;
    let cfg = TrainConfig { points: 256, ..TrainConfig::default() };
    let small = PigNet::new(ModelConfig { inception_plan: vec![8, 16, 24], num_parts: 3, ..ModelConfig::default() }, 1)?;
    let base = PointNetBaseline::new(BaselineConfig { num_parts: 3, ..BaselineConfig::default() }, 1)?;
    print!("{}", ComplexityReport::TSV_HEADER);
    print!("{}", complexity_report(&small, "pignet-8-16-24", &shapes, &cfg)?.to_tsv_row());
    print!("{}", complexity_report(&base, "pointnet", &shapes, &cfg)?.to_tsv_row());
    Ok(())
}
