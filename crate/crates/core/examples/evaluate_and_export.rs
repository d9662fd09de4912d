//! Trains briefly, scores a held-out split and exports colored PLY files.
//!
//! ```text
//! cargo run --release --example evaluate_and_export -- [epochs] [out_dir]
//! ```

use std::path::PathBuf;

use pignet::data::{synth_generate, AugmentConfig, SynthShape};
use pignet::eval::{evaluate_split, prepare_eval_cloud, write_ply};
use pignet::model::{predict, ModelConfig, PigNet};
use pignet::train::{train_category, TrainConfig};

fn main() -> pignet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(30, |a| a.parse().expect("epochs must be an integer"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("pignet-ply"), PathBuf::from);

    let shapes = synth_generate(SynthShape::Chair, 12, 256, 3)?;
    let (train, test) = shapes.split_at(9);
    let config = ModelConfig {
        inception_plan: vec![8, 16, 24],
        num_parts: SynthShape::Chair.num_parts(),
        ..ModelConfig::default()
    };
    let mut model = PigNet::new(config, 3)?;
    let cfg = TrainConfig { epochs, seed: 3, points: 256, batch_size: 9, ..TrainConfig::default() };
    train_category(&mut model, train, &[], &cfg, &AugmentConfig::default())?;

    let report = evaluate_split(&model, test, cfg.points, cfg.seed)?;
    print!("{}", report.summary());
    print!("{}", report.to_tsv());

    for (i, cloud) in test.iter().enumerate() {
        let prepared = prepare_eval_cloud(cloud, i, cfg.points, cfg.seed)?;
        let parts = predict(&model, &prepared.to_tensor())?;
        let path = out.join(format!("{}.ply", cloud.id));
        write_ply(&path, &prepared, &parts)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
