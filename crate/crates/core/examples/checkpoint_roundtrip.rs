//! Saves a partly trained model, resumes it from disk and checks that the
//! restored copy predicts exactly what the original does.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use pignet::checkpoint::{load_model, read_checkpoint, save_checkpoint};
use pignet::data::{synth_generate, AugmentConfig, SynthShape};
use pignet::eval::prepare_eval_cloud;
use pignet::model::{logits, ModelConfig, PigNet, Segmenter};
use pignet::train::{train_from_state, TrainConfig, TrainState};

fn main() -> pignet::Result<()> {
    let shapes = synth_generate(SynthShape::Table, 6, 128, 5)?;
    let config = ModelConfig {
        inception_plan: vec![8, 16],
        num_parts: SynthShape::Table.num_parts(),
        ..ModelConfig::default()
    };
    let mut model = PigNet::new(config, 5)?;
    let cfg = TrainConfig { epochs: 3, seed: 5, points: 128, ..TrainConfig::default() };
    let mut state = TrainState::new(model.store(), cfg.seed);
    train_from_state(&mut model, &shapes, &[], &cfg, &AugmentConfig::default(), &mut state)?;

    let dir = std::env::temp_dir().join("pignet-checkpoint-example");
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &model, &state)?;
    let meta = read_checkpoint(&path)?.meta;
    println!("saved {} at epoch {} (adam step {})", meta.kind, meta.epoch, meta.adam_step);

    let (mut restored, mut restored_state) = load_model(&path)?;
    let mut identical = true;
    for (i, c) in shapes.iter().enumerate() {
        let x = prepare_eval_cloud(c, i, cfg.points, cfg.seed)?.to_tensor();
        identical &= logits(&model, &x)? == logits(restored.as_ref(), &x)?;
    }
    println!("restored predictions identical: {identical}");

    // the optimizer state came back too, so training simply continues
    let more = TrainConfig { epochs: 2, ..cfg };
    let history = train_from_state(restored.as_mut(), &shapes, &[], &more, &AugmentConfig::default(), &mut restored_state)?;
    println!("resumed to epoch {}, last loss {:.4}", restored_state.epoch, history.epoch_loss[1]);
    Ok(())
}
