//! Compares reverse-mode gradients of a small network against central
//! differences.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use pignet::layers::{Forward, Mode, TNetWidths};
use pignet::model::{segmentation_loss, ModelConfig, PigNet, Segmenter};
use pignet::tensor::finite_diff_check;
use pignet::Tensor;

fn main() -> pignet::Result<()> {
    let widths = TNetWidths { conv: vec![8, 16], fc: vec![16, 8] };
    let config = ModelConfig {
        inception_plan: vec![8, 16],
        head_widths: vec![16, 8],
        num_parts: 3,
        input_tnet: widths.clone(),
        feature_tnet: widths,
        ..ModelConfig::default()
    };
    let model = PigNet::new(config, 2)?;
    let store = model.store();
    let ids = store.trainable_ids();
    let params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let cloud = Tensor::from_rows(&[[0.1, 0.4, -0.2], [-0.5, 0.3, 0.8], [0.9, -0.1, 0.0], [-0.3, -0.7, 0.2]])?;
    let labels = [0, 1, 2, 1];

    let err = finite_diff_check(
        |g, vars| {
            for (&id, &v) in ids.iter().zip(vars) {
                g.bind_param(id, v);
            }
            let mut fw = Forward::new(g, store, Mode::Train);
            let x = fw.graph.constant(cloud.clone());
            let out = model.forward(&mut fw, x)?;
            segmentation_loss(fw.graph, &out, &labels, model.lambda_reg())
        },
        &params,
        1e-5,
    )?;
    println!(
        "{} parameters, max relative gradient error {err:.2e}",
        params.iter().map(Tensor::numel).sum::<usize>()
    );
    Ok(())
}
