//! Point inception layers.
//!
//! A layer with `e` filters runs `conv_a` (`c → e`) and feeds its output `t`
//! to three branches: two `e/2` convs and a channel-window max pool followed
//! by an `e` conv. The output is `[t, b(t), c(t), d(pool(t))]` along channels,
//! `3e` wide. Every conv is followed by batch norm and ReLU.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{channel_window_max, ConvBlock, Forward};
use crate::params::ParamStore;
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct InceptionLayer {
    pub e: usize,
    pub c_in: usize,
    pub conv_a: ConvBlock,
    pub conv_b: ConvBlock,
    pub conv_c: ConvBlock,
    pub conv_d: ConvBlock,
}

impl InceptionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, e: usize) -> Result<Self> {
        if e == 0 || e % 2 != 0 {
            return Err(Error::Config(format!(
                "inception filter count must be a positive even number, got {e}"
            )));
        }
        Ok(Self {
            e,
            c_in,
            conv_a: ConvBlock::new(store, rng, &format!("{name}.a"), c_in, e),
            conv_b: ConvBlock::new(store, rng, &format!("{name}.b"), e, e / 2),
            conv_c: ConvBlock::new(store, rng, &format!("{name}.c"), e, e / 2),
            conv_d: ConvBlock::new(store, rng, &format!("{name}.d"), e, e),
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let t = self.conv_a.forward(fw, x)?;
        let b = self.conv_b.forward(fw, t)?;
        let c = self.conv_c.forward(fw, t)?;
        let pooled = channel_window_max(fw.graph, t)?;
        let d = self.conv_d.forward(fw, pooled)?;
        fw.graph.concat(&[t, b, c, d])
    }

    pub fn out_width(&self) -> usize {
        3 * self.e
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.param_count()
            + self.conv_b.param_count()
            + self.conv_c.param_count()
            + self.conv_d.param_count()
    }
}

/// One stage of the local-feature extractor.
#[derive(Clone, Debug)]
pub enum StackLayer {
    Inception(InceptionLayer),
    /// Single conv block of the same output width, used by the no-inception ablation.
    Plain(ConvBlock),
}

impl StackLayer {
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        match self {
            StackLayer::Inception(l) => l.forward(fw, x),
            StackLayer::Plain(b) => b.forward(fw, x),
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            StackLayer::Inception(l) => l.out_width(),
            StackLayer::Plain(b) => b.out_width(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            StackLayer::Inception(l) => l.param_count(),
            StackLayer::Plain(b) => b.param_count(),
        }
    }
}

/// Closed-form parameter count of one stage with `c_in` inputs and `e` filters.
pub fn stage_param_count(c_in: usize, e: usize, inception: bool) -> usize {
    if inception {
        // a: c·e, b and c: e·e/2 each, d: e·e; every conv carries 2·width BN params
        c_in * e + 2 * e + 2 * (e * (e / 2) + e) + e * e + 2 * e
    } else {
        c_in * 3 * e + 6 * e
    }
}

/// Builds one stage with `e` filters over `c_in` input channels.
pub fn build_stage(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    e: usize,
    inception: bool,
) -> Result<StackLayer> {
    if inception {
        return Ok(StackLayer::Inception(InceptionLayer::new(store, rng, name, c_in, e)?));
    }
    if e == 0 || e % 2 != 0 {
        return Err(Error::Config(format!(
            "filter count must be a positive even number, got {e}"
        )));
    }
    Ok(StackLayer::Plain(ConvBlock::new(store, rng, name, c_in, 3 * e)))
}

/// Builds the stages for a filter plan. Each stage's output is `3e` wide.
pub fn build_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    plan: &[usize],
    inception: bool,
) -> Result<Vec<StackLayer>> {
    let mut width = c_in;
    let mut layers = Vec::with_capacity(plan.len());
    for (i, &e) in plan.iter().enumerate() {
        let layer = build_stage(store, rng, &format!("{name}.{i}"), width, e, inception)?;
        width = layer.out_width();
        layers.push(layer);
    }
    Ok(layers)
}

/// Output width of a full stack: `3 · e_last`.
pub fn stack_width(plan: &[usize]) -> usize {
    plan.last().map_or(0, |e| 3 * e)
}

/// Sequential inception stack mapping `n × 3` points to `n × 3·e_last` features.
#[derive(Clone, Debug)]
pub struct InceptionStack {
    pub layers: Vec<StackLayer>,
}

impl InceptionStack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, plan: &[usize]) -> Result<Self> {
        Ok(Self {
            layers: build_stack(store, rng, name, 3, plan, true)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, points: Var) -> Result<Var> {
        let c = fw.graph.value(points).channels();
        if c != 3 {
            return Err(Error::Dimension(format!(
                "inception stack expects 3 input channels, got {c}"
            )));
        }
        self.layers.iter().try_fold(points, |h, l| l.forward(fw, h))
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(3, StackLayer::out_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;

    fn cloud(n: usize, c: usize, seed: u64) -> Tensor {
        let data = (0..n * c)
            .map(|i| ((i as f64 + seed as f64) * 1.37).sin())
            .collect();
        Tensor::new(vec![n, c], data).unwrap()
    }

    #[test]
    fn layer_width_is_three_e() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = InceptionLayer::new(&mut store, &mut rng, "l", 3, 64).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let x = fw.graph.constant(cloud(7, 3, 0));
        let y = layer.forward(&mut fw, x).unwrap();
        assert_eq!(g.shape(y), &[7, 192]);
        assert_eq!(layer.param_count(), stage_param_count(3, 64, true));
    }

    #[test]
    fn odd_filter_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(InceptionLayer::new(&mut store, &mut rng, "l", 3, 7).is_err());
    }

    #[test]
    fn single_point_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = InceptionLayer::new(&mut store, &mut rng, "l", 3, 8).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let x = fw.graph.constant(cloud(1, 3, 4));
        let y = layer.forward(&mut fw, x).unwrap();
        assert_eq!(g.shape(y), &[1, 24]);
    }

    #[test]
    fn stack_widths_for_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let stack = InceptionStack::new(&mut store, &mut rng, "s", &[8, 16]).unwrap();
        assert_eq!(stack.out_width(), 48);
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let x = fw.graph.constant(cloud(5, 3, 1));
        let y = stack.forward(&mut fw, x).unwrap();
        assert_eq!(g.shape(y), &[5, 48]);
        assert_eq!(stack_width(&[64, 128, 256]), 768);
        assert_eq!(stack_width(&[64, 128, 256, 512]), 1536);
        assert_eq!(stack_width(&[64, 128, 256, 512, 1024]), 3072);
    }

    #[test]
    fn stack_rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let stack = InceptionStack::new(&mut store, &mut rng, "s", &[8]).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let x = fw.graph.constant(cloud(5, 4, 1));
        assert!(matches!(stack.forward(&mut fw, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = InceptionLayer::new(&mut store, &mut rng, "l", 3, 8).unwrap();
        let x = cloud(6, 3, 9);
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let mut fw = Forward::new(&mut g, &store, Mode::Train);
            let v = fw.graph.constant(t);
            let y = layer.forward(&mut fw, v).unwrap();
            g.value(y).clone()
        };
        let a = run(x.clone()).permute_rows(&perm);
        let b = run(x.permute_rows(&perm));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
