//! Pointwise convolution, batch normalization, T-Net alignment and the
//! pooling/regularization helpers the networks are assembled from.
//!
//! Every layer reads its parameters from a [`ParamStore`] through a
//! [`Forward`] context and records its computation on the context's graph.
//! Feature maps are `[batch, points, channels]`; rank-2 `[points, channels]`
//! maps are accepted wherever a single cloud makes sense.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the graph being recorded, the parameter values, the
/// mode, and the batch-norm running statistics to commit afterwards.
pub struct Forward<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub bn_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Forward<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// Writes the running statistics collected during a training pass.
pub fn commit_bn_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, value) in updates {
        store.set(id, value)?;
    }
    Ok(())
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

/// Shared per-point linear map `out[i] = x[i]·W + b`.
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl PointwiseConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, d_in, d_out), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let c = fw.graph.value(x).channels();
        if c != self.d_in {
            return Err(Error::Dimension(format!(
                "pointwise conv expects {} input channels, got {c}",
                self.d_in
            )));
        }
        let w = fw.param(self.weight);
        let mut out = fw.graph.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = fw.param(b);
            out = fw.graph.add_bias(out, b)?;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub width: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[width]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[width], 1.0), false),
            width,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Normalizes every channel over all batch and point rows (train mode) or
    /// with the running statistics (eval mode).
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let c = fw.graph.value(x).channels();
        if c != self.width {
            return Err(Error::Dimension(format!(
                "batch norm of width {} applied to {c} channels",
                self.width
            )));
        }
        let gamma = fw.param(self.gamma);
        let beta = fw.param(self.beta);
        match fw.mode {
            Mode::Train => {
                let (out, stats) = fw.graph.batch_norm_train(x, gamma, beta, self.epsilon)?;
                let m = self.momentum;
                let blend = |running: &Tensor, batch: &[f64]| {
                    let d = running
                        .data()
                        .iter()
                        .zip(batch)
                        .map(|(r, b)| (1.0 - m) * r + m * b)
                        .collect();
                    Tensor::new(running.shape().to_vec(), d).unwrap()
                };
                let rm = blend(fw.store.get(self.running_mean), &stats.mean);
                let rv = blend(fw.store.get(self.running_var), &stats.var);
                fw.bn_updates.push((self.running_mean, rm));
                fw.bn_updates.push((self.running_var, rv));
                Ok(out)
            }
            Mode::Eval => {
                let mean = fw.store.get(self.running_mean).data();
                let var = fw.store.get(self.running_var).data();
                fw.graph.batch_norm_eval(x, gamma, beta, mean, var, self.epsilon)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.width
    }
}

/// Pointwise conv (no bias, the norm's shift replaces it) → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: PointwiseConv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            conv: PointwiseConv::new(store, rng, &format!("{name}.conv"), d_in, d_out, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), d_out),
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let h = self.conv.forward(fw, x)?;
        let h = self.bn.forward(fw, h)?;
        Ok(fw.graph.relu(h))
    }

    pub fn out_width(&self) -> usize {
        self.conv.d_out
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Global feature by maximum over the point axis.
pub fn max_over_points(g: &mut Graph, features: Var) -> Result<Var> {
    g.reduce_max(features)
}

/// Global feature by mean over the point axis.
pub fn global_average_pool(g: &mut Graph, features: Var) -> Result<Var> {
    g.reduce_mean(features)
}

/// Per-point sliding max along channels (window 3, stride 1, same width).
pub fn channel_window_max(g: &mut Graph, features: Var) -> Result<Var> {
    g.channel_window_max(features)
}

/// `‖I − A·Aᵀ‖²_F` for a `[k,k]` matrix, or its mean over a `[B,k,k]` batch.
pub fn orthogonality_regularizer(g: &mut Graph, a: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let (batch, k) = match s.as_slice() {
        [r, c] if r == c => (1, *r),
        [b, r, c] if r == c => (*b, *r),
        _ => {
            return Err(Error::Dimension(format!(
                "orthogonality regularizer needs a square matrix, got {s:?}"
            )))
        }
    };
    let at = g.transpose(a)?;
    let prod = if s.len() == 2 { g.matmul(a, at)? } else { g.bmm(a, at)? };
    let mut eye = Vec::with_capacity(batch * k * k);
    for _ in 0..batch {
        eye.extend_from_slice(Tensor::eye(k).data());
    }
    let eye = g.constant(Tensor::new(s.clone(), eye)?);
    let diff = g.sub(eye, prod)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Widths of a T-Net's shared convs and fully connected layers.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TNetWidths {
    pub conv: Vec<usize>,
    pub fc: Vec<usize>,
}

impl Default for TNetWidths {
    fn default() -> Self {
        Self {
            conv: vec![64, 128, 1024],
            fc: vec![512, 256],
        }
    }
}

/// Predicts a `k × k` alignment matrix from a point feature map.
///
/// Shared convs with batch norm, a max over points, then fully connected
/// layers with ReLU. The last layer starts with zero weights and an identity
/// bias, so a fresh T-Net outputs exactly `I_k` for any input.
#[derive(Clone, Debug)]
pub struct TNet {
    pub k: usize,
    pub convs: Vec<ConvBlock>,
    pub fcs: Vec<PointwiseConv>,
    pub out: PointwiseConv,
}

impl TNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, k: usize, widths: &TNetWidths) -> Self {
        let mut width = k;
        let mut convs = Vec::new();
        for (i, &w) in widths.conv.iter().enumerate() {
            convs.push(ConvBlock::new(store, rng, &format!("{name}.conv{i}"), width, w));
            width = w;
        }
        let mut fcs = Vec::new();
        for (i, &w) in widths.fc.iter().enumerate() {
            fcs.push(PointwiseConv::new(store, rng, &format!("{name}.fc{i}"), width, w, true));
            width = w;
        }
        let out = PointwiseConv::new(store, rng, &format!("{name}.out"), width, k * k, true);
        *store.get_mut(out.weight) = Tensor::zeros(&[width, k * k]);
        *store.get_mut(out.bias.unwrap()) = Tensor::eye(k).reshape(&[k * k]).unwrap();
        Self { k, convs, fcs, out }
    }

    /// Predicts `A` for a `[B,n,k]` map (shape `[B,k,k]`) or an `[n,k]` map (shape `[k,k]`).
    pub fn predict(&self, fw: &mut Forward, features: Var) -> Result<Var> {
        let s = fw.graph.shape(features).to_vec();
        if s.last() != Some(&self.k) || !(2..=3).contains(&s.len()) {
            return Err(Error::Dimension(format!(
                "T-Net of size {} applied to features of shape {s:?}",
                self.k
            )));
        }
        let mut h = features;
        for c in &self.convs {
            h = c.forward(fw, h)?;
        }
        let mut h = fw.graph.reduce_max(h)?;
        if s.len() == 2 {
            let w = fw.graph.shape(h)[0];
            h = fw.graph.reshape(h, &[1, w])?;
        }
        for fc in &self.fcs {
            h = fc.forward(fw, h)?;
            h = fw.graph.relu(h);
        }
        let a = self.out.forward(fw, h)?;
        let shape = if s.len() == 2 {
            vec![self.k, self.k]
        } else {
            vec![s[0], self.k, self.k]
        };
        fw.graph.reshape(a, &shape)
    }

    /// Returns `(features · A, A)`.
    pub fn apply(&self, fw: &mut Forward, features: Var) -> Result<(Var, Var)> {
        let a = self.predict(fw, features)?;
        let aligned = if fw.graph.shape(features).len() == 2 {
            fw.graph.matmul(features, a)?
        } else {
            fw.graph.bmm(features, a)?
        };
        Ok((aligned, a))
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvBlock::param_count).sum::<usize>()
            + self.fcs.iter().map(PointwiseConv::param_count).sum::<usize>()
            + self.out.param_count()
    }
}

/// Closed-form trainable parameter count of a T-Net.
pub fn tnet_param_count(k: usize, widths: &TNetWidths) -> usize {
    let mut width = k;
    let mut total = 0;
    for &w in &widths.conv {
        total += width * w + 2 * w;
        width = w;
    }
    for &w in &widths.fc {
        total += width * w + w;
        width = w;
    }
    total + width * k * k + k * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn pointwise_conv_examples() {
        let mut store = ParamStore::new();
        let conv = PointwiseConv::new(&mut store, &mut rng(), "c", 2, 2, true);
        store.set(conv.weight, Tensor::eye(2)).unwrap();
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let xv = fw.graph.constant(x.clone());
        let y = conv.forward(&mut fw, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let mut store = ParamStore::new();
        let conv = PointwiseConv::new(&mut store, &mut rng(), "c", 2, 3, true);
        store.set(conv.weight, Tensor::zeros(&[2, 3])).unwrap();
        store.set(conv.bias.unwrap(), Tensor::vector(&[1.0, -2.0, 0.5])).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let xv = fw.graph.constant(x.clone());
        let y = conv.forward(&mut fw, xv).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);

        // dot products: 1·0.5 − 2·1 + 0.1 = −1.4, 3·0.5 − 4·1 + 0.1 = −2.4
        let mut store = ParamStore::new();
        let conv = PointwiseConv::new(&mut store, &mut rng(), "c", 2, 1, true);
        store.set(conv.weight, m(&[&[0.5], &[-1.0]])).unwrap();
        store.set(conv.bias.unwrap(), Tensor::vector(&[0.1])).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let xv = fw.graph.constant(x);
        let y = conv.forward(&mut fw, xv).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.4).abs() < 1e-12 && (d[1] + 2.4).abs() < 1e-12);
    }

    #[test]
    fn pointwise_conv_channel_mismatch() {
        let mut store = ParamStore::new();
        let conv = PointwiseConv::new(&mut store, &mut rng(), "c", 3, 2, true);
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let xv = fw.graph.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(conv.forward(&mut fw, xv), Err(Error::Dimension(_))));
    }

    fn bn_run(values: &[f64], gamma: f64, beta: f64) -> Vec<f64> {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.set(bn.gamma, Tensor::vector(&[gamma])).unwrap();
        store.set(bn.beta, Tensor::vector(&[beta])).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Train);
        let x = fw
            .graph
            .constant(Tensor::new(vec![1, values.len(), 1], values.to_vec()).unwrap());
        let y = bn.forward(&mut fw, x).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn batch_norm_examples() {
        assert!(bn_run(&[2.0, 2.0, 2.0], 1.0, 0.0).iter().all(|v| v.abs() < 1e-12));
        assert!(bn_run(&[1.0, 5.0, -3.0], 0.0, 0.7).iter().all(|v| *v == 0.7));
        // population variance of [1,2,3] is 2/3: (x−2)/sqrt(2/3)
        let out = bn_run(&[1.0, 2.0, 3.0], 1.0, 0.0);
        let s = (2.0f64 / 3.0 + BN_EPSILON).sqrt();
        assert!((out[0] + 1.0 / s).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Train);
        let x = fw.graph.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(bn.forward(&mut fw, x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn batch_norm_running_stats_update_and_eval_uses_them() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let updates = {
            let mut g = Graph::new();
            let mut fw = Forward::new(&mut g, &store, Mode::Train);
            let x = fw.graph.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            bn.forward(&mut fw, x).unwrap();
            fw.bn_updates
        };
        commit_bn_updates(&mut store, updates).unwrap();
        // mean 2.5, population variance 1.25
        assert!((store.get(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.125)).abs() < 1e-12);

        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Eval);
        let x = fw.graph.constant(Tensor::new(vec![1, 1], vec![0.25]).unwrap());
        let y = bn.forward(&mut fw, x).unwrap();
        assert!(fw.bn_updates.is_empty());
        assert!(g.value(y).data()[0].abs() < 1e-12);
    }

    #[test]
    fn regularizer_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let r = orthogonality_regularizer(&mut g, i).unwrap();
        assert_eq!(g.value(r).data()[0], 0.0);

        let two = g.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap());
        let r = orthogonality_regularizer(&mut g, two).unwrap();
        assert_eq!(g.value(r).data()[0], 18.0);

        let t = 0.7f64;
        let rot = g.constant(Tensor::from_rows(&[[t.cos(), -t.sin()], [t.sin(), t.cos()]]).unwrap());
        let r = orthogonality_regularizer(&mut g, rot).unwrap();
        assert!(g.value(r).data()[0].abs() < 1e-10);

        let rect = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(orthogonality_regularizer(&mut g, rect), Err(Error::Dimension(_))));
    }

    #[test]
    fn fresh_tnet_outputs_identity() {
        let mut store = ParamStore::new();
        let widths = TNetWidths {
            conv: vec![4, 8],
            fc: vec![6],
        };
        let tnet = TNet::new(&mut store, &mut rng(), "t", 3, &widths);
        let x = Tensor::new(vec![5, 3], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, Mode::Train);
        let xv = fw.graph.constant(x.clone());
        let (aligned, a) = tnet.apply(&mut fw, xv).unwrap();
        assert_eq!(g.value(a), &Tensor::eye(3));
        assert_eq!(g.value(aligned), &x);
        assert_eq!(tnet.param_count(), tnet_param_count(3, &widths));
        assert_eq!(store.trainable_count(), tnet.param_count());
    }

    #[test]
    fn layers_pass_gradient_check() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, &mut r, "b", 3, 4);
        let bias_conv = PointwiseConv::new(&mut store, &mut r, "c", 4, 2, true);
        let ids = store.trainable_ids();
        let x = Tensor::new(vec![2, 3, 3], (0..18).map(|i| ((i * 7) as f64 * 0.31).sin()).collect()).unwrap();
        let mut params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        params.push(x);
        let err = finite_diff_check(
            |g, vars| {
                for (&id, &v) in ids.iter().zip(vars) {
                    g.bind_param(id, v);
                }
                let mut fw = Forward::new(g, &store, Mode::Train);
                let h = block.forward(&mut fw, vars[vars.len() - 1])?;
                let h = channel_window_max(fw.graph, h)?;
                let h = bias_conv.forward(&mut fw, h)?;
                let h2 = fw.graph.mul(h, h)?;
                let pooled = global_average_pool(fw.graph, h2)?;
                let mx = max_over_points(fw.graph, h)?;
                let a = fw.graph.sum(pooled);
                let b = fw.graph.sum(mx);
                fw.graph.add(a, b)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
