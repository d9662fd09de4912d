//! Network assembly: the inception segmentation network, the compact
//! PointNet-style comparator, the training loss and prediction.
//!
//! Forward path of [`PigNet`]:
//!
//! ```text
//! points ─ input T-Net ─ inception stack ─ feature T-Net ─┬─────────────── local ─┐
//!                                                          └─ GAP (or max) ─ global ┴─ concat ─ head ─ logits
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inception::{build_stage, stack_width, stage_param_count, StackLayer};
use crate::layers::{
    commit_bn_updates, global_average_pool, max_over_points, orthogonality_regularizer,
    tnet_param_count, ConvBlock, Forward, Mode, PointwiseConv, TNet, TNetWidths,
};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

/// Architecture of the segmentation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filter count `e` of every stack stage.
    pub inception_plan: Vec<usize>,
    /// When off, every stage is a single conv block of width `3e`.
    pub use_inception: bool,
    pub feature_transform: bool,
    /// Stage after which the feature transform runs; last stage when unset.
    pub feature_transform_after: Option<usize>,
    /// Optional conv block shrinking the features before the feature T-Net.
    pub feature_reduce: Option<usize>,
    pub head_widths: Vec<usize>,
    pub num_parts: usize,
    pub lambda_reg: f64,
    /// Global feature by average pooling; max pooling when off.
    pub use_gap: bool,
    pub input_tnet: TNetWidths,
    pub feature_tnet: TNetWidths,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            inception_plan: vec![64, 128, 256, 512],
            use_inception: true,
            feature_transform: true,
            feature_transform_after: None,
            feature_reduce: None,
            head_widths: vec![512, 256, 128],
            num_parts: 4,
            lambda_reg: 0.001,
            use_gap: true,
            input_tnet: TNetWidths::default(),
            feature_tnet: TNetWidths::default(),
        }
    }
}

fn positive(what: &str, widths: &[usize]) -> Result<()> {
    if let Some(w) = widths.iter().find(|&&w| w == 0) {
        return Err(Error::Config(format!("{what} contains a zero width ({w})")));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inception_plan.is_empty() {
            return Err(Error::Config("inception_plan must not be empty".into()));
        }
        if let Some(e) = self.inception_plan.iter().find(|&&e| e == 0 || e % 2 != 0) {
            return Err(Error::Config(format!(
                "inception_plan entries must be positive and even, got {e}"
            )));
        }
        if self.num_parts < 2 {
            return Err(Error::Config(format!(
                "num_parts must be at least 2, got {}",
                self.num_parts
            )));
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::Config(format!(
                "lambda_reg must be a finite non-negative number, got {}",
                self.lambda_reg
            )));
        }
        if let Some(i) = self.feature_transform_after {
            if i >= self.inception_plan.len() {
                return Err(Error::Config(format!(
                    "feature_transform_after = {i} but the plan has {} stages",
                    self.inception_plan.len()
                )));
            }
        }
        if self.feature_reduce == Some(0) {
            return Err(Error::Config("feature_reduce must be positive".into()));
        }
        positive("head_widths", &self.head_widths)?;
        positive("input_tnet.conv", &self.input_tnet.conv)?;
        positive("input_tnet.fc", &self.input_tnet.fc)?;
        positive("feature_tnet.conv", &self.feature_tnet.conv)?;
        positive("feature_tnet.fc", &self.feature_tnet.fc)?;
        Ok(())
    }

    fn transform_stage(&self) -> usize {
        self.feature_transform_after
            .unwrap_or(self.inception_plan.len() - 1)
    }

    /// Width of the stack output `K = 3·e_last`.
    pub fn stack_width(&self) -> usize {
        stack_width(&self.inception_plan)
    }

    /// Width of the per-point local features that are concatenated with the
    /// global feature.
    pub fn local_width(&self) -> usize {
        let last = self.inception_plan.len() - 1;
        if self.feature_transform && self.transform_stage() == last {
            self.feature_reduce.unwrap_or(self.stack_width())
        } else {
            self.stack_width()
        }
    }

    /// Trainable parameter count, in closed form, without building the network.
    pub fn parameter_count(&self) -> usize {
        self.parameter_breakdown().iter().map(|(_, n)| n).sum()
    }

    /// Closed-form trainable parameter count per component.
    pub fn parameter_breakdown(&self) -> Vec<(&'static str, usize)> {
        let stage = self.transform_stage();
        let mut stack = 0;
        let mut feature = 0;
        let mut width = 3;
        for (i, &e) in self.inception_plan.iter().enumerate() {
            stack += stage_param_count(width, e, self.use_inception);
            width = 3 * e;
            if self.feature_transform && i == stage {
                if let Some(r) = self.feature_reduce {
                    feature += width * r + 2 * r;
                    width = r;
                }
                feature += tnet_param_count(width, &self.feature_tnet);
            }
        }
        let mut head = 0;
        let mut w = 2 * self.local_width();
        for &h in &self.head_widths {
            head += w * h + 2 * h;
            w = h;
        }
        head += w * self.num_parts + self.num_parts;
        vec![
            ("input transform", tnet_param_count(3, &self.input_tnet)),
            ("inception stack", stack),
            ("feature transform", feature),
            ("segmentation head", head),
        ]
    }

    pub fn hash(&self) -> [u8; 32] {
        config_digest(PIGNET_KIND, self)
    }
}

pub const PIGNET_KIND: &str = "pignet";
pub const POINTNET_KIND: &str = "pointnet";

fn to_toml<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
}

/// Builds a model of the given kind from its TOML configuration.
pub fn build_model(kind: &str, config_toml: &str, seed: u64) -> Result<Box<dyn Segmenter>> {
    let bad = |e: toml::de::Error| Error::Config(format!("invalid {kind} configuration: {e}"));
    match kind {
        PIGNET_KIND => Ok(Box::new(PigNet::new(toml::from_str(config_toml).map_err(bad)?, seed)?)),
        POINTNET_KIND => Ok(Box::new(PointNetBaseline::new(
            toml::from_str(config_toml).map_err(bad)?,
            seed,
        )?)),
        other => Err(Error::Compatibility(format!("unknown model kind '{other}'"))),
    }
}

fn config_digest<T: std::fmt::Debug>(tag: &str, cfg: &T) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(format!("{cfg:?}").as_bytes());
    h.finalize().into()
}

/// Result of a forward pass, with the intermediate nodes exposed for
/// inspection.
#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `[B,n,P]` (or `[n,P]` for a single cloud) raw scores.
    pub logits: Var,
    /// Feature alignment matrix, when the network has a feature transform.
    pub feature_transform: Option<Var>,
    /// Per-point features concatenated with the global feature.
    pub local: Var,
    /// Aggregated global feature.
    pub global: Var,
}

/// A per-point part classifier with its parameters.
pub trait Segmenter: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn num_parts(&self) -> usize;
    fn lambda_reg(&self) -> f64;
    /// Identifies the architecture; checkpoints refuse to load across hashes.
    fn config_hash(&self) -> [u8; 32];
    fn describe(&self) -> String;
    /// Short architecture tag stored in checkpoints.
    fn kind(&self) -> &'static str;
    /// The architecture configuration as TOML.
    fn config_toml(&self) -> Result<String>;
    /// Forward pass over a `[B,n,3]` batch or a single `[n,3]` cloud.
    fn forward(&self, fw: &mut Forward, cloud: Var) -> Result<SegOutput>;

    fn count_parameters(&self) -> usize {
        self.store().trainable_count()
    }
}

fn check_points(g: &Graph, cloud: Var) -> Result<()> {
    let t = g.value(cloud);
    if !(2..=3).contains(&t.rank()) || t.channels() != 3 {
        return Err(Error::Dimension(format!(
            "expected points of shape [n,3] or [B,n,3], got {:?}",
            t.shape()
        )));
    }
    if t.shape()[t.rank() - 2] == 0 {
        return Err(Error::Input("point cloud has no points".into()));
    }
    if !t.is_finite() {
        return Err(Error::Input("point cloud contains non-finite coordinates".into()));
    }
    Ok(())
}

/// Cross entropy averaged over every point, plus `lambda ·` the orthogonality
/// penalty of the feature transform (averaged over the batch).
pub fn segmentation_loss(
    g: &mut Graph,
    out: &SegOutput,
    labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    let ce = g.cross_entropy(out.logits, labels)?;
    match out.feature_transform {
        Some(a) if lambda > 0.0 => {
            let reg = orthogonality_regularizer(g, a)?;
            let reg = g.scale(reg, lambda);
            g.add(ce, reg)
        }
        _ => Ok(ce),
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let p = logits.channels();
    logits
        .data()
        .chunks(p)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode logits for one `[n,3]` cloud.
pub fn logits<M: Segmenter + ?Sized>(model: &M, cloud: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, model.store(), Mode::Eval);
    let x = fw.graph.constant(cloud.clone());
    let out = model.forward(&mut fw, x)?;
    Ok(g.value(out.logits).clone())
}

/// Part id per point (eval mode).
pub fn predict<M: Segmenter + ?Sized>(model: &M, cloud: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(model, cloud)?))
}

/// Loss of one labeled batch in the given mode; running statistics are committed in train mode.
pub fn batch_loss<M: Segmenter + ?Sized>(
    model: &mut M,
    batch: &Tensor,
    labels: &[usize],
    mode: Mode,
) -> Result<f64> {
    let mut g = Graph::new();
    let (value, updates) = {
        let mut fw = Forward::new(&mut g, model.store(), mode);
        let x = fw.graph.constant(batch.clone());
        let out = model.forward(&mut fw, x)?;
        let loss = segmentation_loss(fw.graph, &out, labels, model.lambda_reg())?;
        (fw.graph.value(loss).data()[0], fw.bn_updates)
    };
    commit_bn_updates(model.store_mut(), updates)?;
    Ok(value)
}

#[derive(Clone, Debug)]
struct FeatureTransform {
    reduce: Option<ConvBlock>,
    tnet: TNet,
}

impl FeatureTransform {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, reduce: Option<usize>, widths: &TNetWidths) -> Self {
        let reduce = reduce.map(|r| ConvBlock::new(store, rng, &format!("{name}.reduce"), width, r));
        let k = reduce.as_ref().map_or(width, ConvBlock::out_width);
        Self {
            reduce,
            tnet: TNet::new(store, rng, &format!("{name}.tnet"), k, widths),
        }
    }

    fn apply(&self, fw: &mut Forward, x: Var) -> Result<(Var, Var)> {
        let x = match &self.reduce {
            Some(r) => r.forward(fw, x)?,
            None => x,
        };
        self.tnet.apply(fw, x)
    }

    fn out_width(&self) -> usize {
        self.tnet.k
    }
}

/// Segmentation head: conv blocks then a plain conv to `P` logits.
#[derive(Clone, Debug)]
struct Head {
    blocks: Vec<ConvBlock>,
    out: PointwiseConv,
}

impl Head {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c_in: usize, widths: &[usize], parts: usize) -> Self {
        let mut w = c_in;
        let mut blocks = Vec::new();
        for (i, &h) in widths.iter().enumerate() {
            blocks.push(ConvBlock::new(store, rng, &format!("head.{i}"), w, h));
            w = h;
        }
        let out = PointwiseConv::new(store, rng, "head.out", w, parts, true);
        Self { blocks, out }
    }

    fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let h = self.blocks.iter().try_fold(x, |h, b| b.forward(fw, h))?;
        self.out.forward(fw, h)
    }
}

/// Broadcasts `global` over the points of `local` and concatenates.
fn join_local_global(g: &mut Graph, local: Var, global: Var) -> Result<Var> {
    let n = g.shape(local)[g.shape(local).len() - 2];
    let tiled = g.broadcast_points(global, n)?;
    g.concat(&[local, tiled])
}

/// Reshapes a single `[n,3]` cloud to a batch of one.
fn as_batch(g: &mut Graph, cloud: Var) -> Result<(Var, bool)> {
    let s = g.shape(cloud).to_vec();
    if s.len() == 2 {
        Ok((g.reshape(cloud, &[1, s[0], s[1]])?, true))
    } else {
        Ok((cloud, false))
    }
}

fn unbatch(g: &mut Graph, out: SegOutput) -> Result<SegOutput> {
    let drop_first = |g: &mut Graph, v: Var| {
        let s = g.shape(v)[1..].to_vec();
        g.reshape(v, &s)
    };
    Ok(SegOutput {
        logits: drop_first(g, out.logits)?,
        feature_transform: out.feature_transform.map(|a| drop_first(g, a)).transpose()?,
        local: drop_first(g, out.local)?,
        global: drop_first(g, out.global)?,
    })
}

/// The inception segmentation network.
#[derive(Clone, Debug)]
pub struct PigNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    input_tnet: TNet,
    stack: Vec<StackLayer>,
    feature_transform: Option<FeatureTransform>,
    /// Stack stage after which the feature transform is applied.
    transform_stage: usize,
    head: Head,
}

impl PigNet {
    /// Builds the network with parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input_tnet = TNet::new(&mut store, &mut rng, "input_tnet", 3, &config.input_tnet);
        let transform_stage = config.transform_stage();

        let mut stack = Vec::new();
        let mut feature_transform = None;
        let mut width = 3;
        for (i, &e) in config.inception_plan.iter().enumerate() {
            let layer = build_stage(&mut store, &mut rng, &format!("stack.{i}"), width, e, config.use_inception)?;
            width = layer.out_width();
            stack.push(layer);
            if config.feature_transform && i == transform_stage {
                let ft = FeatureTransform::new(
                    &mut store,
                    &mut rng,
                    "feature",
                    width,
                    config.feature_reduce,
                    &config.feature_tnet,
                );
                width = ft.out_width();
                feature_transform = Some(ft);
            }
        }
        let head = Head::new(&mut store, &mut rng, 2 * config.local_width(), &config.head_widths, config.num_parts);
        Ok(Self {
            config,
            store,
            input_tnet,
            stack,
            feature_transform,
            transform_stage,
            head,
        })
    }
}

impl Segmenter for PigNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_parts(&self) -> usize {
        self.config.num_parts
    }

    fn lambda_reg(&self) -> f64 {
        self.config.lambda_reg
    }

    fn config_hash(&self) -> [u8; 32] {
        self.config.hash()
    }

    fn kind(&self) -> &'static str {
        PIGNET_KIND
    }

    fn config_toml(&self) -> Result<String> {
        to_toml(&self.config)
    }

    fn describe(&self) -> String {
        let c = &self.config;
        format!(
            "inception network: plan {:?} ({}), K = {}, feature transform {}, head {:?} -> {} parts, {} aggregation",
            c.inception_plan,
            if c.use_inception { "inception" } else { "plain convs" },
            c.stack_width(),
            if c.feature_transform {
                format!("on after stage {} (width {})", self.transform_stage, c.local_width())
            } else {
                "off".into()
            },
            c.head_widths,
            c.num_parts,
            if c.use_gap { "average" } else { "max" },
        )
    }

    fn forward(&self, fw: &mut Forward, cloud: Var) -> Result<SegOutput> {
        check_points(fw.graph, cloud)?;
        let (x, single) = as_batch(fw.graph, cloud)?;
        let (mut h, _) = self.input_tnet.apply(fw, x)?;
        let mut a_feat = None;
        let mut local = h;
        for (i, layer) in self.stack.iter().enumerate() {
            h = layer.forward(fw, h)?;
            if i == self.transform_stage {
                if let Some(ft) = &self.feature_transform {
                    let (aligned, a) = ft.apply(fw, h)?;
                    h = aligned;
                    a_feat = Some(a);
                }
            }
            local = h;
        }
        let global = if self.config.use_gap {
            global_average_pool(fw.graph, local)?
        } else {
            max_over_points(fw.graph, local)?
        };
        let joined = join_local_global(fw.graph, local, global)?;
        let logits = self.head.forward(fw, joined)?;
        let out = SegOutput {
            logits,
            feature_transform: a_feat,
            local,
            global,
        };
        if single {
            unbatch(fw.graph, out)
        } else {
            Ok(out)
        }
    }
}

/// Configuration of the PointNet-style comparator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub conv_widths: Vec<usize>,
    /// Conv whose output forms the local per-point features; the feature
    /// transform (when on) is applied right after it.
    pub local_layer: usize,
    pub feature_transform: bool,
    pub head_widths: Vec<usize>,
    pub num_parts: usize,
    pub lambda_reg: f64,
    pub input_tnet: TNetWidths,
    pub feature_tnet: TNetWidths,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            conv_widths: vec![64, 64, 64, 128, 1024],
            local_layer: 1,
            feature_transform: true,
            head_widths: vec![512, 256, 128],
            num_parts: 4,
            lambda_reg: 0.001,
            input_tnet: TNetWidths::default(),
            feature_tnet: TNetWidths::default(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.local_layer >= self.conv_widths.len() {
            return Err(Error::Config(format!(
                "baseline local_layer {} outside conv_widths of length {}",
                self.local_layer,
                self.conv_widths.len()
            )));
        }
        if self.num_parts < 2 {
            return Err(Error::Config("num_parts must be at least 2".into()));
        }
        positive("conv_widths", &self.conv_widths)?;
        positive("head_widths", &self.head_widths)?;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = tnet_param_count(3, &self.input_tnet);
        let mut w = 3;
        for (i, &c) in self.conv_widths.iter().enumerate() {
            total += w * c + 2 * c;
            w = c;
            if i == self.local_layer && self.feature_transform {
                total += tnet_param_count(c, &self.feature_tnet);
            }
        }
        let mut w = self.conv_widths[self.local_layer] + self.conv_widths.last().unwrap();
        for &h in &self.head_widths {
            total += w * h + 2 * h;
            w = h;
        }
        total + w * self.num_parts + self.num_parts
    }

    pub fn hash(&self) -> [u8; 32] {
        config_digest(POINTNET_KIND, self)
    }
}

/// PointNet-style segmentation network: shared convs, max-pooled global
/// feature concatenated with early per-point features.
#[derive(Clone, Debug)]
pub struct PointNetBaseline {
    pub config: BaselineConfig,
    pub store: ParamStore,
    input_tnet: TNet,
    convs: Vec<ConvBlock>,
    feature_tnet: Option<TNet>,
    head: Head,
}

impl PointNetBaseline {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input_tnet = TNet::new(&mut store, &mut rng, "input_tnet", 3, &config.input_tnet);
        let mut convs = Vec::new();
        let mut feature_tnet = None;
        let mut w = 3;
        for (i, &c) in config.conv_widths.iter().enumerate() {
            convs.push(ConvBlock::new(&mut store, &mut rng, &format!("conv.{i}"), w, c));
            w = c;
            if i == config.local_layer && config.feature_transform {
                feature_tnet = Some(TNet::new(&mut store, &mut rng, "feature_tnet", c, &config.feature_tnet));
            }
        }
        let c_in = config.conv_widths[config.local_layer] + w;
        let head = Head::new(&mut store, &mut rng, c_in, &config.head_widths, config.num_parts);
        Ok(Self {
            config,
            store,
            input_tnet,
            convs,
            feature_tnet,
            head,
        })
    }
}

impl Segmenter for PointNetBaseline {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_parts(&self) -> usize {
        self.config.num_parts
    }

    fn lambda_reg(&self) -> f64 {
        self.config.lambda_reg
    }

    fn config_hash(&self) -> [u8; 32] {
        self.config.hash()
    }

    fn kind(&self) -> &'static str {
        POINTNET_KIND
    }

    fn config_toml(&self) -> Result<String> {
        to_toml(&self.config)
    }

    fn describe(&self) -> String {
        format!(
            "pointnet comparator: convs {:?}, local features from conv {}, head {:?} -> {} parts, max aggregation",
            self.config.conv_widths, self.config.local_layer, self.config.head_widths, self.config.num_parts
        )
    }

    fn forward(&self, fw: &mut Forward, cloud: Var) -> Result<SegOutput> {
        check_points(fw.graph, cloud)?;
        let (x, single) = as_batch(fw.graph, cloud)?;
        let (mut h, _) = self.input_tnet.apply(fw, x)?;
        let mut local = h;
        let mut a_feat = None;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(fw, h)?;
            if i == self.config.local_layer {
                if let Some(t) = &self.feature_tnet {
                    let (aligned, a) = t.apply(fw, h)?;
                    h = aligned;
                    a_feat = Some(a);
                }
                local = h;
            }
        }
        let global = max_over_points(fw.graph, h)?;
        let joined = join_local_global(fw.graph, local, global)?;
        let logits = self.head.forward(fw, joined)?;
        let out = SegOutput {
            logits,
            feature_transform: a_feat,
            local,
            global,
        };
        if single {
            unbatch(fw.graph, out)
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn small_widths() -> TNetWidths {
        TNetWidths {
            conv: vec![8, 16],
            fc: vec![16, 8],
        }
    }

    fn small(parts: usize) -> ModelConfig {
        ModelConfig {
            inception_plan: vec![8, 16],
            head_widths: vec![16, 8],
            num_parts: parts,
            input_tnet: small_widths(),
            feature_tnet: small_widths(),
            ..ModelConfig::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> Tensor {
        let data = (0..n * 3)
            .map(|i| ((i as f64 * 0.73 + seed as f64) * 1.91).sin())
            .collect();
        Tensor::new(vec![n, 3], data).unwrap()
    }

    #[test]
    fn logits_have_one_row_per_point() {
        let m = PigNet::new(small(3), 1).unwrap();
        let l = logits(&m, &cloud(16, 0)).unwrap();
        assert_eq!(l.shape(), &[16, 3]);
        assert!(l.is_finite());
        assert_eq!(predict(&m, &cloud(16, 0)).unwrap().len(), 16);
    }

    #[test]
    fn batch_forward_shapes() {
        let m = PigNet::new(small(3), 1).unwrap();
        let mut data = cloud(10, 1).into_data();
        data.extend(cloud(10, 2).into_data());
        let batch = Tensor::new(vec![2, 10, 3], data).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, m.store(), Mode::Train);
        let x = fw.graph.constant(batch);
        let out = m.forward(&mut fw, x).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 10, 3]);
        assert_eq!(g.shape(out.feature_transform.unwrap()), &[2, 48, 48]);
        assert_eq!(g.shape(out.global), &[2, 48]);
    }

    #[test]
    fn duplicated_points_get_identical_logits() {
        let m = PigNet::new(small(4), 2).unwrap();
        let mut x = cloud(12, 3);
        let first: Vec<f64> = x.row(0).to_vec();
        x.data_mut()[15..18].copy_from_slice(&first);
        let l = logits(&m, &x).unwrap();
        assert_eq!(l.row(0), l.row(5));
    }

    #[test]
    fn predictions_are_permutation_equivariant() {
        let m = PigNet::new(small(3), 4).unwrap();
        let x = cloud(9, 5);
        let perm = [4, 2, 7, 0, 8, 1, 3, 6, 5];
        let a = logits(&m, &x).unwrap().permute_rows(&perm);
        let b = logits(&m, &x.permute_rows(&perm)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn non_finite_and_misshapen_inputs() {
        let m = PigNet::new(small(3), 1).unwrap();
        let mut x = cloud(5, 0);
        x.data_mut()[4] = f64::NAN;
        assert!(matches!(logits(&m, &x), Err(Error::Input(_))));
        let wide = Tensor::zeros(&[5, 4]);
        assert!(matches!(logits(&m, &wide), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_examples() {
        let p = 4;
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[3, p]));
        let out = SegOutput {
            logits: zeros,
            feature_transform: None,
            local: zeros,
            global: zeros,
        };
        let l = segmentation_loss(&mut g, &out, &[0, 1, 3], 0.001).unwrap();
        assert!((g.value(l).data()[0] - (p as f64).ln()).abs() < 1e-12);

        let confident = g.constant(Tensor::from_rows(&[vec![20.0, 0.0], vec![0.0, 20.0]]).unwrap());
        let out = SegOutput {
            logits: confident,
            ..out
        };
        let l = segmentation_loss(&mut g, &out, &[0, 1], 0.0).unwrap();
        assert!(g.value(l).data()[0] < 1e-8);
        assert!(matches!(
            segmentation_loss(&mut g, &out, &[0, 2], 0.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn regularizer_enters_the_loss() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let a = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let out = SegOutput {
            logits: z,
            feature_transform: Some(a),
            local: z,
            global: z,
        };
        // ‖I − 4I‖² = 18 for k = 2
        let l = segmentation_loss(&mut g, &out, &[0, 1], 0.5).unwrap();
        assert!((g.value(l).data()[0] - (2f64.ln() + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_to_lowest_part() {
        let t = Tensor::from_rows(&[vec![1.0, 3.0, 3.0], vec![0.5, 0.5, 0.5], vec![0.0, -1.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0, 2]);
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let mut variants = vec![small(3)];
        variants.push(ModelConfig {
            use_inception: false,
            ..small(3)
        });
        variants.push(ModelConfig {
            feature_transform_after: Some(0),
            ..small(5)
        });
        variants.push(ModelConfig {
            feature_reduce: Some(8),
            ..small(2)
        });
        variants.push(ModelConfig {
            feature_transform: false,
            use_gap: false,
            ..small(4)
        });
        for cfg in variants {
            let m = PigNet::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.count_parameters(), cfg.parameter_count(), "{cfg:?}");
        }
        let b = BaselineConfig {
            conv_widths: vec![8, 8, 16, 32],
            input_tnet: small_widths(),
            feature_tnet: small_widths(),
            head_widths: vec![16],
            ..BaselineConfig::default()
        };
        let m = PointNetBaseline::new(b.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(), b.parameter_count());
    }

    #[test]
    fn baseline_default_count() {
        assert_eq!(BaselineConfig::default().parameter_count(), 3_528_461);
    }

    #[test]
    fn max_aggregation_variant() {
        let cfg = ModelConfig {
            use_gap: false,
            ..small(3)
        };
        let m = PigNet::new(cfg, 3).unwrap();
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, m.store(), Mode::Eval);
        let x = fw.graph.constant(cloud(7, 1));
        let out = m.forward(&mut fw, x).unwrap();
        let local = g.value(out.local).clone();
        let expect = max_over_points(&mut g, out.local).unwrap();
        assert_eq!(g.value(out.global), g.value(expect));
        assert_eq!(local.shape(), &[7, 48]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = PigNet::new(small(3), 9).unwrap();
        let b = PigNet::new(small(3), 9).unwrap();
        let c = PigNet::new(small(3), 10).unwrap();
        let same = |x: &PigNet, y: &PigNet| {
            x.store
                .entries()
                .iter()
                .zip(y.store.entries())
                .all(|(p, q)| p.value == q.value)
        };
        assert!(same(&a, &b));
        assert!(!same(&a, &c));
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), PigNet::new(small(4), 9).unwrap().config_hash());
    }

    #[test]
    fn invalid_configs() {
        assert!(PigNet::new(ModelConfig { inception_plan: vec![], ..small(3) }, 0).is_err());
        assert!(PigNet::new(ModelConfig { inception_plan: vec![7], ..small(3) }, 0).is_err());
        assert!(PigNet::new(small(1), 0).is_err());
        assert!(PigNet::new(ModelConfig { feature_transform_after: Some(2), ..small(3) }, 0).is_err());
        assert!(PigNet::new(ModelConfig { lambda_reg: -1.0, ..small(3) }, 0).is_err());
    }

    fn full_model_gradient_error(model: &dyn Segmenter, n: usize) -> f64 {
        let store = model.store();
        let ids = store.trainable_ids();
        let params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let x = cloud(n, 7);
        let labels: Vec<usize> = (0..n).map(|i| i % model.num_parts()).collect();
        finite_diff_check(
            |g, vars| {
                for (&id, &v) in ids.iter().zip(vars) {
                    g.bind_param(id, v);
                }
                let mut fw = Forward::new(g, store, Mode::Train);
                let input = fw.graph.constant(x.clone());
                let out = model.forward(&mut fw, input)?;
                segmentation_loss(fw.graph, &out, &labels, model.lambda_reg())
            },
            &params,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn full_model_gradients_match_differences() {
        let cfg = ModelConfig {
            feature_reduce: Some(6),
            ..small(3)
        };
        let mut m = PigNet::new(cfg, 11).unwrap();
        // move the transform layers off their zero/identity init so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in m.store.trainable_ids() {
            if m.store.name(id).contains("tnet.out") {
                for v in m.store.get_mut(id).data_mut() {
                    *v += rand::Rng::random_range(&mut rng, -0.05..0.05);
                }
            }
        }
        let err = full_model_gradient_error(&m, 4);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn baseline_gradients_match_differences() {
        let b = BaselineConfig {
            conv_widths: vec![8, 6, 16],
            input_tnet: small_widths(),
            feature_tnet: small_widths(),
            head_widths: vec![8],
            num_parts: 3,
            ..BaselineConfig::default()
        };
        let m = PointNetBaseline::new(b, 2).unwrap();
        let err = full_model_gradient_error(&m, 4);
        assert!(err < 1e-3, "max relative error {err}");
    }
}
