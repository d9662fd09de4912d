use std::collections::HashMap;

use super::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    /// `src[i]` is the input element that produced output element `i`.
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    ReduceMean {
        x: Var,
        outer: usize,
        n: usize,
        k: usize,
    },
    Broadcast {
        x: Var,
        outer: usize,
        n: usize,
        k: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Define-by-run record of one forward pass.
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op>,
    params: Vec<(ParamId, Var)>,
    param_index: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_index.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.params.push((id, v));
        self.param_index.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` resolve to an existing node.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.push((id, v));
        self.param_index.insert(id, v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient accumulated at `v` by [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).unwrap())
    }

    /// Gradients of every registered trainable parameter; zeros where no path reached it.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter(|(_, v)| self.rg(*v))
            .map(|&(id, v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape()));
                (id, g)
            })
            .collect()
    }

    // ---- operations -------------------------------------------------------

    /// Matrix product `a · b`. `a` may carry leading batch axes, which are
    /// flattened into rows; `b` must be a matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let inner = sb[0];
        let cols = sb[1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; rows * cols];
        gemm(
            rows,
            inner,
            cols,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            false,
            &mut out,
            0.0,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = cols;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            },
            rg,
        ))
    }

    /// Batched product `[B,m,k] · [B,k,p] → [B,m,p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let (batch, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * p];
        {
            let ad = self.values[a.0].data();
            let bd = self.values[b.0].data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    p,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * p..(i + 1) * k * p],
                    false,
                    &mut out[i * m * p..(i + 1) * m * p],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, p], out)?,
            Op::BatchMatMul { a, b, batch, m, k, p },
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::Dimension(format!("transpose of shape {s:?}"))),
        };
        let d = self.values[x.0].data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = d[off + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Transpose { x, batch, rows, cols },
            rg,
        ))
    }

    /// Adds a `[k]` bias to every row of `x[..., k]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(dim_err("add_bias", &sx, &sb));
        }
        let k = sb[0];
        let b = self.values[bias.0].data();
        let mut out = self.values[x.0].data().to_vec();
        if k > 0 {
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddBias { x, bias }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(dim_err(what, sa, sb));
        }
        let out = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(sa.to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = &self.values[x.0];
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&e| if e > 0.0 { e } else { 0.0 }).collect(),
        )
        .unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    fn point_axis(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Dimension(format!(
                "{what} needs a point axis, got shape {s:?}"
            )));
        }
        let k = s[s.len() - 1];
        let n = s[s.len() - 2];
        let outer = s[..s.len() - 2].iter().product();
        if n == 0 {
            return Err(Error::Domain(format!("{what} over an empty point axis")));
        }
        Ok((outer, n, k))
    }

    fn drop_point_axis(&self, x: Var) -> Vec<usize> {
        let s = self.shape(x);
        let mut out = s[..s.len() - 2].to_vec();
        out.push(s[s.len() - 1]);
        out
    }

    /// Maximum over the point axis. Backward routes each column's gradient to
    /// the first row attaining the maximum.
    pub fn reduce_max(&mut self, x: Var) -> Result<Var> {
        let (outer, n, k) = self.point_axis(x, "reduce_max")?;
        let d = self.values[x.0].data();
        let mut out = Vec::with_capacity(outer * k);
        let mut src = Vec::with_capacity(outer * k);
        for b in 0..outer {
            let base = b * n * k;
            for c in 0..k {
                let mut best = base + c;
                for i in 1..n {
                    let idx = base + i * k + c;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                src.push(best);
            }
        }
        let shape = self.drop_point_axis(x);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, src }, rg))
    }

    /// Arithmetic mean over the point axis.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let (outer, n, k) = self.point_axis(x, "reduce_mean")?;
        let d = self.values[x.0].data();
        let mut out = vec![0.0; outer * k];
        for b in 0..outer {
            let acc = &mut out[b * k..(b + 1) * k];
            for i in 0..n {
                let row = &d[(b * n + i) * k..(b * n + i + 1) * k];
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        let shape = self.drop_point_axis(x);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::ReduceMean { x, outer, n, k }, rg))
    }

    /// Repeats `x[..., k]` along a new point axis of extent `n`: `[..., n, k]`.
    pub fn broadcast_points(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::Dimension("broadcast of a scalar".into()));
        }
        let k = s[s.len() - 1];
        let outer = s[..s.len() - 1].iter().product();
        let d = self.values[x.0].data();
        let mut out = Vec::with_capacity(outer * n * k);
        for b in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&d[b * k..(b + 1) * k]);
            }
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(n);
        shape.push(k);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Broadcast { x, outer, n, k }, rg))
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat", self.shape(first), s));
            }
            widths.push((p, s[s.len() - 1]));
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: widths,
                rows,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Sliding maximum along the channel axis: window 3, stride 1, edge
    /// replicated so the width is preserved. Rows are independent.
    pub fn channel_window_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::Dimension("channel_window_max of a scalar".into()))?;
        if k == 0 {
            return Err(Error::Domain("channel_window_max over zero channels".into()));
        }
        let d = self.values[x.0].data();
        let rows = d.len() / k;
        let mut out = Vec::with_capacity(d.len());
        let mut src = Vec::with_capacity(d.len());
        for r in 0..rows {
            let base = r * k;
            for j in 0..k {
                let lo = j.saturating_sub(1);
                let hi = (j + 1).min(k - 1);
                let mut best = base + lo;
                for c in [j, hi] {
                    if d[base + c] > d[best] {
                        best = base + c;
                    }
                }
                out.push(d[best]);
                src.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::Gather { x, src }, rg))
    }

    /// Batch normalization with statistics pooled over every row of
    /// `x[..., k]` (population variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::Dimension("batch_norm of a scalar".into()))?;
        self.check_affine(gamma, beta, k)?;
        let d = self.values[x.0].data();
        let rows = if k == 0 { 0 } else { d.len() / k };
        if rows < 2 {
            return Err(Error::Degenerate(format!(
                "training-mode batch norm needs at least 2 samples per channel, got {rows}"
            )));
        }
        let mut mean = vec![0.0; k];
        for row in d.chunks(k) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; k];
        for row in d.chunks(k) {
            for c in 0..k {
                let e = row[c] - mean[c];
                var[c] += e * e;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_rows(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::Dimension("batch_norm of a scalar".into()))?;
        self.check_affine(gamma, beta, k)?;
        if mean.len() != k || var.len() != k {
            return Err(Error::Dimension(format!(
                "running statistics of width {} for {k} channels",
                mean.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_rows(x, gamma, beta, mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, k: usize) -> Result<()> {
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(Error::Dimension(format!(
                "batch norm affine of shapes {:?}/{:?} for {k} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    fn normalize_rows(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let k = mean.len();
        let d = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut xhat = Vec::with_capacity(d.len());
        let mut out = Vec::with_capacity(d.len());
        if k > 0 {
            for row in d.chunks(k) {
                for c in 0..k {
                    let h = (row[c] - mean[c]) * inv_std[c];
                    xhat.push(h);
                    out.push(h * g[c] + b[c]);
                }
            }
        }
        (out, xhat)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, with the softmax fused
    /// into a log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let classes = *s.last().ok_or_else(|| Error::Dimension("cross entropy of a scalar".into()))?;
        let d = self.values[logits.0].data();
        let rows = if classes == 0 { 0 } else { d.len() / classes };
        if rows != labels.len() {
            return Err(Error::Dimension(format!(
                "{rows} logit rows for {} labels",
                labels.len()
            )));
        }
        if rows == 0 {
            return Err(Error::Domain("cross entropy over zero rows".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {} at point {i} is outside [0, {classes})",
                labels[i]
            )));
        }
        let mut probs = Vec::with_capacity(d.len());
        let mut total = 0.0;
        for (row, &label) in d.chunks(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of every node reachable from the scalar `loss`.
    /// A graph supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; build a new graph for another pass".into(),
            ));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.apply_rule(&op, &g);
            self.ops[i] = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], values: &[Tensor], v: Var) -> &'a mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].numel()])
    }

    fn accumulate(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if !self.requires_grad[v.0] {
            return;
        }
        let buf = Self::grad_buf(&mut self.grads, &self.values, v);
        buf.iter_mut().enumerate().for_each(|(i, b)| *b += f(i));
    }

    fn apply_rule(&mut self, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            } => {
                if self.requires_grad[a.0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.values, a);
                    // dA = G · Bᵀ
                    gemm(rows, cols, inner, g, false, self.values[b.0].data(), true, buf, 1.0);
                }
                if self.requires_grad[b.0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.values, b);
                    // dB = Aᵀ · G
                    gemm(inner, rows, cols, self.values[a.0].data(), true, g, false, buf, 1.0);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, p } => {
                if self.requires_grad[a.0] {
                    let bd = self.values[b.0].data();
                    let buf = Self::grad_buf(&mut self.grads, &self.values, a);
                    for i in 0..batch {
                        gemm(
                            m,
                            p,
                            k,
                            &g[i * m * p..(i + 1) * m * p],
                            false,
                            &bd[i * k * p..(i + 1) * k * p],
                            true,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.requires_grad[b.0] {
                    let ad = self.values[a.0].data();
                    let buf = Self::grad_buf(&mut self.grads, &self.values, b);
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            p,
                            &ad[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * p..(i + 1) * m * p],
                            false,
                            &mut buf[i * k * p..(i + 1) * k * p],
                            1.0,
                        );
                    }
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                self.accumulate(x, |idx| {
                    let b = idx / (rows * cols);
                    let r = (idx % (rows * cols)) / cols;
                    let c = idx % cols;
                    g[b * rows * cols + c * rows + r]
                });
                let _ = batch;
            }
            Op::AddBias { x, bias } => {
                self.accumulate(x, |i| g[i]);
                if self.requires_grad[bias.0] {
                    let k = self.values[bias.0].numel();
                    let buf = Self::grad_buf(&mut self.grads, &self.values, bias);
                    if k > 0 {
                        for row in g.chunks(k) {
                            buf.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, |i| g[i]);
                self.accumulate(b, |i| g[i]);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, |i| g[i]);
                self.accumulate(b, |i| -g[i]);
            }
            Op::Mul { a, b } => {
                let av = self.values[a.0].data().to_vec();
                let bv = self.values[b.0].data().to_vec();
                self.accumulate(a, |i| g[i] * bv[i]);
                self.accumulate(b, |i| g[i] * av[i]);
            }
            Op::Scale { x, c } => self.accumulate(x, |i| g[i] * c),
            Op::Relu { x } => {
                if self.requires_grad[x.0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.values, x);
                    for ((b, &v), &gi) in buf.iter_mut().zip(self.values[x.0].data()).zip(g) {
                        if v > 0.0 {
                            *b += gi;
                        }
                    }
                }
            }
            Op::Gather { x, ref src } => {
                if self.requires_grad[x.0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.values, x);
                    for (&s, &gi) in src.iter().zip(g) {
                        buf[s] += gi;
                    }
                }
            }
            Op::ReduceMean { x, outer, n, k } => {
                let inv = 1.0 / n as f64;
                self.accumulate(x, |idx| {
                    let b = idx / (n * k);
                    let c = idx % k;
                    g[b * k + c] * inv
                });
                let _ = outer;
            }
            Op::Broadcast { x, outer, n, k } => {
                if self.requires_grad[x.0] {
                    let buf = Self::grad_buf(&mut self.grads, &self.values, x);
                    for b in 0..outer {
                        for i in 0..n {
                            let row = &g[(b * n + i) * k..(b * n + i + 1) * k];
                            buf[b * k..(b + 1) * k]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            Op::Concat { ref parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.requires_grad[p.0] {
                        let buf = Self::grad_buf(&mut self.grads, &self.values, p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => self.accumulate(x, |i| g[i]),
            Op::Sum { x } => {
                let s = g[0];
                self.accumulate(x, |_| s);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let k = inv_std.len();
                let rows = xhat.len() / k;
                let gam = self.values[gamma.0].data().to_vec();
                let mut sum_g = vec![0.0; k];
                let mut sum_gx = vec![0.0; k];
                for r in 0..rows {
                    for c in 0..k {
                        let gi = g[r * k + c];
                        sum_g[c] += gi;
                        sum_gx[c] += gi * xhat[r * k + c];
                    }
                }
                if self.requires_grad[x.0] {
                    let nf = rows as f64;
                    let buf = Self::grad_buf(&mut self.grads, &self.values, x);
                    for r in 0..rows {
                        for c in 0..k {
                            let i = r * k + c;
                            buf[i] += gam[c] * inv_std[c] / nf
                                * (nf * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        }
                    }
                }
                self.accumulate(gamma, |c| sum_gx[c]);
                self.accumulate(beta, |c| sum_g[c]);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let k = inv_std.len();
                let rows = xhat.len() / k;
                let gam = self.values[gamma.0].data().to_vec();
                self.accumulate(x, |i| g[i] * gam[i % k] * inv_std[i % k]);
                let mut sum_g = vec![0.0; k];
                let mut sum_gx = vec![0.0; k];
                for r in 0..rows {
                    for c in 0..k {
                        sum_g[c] += g[r * k + c];
                        sum_gx[c] += g[r * k + c] * xhat[r * k + c];
                    }
                }
                self.accumulate(gamma, |c| sum_gx[c]);
                self.accumulate(beta, |c| sum_g[c]);
            }
            Op::CrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let s = g[0] / rows as f64;
                self.accumulate(logits, |i| {
                    let r = i / classes;
                    let onehot = if labels[r] == i % classes { 1.0 } else { 0.0 };
                    (probs[i] - onehot) * s
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(m(&[&[1.0, 2.0]]));
        let z = g.constant(m(&[&[0.0], &[0.0]]));
        let out = g.matmul(r, z).unwrap();
        assert_eq!(g.value(out).data(), &[0.0]);

        // 1·5+2·6 = 17, 3·5+4·6 = 39
        let c = g.constant(m(&[&[5.0], &[6.0]]));
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn reduce_max_examples_and_tie_rule() {
        let mut g = Graph::new();
        let a = g.leaf(m(&[&[1.0, 3.0], &[5.0, 2.0]]), true);
        let out = g.reduce_max(a).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 3.0]);

        let single = g.constant(m(&[&[7.0, 8.0]]));
        let out = g.reduce_max(single).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, 8.0]);

        let mut g = Graph::new();
        let tied = g.leaf(m(&[&[2.0, 2.0], &[2.0, 2.0]]), true);
        let out = g.reduce_max(tied).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 2.0]);
        let s = g.sum(out);
        g.backward(s).unwrap();
        // enumerate the rows: only row 0 may carry gradient
        assert_eq!(g.grad(tied).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reductions_reject_empty_point_axis() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(g.reduce_max(e), Err(Error::Domain(_))));
        assert!(matches!(g.reduce_mean(e), Err(Error::Domain(_))));
    }

    #[test]
    fn reduce_mean_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let out = g.reduce_mean(a).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 5.0]);

        let c = g.constant(Tensor::full(&[4, 3], 2.5));
        let out = g.reduce_mean(c).unwrap();
        assert_eq!(g.value(out).data(), &[2.5, 2.5, 2.5]);

        // sum/n oracle: (1+2+3)/3, (2+4+6)/3
        let b = g.constant(m(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]));
        let out = g.reduce_mean(b).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0], &[2.0]]));
        let b = g.constant(m(&[&[3.0], &[4.0]]));
        let out = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 3.0, 2.0, 4.0]);

        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let out = g.concat(&[a, empty]).unwrap();
        assert_eq!(g.value(out), g.value(a));

        let x = g.constant(Tensor::zeros(&[5, 64]));
        let y = g.constant(Tensor::zeros(&[5, 1024]));
        let out = g.concat(&[x, y]).unwrap();
        assert_eq!(g.shape(out), &[5, 64 + 1024]);

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.concat(&[a, bad]), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_examples_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let p = g.constant(Tensor::vector(&[0.5, 3.0]));
        let y = g.relu(p);
        assert_eq!(g.value(y).data(), &[0.5, 3.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[-1.0, 2.0, 0.0]), true);
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn channel_window_max_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 4.0, 2.0, 5.0]).reshape(&[1, 4]).unwrap());
        let y = g.channel_window_max(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 5.0, 5.0]);

        let c = g.constant(Tensor::full(&[2, 5], 1.5));
        let y = g.channel_window_max(c).unwrap();
        assert_eq!(g.value(y), g.value(c));

        let one = g.constant(m(&[&[3.0], &[-2.0]]));
        let y = g.channel_window_max(one).unwrap();
        assert_eq!(g.value(y), g.value(one));
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut g = Graph::new();
        let l = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let loss = g.cross_entropy(l, &[0, 1]).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.313262).abs() < 1e-6);
        assert!(matches!(g.cross_entropy(l, &[0, 2]), Err(Error::Data(_))));
    }

    #[test]
    fn broadcast_gradient_sums_over_rows() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let b = g.broadcast_points(x, 3).unwrap();
        assert_eq!(g.shape(b), &[3, 2]);
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }
}
