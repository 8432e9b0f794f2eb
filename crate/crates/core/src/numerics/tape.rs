//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep. Parameters
//! are borrowed from a [`ParamStore`] rather than copied.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Targets equal to this value are skipped by [`Tape::cross_entropy`].
pub const IGNORE_INDEX: i64 = -100;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Val<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, trans_b: bool },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    Sum { a: usize },
    Mean { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    /// Keeps `tanh(c(x + a x³))` for the backward pass.
    Gelu { a: usize, t: Vec<f64> },
    Tanh { a: usize },
    Relu { a: usize },
    Embedding { table: usize, ids: Vec<u32> },
    Dropout { a: usize, mask: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<i64>, probs: Vec<f64>, count: usize },
    SplitHeads { a: usize, batch: usize, len: usize, heads: usize },
    MergeHeads { a: usize, batch: usize, len: usize, heads: usize },
    MaskKeys { a: usize, valid: Vec<bool>, heads: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    SegmentMean { a: usize, segments: Vec<Vec<usize>> },
    Reshape { a: usize },
}

struct Node<'p> {
    val: Val<'p>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<usize>>,
}

/// Gradients produced by [`Tape::backward`], kept for leaf nodes only.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<usize>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|n| self.node_grads[n].as_ref())
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.node_grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    /// A tape that may read parameters from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].val.get()
    }

    fn val(&self, i: usize) -> &Tensor {
        self.nodes[i].val.get()
    }

    fn push(&mut self, t: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            val: Val::Owned(t),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            val: Val::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            val: Val::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(n)) = self.param_nodes.get(id.0) {
            return Var(*n);
        }
        let store = self.store.expect("tape was created without a parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            val: Val::Borrowed(&p.value),
            op: Op::Param,
            needs_grad: p.requires_grad,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        Var(n)
    }

    /// `a·b` where `a` is `[.., K]` (leading dims flattened) and `b` is `[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` where `b` is `[N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if tb.shape().len() != 2 || ta.shape().is_empty() {
            return Err(mismatch());
        }
        let k = ta.cols();
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let m = ta.rows();
        let mut out = vec![0.0; m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), b_strides, 0.0, &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0]))
    }

    /// Batched product of `[G, M, K]` with `[G, K, N]` (or `[G, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let mismatch = || Error::ShapeMismatch {
            op: "bmm",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch());
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; g * m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                (k as isize, 1),
                &tb.data()[i * k * n..],
                b_strides,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        ta.same_shape(tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds a `[N]` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(bias.0));
        if tb.shape().len() != 1 || tb.len() != ta.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        ta.same_shape(tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.val(a.0);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(t, Op::Scale { a: a.0, s }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a.0).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let s = ta.data().iter().sum::<f64>() / ta.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Softmax along the last dimension. `-inf` entries get probability 0.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a.0);
        let c = ta.cols();
        if c == 0 || ta.shape().is_empty() {
            return Err(Error::EmptySoftmaxRow);
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a: a.0 }, &[a.0]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma`/`beta` of shape `[N]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x.0), self.val(gamma.0), self.val(beta.0));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let th: Vec<f64> = ta.data().iter().map(|&x| (GELU_C * (x + GELU_A * x * x * x)).tanh()).collect();
        let data = ta.data().iter().zip(&th).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { a: a.0, t: th }, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect())
            .expect("same shape");
        self.push(t, Op::Tanh { a: a.0 }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.val(a.0);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())
            .expect("same shape");
        self.push(t, Op::Relu { a: a.0 }, &[a.0])
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.val(table.0);
        if tt.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: tt.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::IdOutOfRange { id, vocab_size: v });
            }
            out.extend_from_slice(tt.row(id as usize));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1/(1-rate)`. A zero rate is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let ta = self.val(a.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { a: a.0, mask }, &[a.0])
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits` (`[N, C]`), skipping [`IGNORE_INDEX`]. Zero when every target
    /// is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let tl = self.val(logits.0);
        let c = tl.cols();
        if tl.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(Error::IdOutOfRange { id: t as u32, vocab_size: c });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            total += lse - row[t as usize];
            softmax_in_place(row);
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count },
            &[logits.0],
        ))
    }

    /// `[B·L, H·dh]` → `[B·H, L, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let ta = self.val(a.0);
        let d = ta.cols();
        if ta.rows() != batch * len || heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                left: ta.shape().to_vec(),
                right: vec![batch, len, heads],
            });
        }
        let out = permute_heads(ta.data(), batch, len, heads, d / heads, true);
        let t = Tensor::new(vec![batch * heads, len, d / heads], out)?;
        Ok(self.push(t, Op::SplitHeads { a: a.0, batch, len, heads }, &[a.0]))
    }

    /// `[B·H, L, dh]` → `[B·L, H·dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let ta = self.val(a.0);
        if ta.shape().len() != 3 || ta.shape()[0] != batch * heads || ta.shape()[1] != len {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                left: ta.shape().to_vec(),
                right: vec![batch, len, heads],
            });
        }
        let dh = ta.shape()[2];
        let out = permute_heads(ta.data(), batch, len, heads, dh, false);
        let t = Tensor::new(vec![batch * len, heads * dh], out)?;
        Ok(self.push(t, Op::MergeHeads { a: a.0, batch, len, heads }, &[a.0]))
    }

    /// Sets attention logits `[B·H, Lq, Lk]` to `-inf` wherever the key is
    /// invalid. `key_valid` has `B·Lk` entries.
    pub fn mask_keys(&mut self, a: Var, key_valid: &[bool], heads: usize) -> Result<Var> {
        let ta = self.val(a.0);
        if ta.shape().len() != 3 || heads == 0 || ta.shape()[0] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "mask_keys",
                left: ta.shape().to_vec(),
                right: vec![key_valid.len()],
            });
        }
        let (g, lq, lk) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        if key_valid.len() != (g / heads) * lk {
            return Err(Error::ShapeMismatch {
                op: "mask_keys",
                left: ta.shape().to_vec(),
                right: vec![key_valid.len()],
            });
        }
        let mut out = ta.data().to_vec();
        for gi in 0..g {
            let b = gi / heads;
            for q in 0..lq {
                for k in 0..lk {
                    if !key_valid[b * lk + k] {
                        out[(gi * lq + q) * lk + k] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaskKeys { a: a.0, valid: key_valid.to_vec(), heads }, &[a.0]))
    }

    /// Rows `idx` of `a` viewed as `[rows, cols]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.val(a.0);
        let (rows, c) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    left: ta.shape().to_vec(),
                    right: vec![i],
                });
            }
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { a: a.0, idx: idx.to_vec() }, &[a.0]))
    }

    /// Output row `s` is the mean of the rows of `a` listed in `segments[s]`.
    pub fn segment_mean(&mut self, a: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let ta = self.val(a.0);
        let (rows, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.iter().any(|&i| i >= rows) {
                return Err(Error::ShapeMismatch {
                    op: "segment_mean",
                    left: ta.shape().to_vec(),
                    right: seg.clone(),
                });
            }
            let w = 1.0 / seg.len() as f64;
            let dst = &mut out[s * c..(s + 1) * c];
            for &i in seg {
                for (d, x) in dst.iter_mut().zip(ta.row(i)) {
                    *d += x * w;
                }
            }
        }
        let t = Tensor::new(vec![segments.len(), c], out)?;
        Ok(self.push(t, Op::SegmentMean { a: a.0, segments: segments.to_vec() }, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a.0).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss.0);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, g, &mut grads)?;
        }
        Ok(Gradients {
            node_grads: grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            None => grads[idx] = Some(g),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn backprop_node(&self, i: usize, mut g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = self.val(i);
        let like = |idx: usize, data: Vec<f64>| -> Tensor {
            Tensor::new(self.val(idx).shape().to_vec(), data).expect("gradient shape")
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    let b_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), b_strides, 0.0, &mut da);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(n, m, k, g.data(), (1, n as isize), ta.data(), (k as isize, 1), 0.0, &mut db);
                    } else {
                        gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut db);
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (bg, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; bg * m * k];
                    let b_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for gi in 0..bg {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[gi * m * n..],
                            (n as isize, 1),
                            &tb.data()[gi * k * n..],
                            b_strides,
                            0.0,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bg * k * n];
                    for gi in 0..bg {
                        let gs = &g.data()[gi * m * n..];
                        let as_ = &ta.data()[gi * m * k..];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gs, (1, n as isize), as_, (k as isize, 1), 0.0, dst);
                        } else {
                            gemm(k, m, n, as_, (1, k as isize), gs, (n as isize, 1), 0.0, dst);
                        }
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) && self.needs(*b) {
                    self.accumulate(grads, *a, g.clone());
                }
                let dst = if self.needs(*b) { *b } else { *a };
                self.accumulate(grads, dst, g);
            }
            Op::AddBias { a, bias } => {
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, like(*bias, db));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale { a, s } => {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
                self.accumulate(grads, *a, g);
            }
            Op::Sum { a } => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, like(*a, vec![g.item(); n]));
            }
            Op::Mean { a } => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, like(*a, vec![g.item() / n.max(1) as f64; n]));
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((dr, pr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(p, x)| p * x).sum();
                    for j in 0..c {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = self.val(*gamma);
                let c = tg.len();
                let rows = rstd.len();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g.data()[r * c + j] * xhat[r * c + j];
                            db[j] += g.data()[r * c + j];
                        }
                    }
                    self.accumulate(grads, *gamma, like(*gamma, dg));
                    self.accumulate(grads, *beta, like(*beta, db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * c];
                    let mut dy = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dy[j] = g.data()[r * c + j] * tg.data()[j];
                        }
                        let mean_dy = dy.iter().sum::<f64>() / c as f64;
                        let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dy[j] - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
            }
            Op::Gelu { a, t: th } => {
                let ta = self.val(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(th)
                    .zip(g.data())
                    .map(|((&x, &t), gx)| {
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gx * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Tanh { a } => {
                let d = out.data().iter().zip(g.data()).map(|(y, gx)| gx * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Relu { a } => {
                let ta = self.val(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gx)| if *x > 0.0 { *gx } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Embedding { table, ids } => {
                let tt = self.val(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (x, y) in dst.iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *table, like(*table, dt));
            }
            Op::Dropout { a, mask } => {
                g.data_mut().iter_mut().zip(mask).for_each(|(x, m)| *x *= m);
                self.accumulate(grads, *a, g);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.val(*logits).cols();
                let mut d = vec![0.0; probs.len()];
                if *count > 0 {
                    let w = g.item() / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..c {
                            d[r * c + j] = w * probs[r * c + j];
                        }
                        d[r * c + t as usize] -= w;
                    }
                }
                self.accumulate(grads, *logits, like(*logits, d));
            }
            Op::SplitHeads { a, batch, len, heads } => {
                let dh = out.shape()[2];
                let d = permute_heads(g.data(), *batch, *len, *heads, dh, false);
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::MergeHeads { a, batch, len, heads } => {
                let dh = out.cols() / heads;
                let d = permute_heads(g.data(), *batch, *len, *heads, dh, true);
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::MaskKeys { a, valid, heads } => {
                let (lq, lk) = (out.shape()[1], out.shape()[2]);
                let mut d = g.into_data();
                for (gi, block) in d.chunks_mut(lq * lk).enumerate() {
                    let b = gi / heads;
                    for q in 0..lq {
                        for k in 0..lk {
                            if !valid[b * lk + k] {
                                block[q * lk + k] = 0.0;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::GatherRows { a, idx } => {
                let ta = self.val(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (x, y) in d[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::SegmentMean { a, segments } => {
                let ta = self.val(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for (s, seg) in segments.iter().enumerate() {
                    let w = 1.0 / seg.len() as f64;
                    for &src in seg {
                        for (x, y) in d[src * c..(src + 1) * c].iter_mut().zip(g.row(s)) {
                            *x += y * w;
                        }
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, like(*a, g.into_data()));
            }
        }
        Ok(())
    }
}

fn permute_heads(src: &[f64], batch: usize, len: usize, heads: usize, dh: usize, split: bool) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for l in 0..len {
            for h in 0..heads {
                let flat = (b * len + l) * d + h * dh;
                let head = ((b * heads + h) * len + l) * dh;
                let (from, to) = if split { (flat, head) } else { (head, flat) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
