//! Reference vertex functions, parameter initialization and loss heads.
//!
//! Losses live outside the vertex function: they read the pushed rows of a
//! batch's loss vertices, and their gradients seed the push-gradient
//! channel of the backward pass.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BuildError, TensorError, TrainError};
use crate::graph::{GraphBatch, InputGraph};
use crate::ir::{FunctionBuilder, SymbolId, VertexFunction};
use crate::memory::{Exchange, ParamSet};
use crate::tensor::{apply_kernel, KernelOp, TensorView, TensorViewMut, WriteMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    TreeLstm,
    TreeFc,
    FixedLstm,
    VarLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::TreeLstm, Self::TreeFc, Self::FixedLstm, Self::VarLstm];

    pub fn name(self) -> &'static str {
        match self {
            Self::TreeLstm => "tree-lstm",
            Self::TreeFc => "tree-fc",
            Self::FixedLstm => "fixed-lstm",
            Self::VarLstm => "var-lstm",
        }
    }

    pub fn is_chain(self) -> bool {
        matches!(self, Self::FixedLstm | Self::VarLstm)
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown model {s:?}; expected one of tree-lstm, tree-fc, fixed-lstm, var-lstm"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    SoftmaxXent,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SoftmaxXent => "softmax-xent",
            Self::Mse => "mse",
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax-xent" => Ok(Self::SoftmaxXent),
            "mse" => Ok(Self::Mse),
            _ => Err(format!("unknown loss {s:?}; expected softmax-xent or mse")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPreset {
    pub kind: ModelKind,
    pub arity: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub loss: LossKind,
}

impl ModelPreset {
    /// Binary trees for the tree models, chains for the LSTMs; the two
    /// sequence models and Tree-LSTM classify, Tree-FC regresses.
    pub fn new(kind: ModelKind, hidden: usize, input_dim: usize) -> Self {
        let (arity, loss) = match kind {
            ModelKind::TreeLstm => (2, LossKind::SoftmaxXent),
            ModelKind::TreeFc => (2, LossKind::Mse),
            ModelKind::FixedLstm | ModelKind::VarLstm => (1, LossKind::SoftmaxXent),
        };
        Self {
            kind,
            arity,
            hidden,
            input_dim,
            loss,
        }
    }

    pub fn with_arity(mut self, arity: usize) -> Self {
        self.arity = arity;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    /// The preset's shape-inferred vertex function.
    pub fn vertex_function(&self) -> Result<VertexFunction, BuildError> {
        if self.hidden == 0 || self.input_dim == 0 || self.arity == 0 {
            return Err(BuildError::Invalid {
                expr: 0,
                msg: format!(
                    "{} needs hidden, input_dim and arity >= 1, got {}, {}, {}",
                    self.kind.name(),
                    self.hidden,
                    self.input_dim,
                    self.arity
                ),
            });
        }
        match self.kind {
            ModelKind::TreeLstm => tree_lstm_fn(self.arity, self.hidden, self.input_dim),
            ModelKind::TreeFc => tree_fc_fn_nary(self.arity, self.hidden, self.input_dim),
            ModelKind::FixedLstm | ModelKind::VarLstm => chain_lstm_fn(self.hidden, self.input_dim),
        }
    }

    /// Rejects graphs the preset cannot run on.
    pub fn check_corpus(&self, corpus: &[InputGraph]) -> Result<(), TrainError> {
        for (i, g) in corpus.iter().enumerate() {
            g.check_arity(self.arity)
                .map_err(|e| TrainError::Incompatible(format!("graph {i}: {e}")))?;
            if let Some(x) = g.ext_inputs() {
                for (v, row) in x.iter().enumerate() {
                    if !row.is_empty() && row.len() != self.input_dim {
                        return Err(TrainError::Incompatible(format!(
                            "graph {i}, vertex {v}: input has {} values, model expects {}",
                            row.len(),
                            self.input_dim
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// N-ary child-sum Tree-LSTM. State is `concat(c, h)`; the pushed output
/// is `h`.
pub fn tree_lstm_fn(arity: usize, hidden: usize, input_dim: usize) -> Result<VertexFunction, BuildError> {
    let (n, h, d) = (arity, hidden, input_dim);
    let mut b = FunctionBuilder::new(n);
    let gate_params = |b: &mut FunctionBuilder, g: &str| {
        (
            b.param(&format!("W_{g}"), &[d, h]),
            b.param(&format!("U_{g}"), &[h, h]),
            b.param(&format!("b_{g}"), &[h]),
        )
    };
    let (wi, ui, bi) = gate_params(&mut b, "i");
    let (wo, uo, bo) = gate_params(&mut b, "o");
    let (wu, uu, bu) = gate_params(&mut b, "u");
    let (wf, uf, bf) = gate_params(&mut b, "f");

    let mut cs = Vec::with_capacity(n);
    let mut hs = Vec::with_capacity(n);
    for k in 0..n {
        let s = b.gather(k);
        let parts = b.split(s, 2);
        cs.push(b.name(parts[0], &format!("c_{k}")));
        hs.push(b.name(parts[1], &format!("h_{k}")));
    }
    let x = b.pull();
    b.name(x, "x");
    let mut hsum = hs[0];
    for &hk in &hs[1..] {
        hsum = b.add(hsum, hk);
    }

    let gate = |b: &mut FunctionBuilder, w, u, bias| {
        let wx = b.matmul(x, w);
        let uh = b.matmul(hsum, u);
        let s = b.add(wx, uh);
        b.add(s, bias)
    };
    let i = gate(&mut b, wi, ui, bi);
    let i = b.sigmoid(i);
    let o = gate(&mut b, wo, uo, bo);
    let o = b.sigmoid(o);
    let u = gate(&mut b, wu, uu, bu);
    let u = b.tanh(u);

    let wfx = b.matmul(x, wf);
    let mut c = b.mul(i, u);
    for k in 0..n {
        let ufh = b.matmul(hs[k], uf);
        let f = b.add(wfx, ufh);
        let f = b.add(f, bf);
        let f = b.sigmoid(f);
        let fc = b.mul(f, cs[k]);
        c = b.add(c, fc);
    }
    let c = b.name(c, "c");
    let tc = b.tanh(c);
    let hn = b.mul(o, tc);
    let hn = b.name(hn, "h");
    let state = b.concat(&[c, hn]);
    b.scatter(state);
    b.push(hn);
    b.build()?.infer_shapes(&[d], &[2 * h])
}

/// Tree-FC over binary trees: `tanh(W · concat(h_l, h_r, x) + b)`.
pub fn tree_fc_fn(hidden: usize, input_dim: usize) -> Result<VertexFunction, BuildError> {
    tree_fc_fn_nary(2, hidden, input_dim)
}

/// Tree-FC with `arity` children.
pub fn tree_fc_fn_nary(arity: usize, hidden: usize, input_dim: usize) -> Result<VertexFunction, BuildError> {
    let (h, d) = (hidden, input_dim);
    let mut b = FunctionBuilder::new(arity);
    let w = b.param("W", &[arity * h + d, h]);
    let bias = b.param("b", &[h]);
    let mut parts: Vec<SymbolId> = (0..arity).map(|k| b.gather(k)).collect();
    let x = b.pull();
    parts.push(x);
    let cat = b.concat(&parts);
    let z = b.matmul(cat, w);
    let z = b.add(z, bias);
    let hs = b.tanh(z);
    let hs = b.name(hs, "h");
    b.scatter(hs);
    b.push(hs);
    b.build()?.infer_shapes(&[d], &[h])
}

/// Sequence LSTM: the Tree-LSTM with one child.
pub fn chain_lstm_fn(hidden: usize, input_dim: usize) -> Result<VertexFunction, BuildError> {
    tree_lstm_fn(1, hidden, input_dim)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fills every parameter uniformly from `[-0.1, 0.1)`, drawing each from its
/// own stream keyed by the parameter's name.
pub fn init_params(params: &mut ParamSet, seed: u64) {
    for i in 0..params.len() {
        let stream = fnv1a(format!("init/{}", params.name(i)).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        for v in params.values_mut()[i].data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
}

/// Per-vertex regression targets and class labels of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Size of the subtree rooted at each vertex.
    pub subtree: Vec<usize>,
    /// Sum of each vertex's input record.
    pub input_sum: Vec<f64>,
}

impl Targets {
    pub fn of(g: &InputGraph) -> Self {
        let n = g.n_vertices();
        let levels = g.levels();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&v| (levels[v], v));
        let mut subtree = vec![1usize; n];
        for &v in &order {
            subtree[v] += g.children(v).iter().map(|&c| subtree[c]).sum::<usize>();
        }
        let input_sum = (0..n).map(|v| g.ext_input(v).map_or(0.0, |x| x.iter().sum())).collect();
        Self { subtree, input_sum }
    }

    /// Regression target `t_j = 0.5 cos(j + size) + 0.25 tanh(Σx)`.
    pub fn regression(&self, v: usize, width: usize) -> impl Iterator<Item = f64> + '_ {
        let size = self.subtree[v] as f64;
        let bias = 0.25 * self.input_sum[v].tanh();
        (0..width).map(move |j| 0.5 * (j as f64 + size).cos() + bias)
    }

    /// Class label `size mod classes`.
    pub fn class(&self, v: usize, classes: usize) -> usize {
        self.subtree[v] % classes
    }
}

/// Computes the loss over the batch's loss vertices from the pushed rows
/// and writes the gradient of `loss / scale` into `push_grad`. Returns the
/// summed (unscaled) loss.
pub fn loss_and_seed(
    loss: LossKind,
    batch: &GraphBatch,
    targets: &[&Targets],
    push: &Exchange,
    push_grad: &mut Exchange,
    scale: f64,
) -> Result<f64, TensorError> {
    let c = push.slice_len();
    let mut keys = Vec::new();
    for (gi, g) in batch.graphs().iter().enumerate() {
        keys.extend(g.loss_vertices().iter().map(|&v| (gi, v, batch.global_id(gi, v))));
    }
    if keys.is_empty() {
        return Ok(0.0);
    }
    let rows = keys.len();
    let mut logits = Vec::with_capacity(rows * c);
    for &(_, _, k) in &keys {
        logits.extend_from_slice(push.slice(k));
    }
    let mut grad = vec![0.0; rows * c];
    let total = match loss {
        LossKind::Mse => {
            let mut total = 0.0;
            for (r, &(gi, v, _)) in keys.iter().enumerate() {
                for (j, t) in targets[gi].regression(v, c).enumerate() {
                    let diff = logits[r * c + j] - t;
                    total += 0.5 * diff * diff;
                    grad[r * c + j] = diff / scale;
                }
            }
            total
        }
        LossKind::SoftmaxXent => {
            let labels: Vec<f64> = keys.iter().map(|&(gi, v, _)| targets[gi].class(v, c) as f64).collect();
            let lshape = [1];
            let shape = [c];
            let inputs = [TensorView::batched(rows, &shape, &logits), TensorView::batched(rows, &lshape, &labels)];
            let mut per_row = vec![0.0; rows];
            apply_kernel(
                &KernelOp::SoftmaxXent,
                &inputs,
                &mut [TensorViewMut::batched(rows, &lshape, &mut per_row)],
                WriteMode::Overwrite,
            )?;
            apply_kernel(
                &KernelOp::SoftmaxXentGrad,
                &inputs,
                &mut [TensorViewMut::batched(rows, &shape, &mut grad)],
                WriteMode::Overwrite,
            )?;
            for g in &mut grad {
                *g /= scale;
            }
            per_row.iter().sum()
        }
    };
    for (r, &(_, _, k)) in keys.iter().enumerate() {
        push_grad.slice_mut(k).copy_from_slice(&grad[r * c..(r + 1) * c]);
    }
    Ok(total)
}
