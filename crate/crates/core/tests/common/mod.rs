//! Shared helpers: an independent per-vertex interpreter for vertex
//! functions, a deterministic linear readout used as a test loss, and small
//! comparison utilities.

#![allow(dead_code)]

use vbatch_core::autodiff::{differentiate, GradProgram};
use vbatch_core::engine::{Engine, EngineOptions, PassReport};
use vbatch_core::graph::{GraphBatch, InputGraph};
use vbatch_core::ir::{Expression, SymbolId, SymbolKind, VertexFunction};
use vbatch_core::memory::{ExchangeBuffers, ParamSet, TensorTable};
use vbatch_core::schedule::Scheduler;
use vbatch_core::tensor::KernelOp;

/// Parameter values keyed by symbol, as flat row-major data.
pub type Params = Vec<(SymbolId, Vec<f64>)>;

pub fn param_values(f: &VertexFunction, set: &ParamSet) -> Params {
    f.params().iter().map(|&p| (p, set.value(p).data().to_vec())).collect()
}

fn lookup(params: &Params, s: SymbolId) -> &[f64] {
    &params.iter().find(|(id, _)| *id == s).expect("parameter present").1
}

fn shape(f: &VertexFunction, s: SymbolId) -> Vec<usize> {
    f.symbol(s).shape.clone().expect("shapes inferred")
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Elementwise binary op with a length-1 or length-n broadcast on either side.
fn zip(a: &[f64], b: &[f64], op: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n).map(|i| op(a[i % a.len()], b[i % b.len()])).collect()
}

/// Evaluates one kernel on single-vertex operands.
fn eval_op(f: &VertexFunction, op: &KernelOp, args: &[SymbolId], vals: &[Option<Vec<f64>>], params: &Params) -> Vec<Vec<f64>> {
    let get = |s: SymbolId| -> Vec<f64> {
        if f.symbol(s).kind == SymbolKind::Parameter {
            lookup(params, s).to_vec()
        } else {
            vals[s.0].clone().expect("argument evaluated")
        }
    };
    let a: Vec<Vec<f64>> = args.iter().map(|&s| get(s)).collect();
    match op {
        KernelOp::MatMul => {
            let ws = shape(f, args[1]);
            let (m, n) = (ws[0], ws[1]);
            let mut out = vec![0.0; n];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += a[0][k] * a[1][k * n + j];
                }
                *o = acc;
            }
            vec![out]
        }
        KernelOp::Add => vec![zip(&a[0], &a[1], |x, y| x + y)],
        KernelOp::Sub => vec![zip(&a[0], &a[1], |x, y| x - y)],
        KernelOp::Mul => vec![zip(&a[0], &a[1], |x, y| x * y)],
        KernelOp::Div => vec![zip(&a[0], &a[1], |x, y| x / y)],
        KernelOp::Sigmoid => vec![a[0].iter().map(|&x| sigmoid(x)).collect()],
        KernelOp::Tanh => vec![a[0].iter().map(|x| x.tanh()).collect()],
        KernelOp::Relu => vec![a[0].iter().map(|&x| x.max(0.0)).collect()],
        KernelOp::Concat => vec![a.concat()],
        KernelOp::Split(parts) => {
            let w = a[0].len() / parts;
            a[0].chunks(w).map(<[f64]>::to_vec).collect()
        }
        KernelOp::ReduceSum => vec![vec![a[0].iter().sum()]],
        other => panic!("reference interpreter has no rule for {}", other.name()),
    }
}

/// Pushed output of every vertex of `g`, evaluated one vertex at a time in
/// child-before-parent order directly from the expression list.
pub fn reference_forward(f: &VertexFunction, params: &Params, g: &InputGraph) -> Vec<Option<Vec<f64>>> {
    let n = g.n_vertices();
    let levels = g.levels();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (levels[v], v));
    let state_len = f.state_shape().map_or(0, numel);
    let pull_len = f.pull_shape().map_or(0, numel);
    let mut state: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut push: Vec<Option<Vec<f64>>> = vec![None; n];
    for &v in &order {
        let mut vals: Vec<Option<Vec<f64>>> = vec![None; f.symbols().len()];
        for e in f.topo_order() {
            match &f.exprs()[e] {
                Expression::Gather { child, result } => {
                    vals[result.0] = Some(match g.children(v).get(*child) {
                        Some(&c) => state[c].clone().expect("child evaluated first"),
                        None => vec![0.0; state_len],
                    });
                }
                Expression::Pull { result } => {
                    vals[result.0] = Some(g.ext_input(v).map_or_else(|| vec![0.0; pull_len], <[f64]>::to_vec));
                }
                Expression::Scatter { arg } => state[v] = vals[arg.0].clone(),
                Expression::Push { arg } => push[v] = vals[arg.0].clone(),
                Expression::Math { op, args, results } => {
                    let outs = eval_op(f, op, args, &vals, params);
                    for (r, o) in results.iter().zip(outs) {
                        vals[r.0] = Some(o);
                    }
                }
            }
        }
    }
    push
}

/// Fixed readout weight for pushed element `j` of vertex `v` in graph `gi`.
pub fn readout(gi: usize, v: usize, j: usize) -> f64 {
    (1.0 + 0.37 * gi as f64 + 0.11 * v as f64 + 0.07 * j as f64).sin()
}

/// `L = Σ readout · push` over every pushing vertex of the corpus, from
/// the reference interpreter.
pub fn reference_loss(f: &VertexFunction, params: &Params, graphs: &[InputGraph]) -> f64 {
    let mut total = 0.0;
    for (gi, g) in graphs.iter().enumerate() {
        for (v, p) in reference_forward(f, params, g).iter().enumerate() {
            if let Some(p) = p {
                total += p.iter().enumerate().map(|(j, x)| readout(gi, v, j) * x).sum::<f64>();
            }
        }
    }
    total
}

/// Engine plus storage for one vertex function.
pub struct Rig {
    pub f: VertexFunction,
    pub grad: GradProgram,
    pub engine: Engine,
    pub table: TensorTable,
    pub bufs: ExchangeBuffers,
    pub params: ParamSet,
    pub scheduler: Scheduler,
}

/// Output of one engine run over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOut {
    /// Per graph, per local vertex, the pushed row.
    pub pushes: Vec<Vec<Option<Vec<f64>>>>,
    /// Parameter gradients of the readout loss, in `ParamSet` order.
    pub grads: Vec<Vec<f64>>,
    pub forward_reports: Vec<PassReport>,
    pub backward_reports: Vec<PassReport>,
}

impl Rig {
    pub fn new(f: VertexFunction, opts: EngineOptions, seed: u64) -> Self {
        let grad = differentiate(&f).expect("differentiable");
        let engine = Engine::new(&grad, opts);
        let mut params = engine.new_params();
        vbatch_core::models::init_params(&mut params, seed);
        Self {
            f,
            grad,
            table: engine.new_table(),
            bufs: ExchangeBuffers::new(),
            scheduler: Scheduler::new(),
            params,
            engine,
        }
    }

    /// Same parameters, different engine options.
    pub fn with_options(&self, opts: EngineOptions) -> Self {
        let engine = Engine::new(&self.grad, opts);
        Self {
            f: self.f.clone(),
            grad: self.grad.clone(),
            table: engine.new_table(),
            bufs: ExchangeBuffers::new(),
            scheduler: Scheduler::new(),
            params: self.params.clone(),
            engine,
        }
    }

    fn seed_readout(&mut self, batch: &GraphBatch, first_graph: usize) {
        let c = self.bufs.push.slice_len();
        for (gi, g) in batch.graphs().iter().enumerate() {
            for v in 0..g.n_vertices() {
                let key = batch.global_id(gi, v);
                if !self.bufs.push.is_written(key) {
                    continue;
                }
                let row = self.bufs.push_grad.slice_mut(key);
                for (j, r) in row.iter_mut().enumerate().take(c) {
                    *r = readout(first_graph + gi, v, j);
                }
            }
        }
    }

    fn collect_pushes(&self, batch: &GraphBatch, out: &mut Vec<Vec<Option<Vec<f64>>>>) {
        for (gi, g) in batch.graphs().iter().enumerate() {
            let rows = (0..g.n_vertices())
                .map(|v| {
                    let key = batch.global_id(gi, v);
                    self.bufs.push.is_written(key).then(|| self.bufs.push.slice(key).to_vec())
                })
                .collect();
            out.push(rows);
        }
    }

    /// Forward and backward over `graphs` in chunks of `batch_size`
    /// graphs, accumulating parameter gradients across chunks.
    pub fn run(&mut self, graphs: &[InputGraph], batch_size: usize, serial: bool) -> RunOut {
        self.params.zero_grads();
        let mut out = RunOut {
            pushes: Vec::new(),
            grads: Vec::new(),
            forward_reports: Vec::new(),
            backward_reports: Vec::new(),
        };
        for (ci, chunk) in graphs.chunks(batch_size).enumerate() {
            let batch = GraphBatch::new(chunk.iter().collect());
            let stack = if serial {
                self.scheduler.serial_schedule(&batch)
            } else {
                self.scheduler.forward_schedule(&batch)
            }
            .expect("schedulable");
            let fr = self
                .engine
                .forward(&batch, &stack, &mut self.table, &mut self.params, &mut self.bufs)
                .expect("forward");
            self.collect_pushes(&batch, &mut out.pushes);
            self.seed_readout(&batch, ci * batch_size);
            let tasks = self.scheduler.backward_schedule(stack).expect("backward schedule");
            let br = self
                .engine
                .backward(&batch, &tasks, &mut self.table, &mut self.params, &mut self.bufs)
                .expect("backward");
            out.forward_reports.push(fr);
            out.backward_reports.push(br);
        }
        out.grads = self.params.grads().iter().map(|g| g.data().to_vec()).collect();
        out
    }

    /// Forward only over one batch of all `graphs`.
    pub fn forward_only(&mut self, graphs: &[InputGraph]) -> (Vec<Vec<Option<Vec<f64>>>>, PassReport) {
        let batch = GraphBatch::new(graphs.iter().collect());
        let stack = self.scheduler.forward_schedule(&batch).expect("schedulable");
        let r = self
            .engine
            .forward(&batch, &stack, &mut self.table, &mut self.params, &mut self.bufs)
            .expect("forward");
        let mut pushes = Vec::new();
        self.collect_pushes(&batch, &mut pushes);
        (pushes, r)
    }
}

/// `max|a − b| ≤ rtol · max(‖a‖∞, ‖b‖∞)`, with an all-zero pair passing.
pub fn close(a: &[f64], b: &[f64], rtol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff <= rtol * scale
}

/// Every graph's pushed rows agree within `rtol` and are present for the
/// same vertices.
pub fn pushes_close(a: &[Vec<Option<Vec<f64>>>], b: &[Vec<Option<Vec<f64>>>], rtol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} graphs vs {}", a.len(), b.len()));
    }
    for (gi, (ga, gb)) in a.iter().zip(b).enumerate() {
        if ga.len() != gb.len() {
            return Err(format!("graph {gi}: {} vertices vs {}", ga.len(), gb.len()));
        }
        for (v, (pa, pb)) in ga.iter().zip(gb).enumerate() {
            match (pa, pb) {
                (Some(x), Some(y)) if close(x, y, rtol) => {}
                (None, None) => {}
                _ => return Err(format!("graph {gi} vertex {v}: {pa:?} vs {pb:?}")),
            }
        }
    }
    Ok(())
}

pub fn grads_close(a: &[Vec<f64>], b: &[Vec<f64>], rtol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} parameters vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if !close(x, y, rtol) {
            let diff = x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            return Err(format!("parameter {i}: max abs diff {diff:e}"));
        }
    }
    Ok(())
}

/// Central finite-difference check of every parameter gradient of the
/// readout loss against the reference interpreter. Returns the worst
/// violation as an error.
#[allow(clippy::needless_range_loop)]
pub fn finite_difference_check(rig: &mut Rig, graphs: &[InputGraph], eps: f64, rtol: f64) -> Result<usize, String> {
    let analytic = rig.run(graphs, graphs.len(), false).grads;
    let base = param_values(&rig.f, &rig.params);
    let mut checked = 0;
    for (pi, &id) in rig.params.ids().to_vec().iter().enumerate() {
        let pos = base.iter().position(|(s, _)| *s == id).expect("parameter listed");
        for e in 0..base[pos].1.len() {
            let mut plus = base.clone();
            plus[pos].1[e] += eps;
            let mut minus = base.clone();
            minus[pos].1[e] -= eps;
            let fd = (reference_loss(&rig.f, &plus, graphs) - reference_loss(&rig.f, &minus, graphs)) / (2.0 * eps);
            let an = analytic[pi][e];
            if (fd - an).abs() > rtol * fd.abs().max(an.abs()) + 1e-8 {
                return Err(format!("{}[{e}]: finite difference {fd:e}, analytic {an:e}", rig.params.name(pi)));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
