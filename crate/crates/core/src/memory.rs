//! Dynamic-tensor bookkeeping and vertex-keyed exchange buffers.
//!
//! Every non-parameter symbol owns a dynamic tensor for its value and one
//! for its gradient. A forward task sets `bs` to the task size, runs, and
//! advances every value offset by `bs · row_len`, so task windows are laid
//! out back to back. The backward pass starts each gradient at its value's
//! final offset and retreats both by the task size before each task, which
//! revisits the forward windows in reverse order.
//!
//! Messages travel through flat exchange buffers indexed by global vertex
//! ID. Each keyed copy of a task is serviced by one `batched_copy` call.

use crate::error::MemoryError;
use crate::graph::GraphBatch;
use crate::ir::SymbolId;
use crate::program::{Channel, Key, Program, Slot};
use crate::tensor::{batched_copy, CopyPair, DenseTensor, DynamicTensor, WriteMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Static parameter values and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    ids: Vec<SymbolId>,
    names: Vec<String>,
    index: Vec<Option<usize>>,
    values: Vec<DenseTensor>,
    grads: Vec<DenseTensor>,
}

impl ParamSet {
    /// Zero-valued parameters for every parameter symbol of `program`.
    pub fn zeros(program: &Program) -> Self {
        let mut set = Self {
            ids: Vec::new(),
            names: Vec::new(),
            index: vec![None; program.n_symbols()],
            values: Vec::new(),
            grads: Vec::new(),
        };
        for s in (0..program.n_symbols()).map(SymbolId) {
            if program.is_param(s) {
                let shape = &program.slot(Slot::Value(s)).shape;
                set.index[s.0] = Some(set.ids.len());
                set.ids.push(s);
                set.names.push(program.symbol_name(s).to_string());
                set.values.push(DenseTensor::zeros(shape).expect("inferred shapes are valid"));
                set.grads.push(DenseTensor::zeros(shape).expect("inferred shapes are valid"));
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[SymbolId] {
        &self.ids
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn position(&self, s: SymbolId) -> Option<usize> {
        self.index.get(s.0).copied().flatten()
    }

    pub fn value(&self, s: SymbolId) -> &DenseTensor {
        &self.values[self.position(s).expect("not a parameter")]
    }

    pub fn value_mut(&mut self, s: SymbolId) -> &mut DenseTensor {
        let i = self.position(s).expect("not a parameter");
        &mut self.values[i]
    }

    pub fn grad(&self, s: SymbolId) -> &DenseTensor {
        &self.grads[self.position(s).expect("not a parameter")]
    }

    pub fn values(&self) -> &[DenseTensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.values
    }

    pub fn grads(&self) -> &[DenseTensor] {
        &self.grads
    }

    pub(crate) fn split_mut(&mut self) -> (&[Option<usize>], &[DenseTensor], &mut [DenseTensor]) {
        (&self.index, &self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// `θ ← θ − lr · ∇θ` for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for (v, g) in self.values.iter_mut().zip(&self.grads) {
            for (a, b) in v.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * b;
            }
        }
    }
}

/// Dynamic tensors for values and gradients, indexed by symbol.
#[derive(Debug, Clone)]
pub struct TensorTable {
    pub(crate) values: Vec<Option<DynamicTensor>>,
    pub(crate) grads: Vec<Option<DynamicTensor>>,
}

impl TensorTable {
    pub fn new(program: &Program) -> Self {
        let alloc = |grad: bool| {
            (0..program.n_symbols())
                .map(SymbolId)
                .map(|s| {
                    let slot = if grad { Slot::Grad(s) } else { Slot::Value(s) };
                    (!program.is_param(s))
                        .then(|| DynamicTensor::alloc(&program.slot(slot).shape, 0).expect("inferred shapes are valid"))
                })
                .collect()
        };
        Self {
            values: alloc(false),
            grads: alloc(true),
        }
    }

    pub fn value(&self, s: SymbolId) -> Option<&DynamicTensor> {
        self.values.get(s.0).and_then(Option::as_ref)
    }

    pub fn grad(&self, s: SymbolId) -> Option<&DynamicTensor> {
        self.grads.get(s.0).and_then(Option::as_ref)
    }

    pub fn tensor(&self, slot: Slot) -> Option<&DynamicTensor> {
        match slot {
            Slot::Value(s) => self.value(s),
            Slot::Grad(s) => self.grad(s),
        }
    }

    pub fn value_mut(&mut self, s: SymbolId) -> Option<&mut DynamicTensor> {
        self.values.get_mut(s.0).and_then(Option::as_mut)
    }

    fn all_mut(&mut self) -> impl Iterator<Item = (SymbolId, bool, &mut DynamicTensor)> {
        let v = self.values.iter_mut().enumerate().filter_map(|(i, t)| t.as_mut().map(|t| (SymbolId(i), false, t)));
        let g = self.grads.iter_mut().enumerate().filter_map(|(i, t)| t.as_mut().map(|t| (SymbolId(i), true, t)));
        v.chain(g)
    }

    /// Rewinds every tensor and makes room for `rows` rows.
    pub fn reset(&mut self, rows: usize) {
        for (_, _, t) in self.all_mut() {
            t.set_offset(0);
            t.set_bs(0);
            let need = rows * t.row_len();
            t.ensure_capacity(need).expect("tables are growable");
        }
    }

    /// Sets `bs` for a task. Backward tasks first retreat every offset by
    /// `m · row_len`.
    pub fn begin_task(&mut self, m: usize, direction: Direction) -> Result<(), MemoryError> {
        if m == 0 {
            return Err(MemoryError::EmptyTask);
        }
        for (sym, _, t) in self.all_mut() {
            if direction == Direction::Backward {
                let by = m * t.row_len();
                if t.offset() < by {
                    return Err(MemoryError::Underflow {
                        sym,
                        offset: t.offset(),
                        by,
                    });
                }
                t.set_offset(t.offset() - by);
            }
            t.set_bs(m);
        }
        Ok(())
    }

    /// Advances every value offset past a finished forward task.
    pub fn end_task(&mut self, m: usize) {
        for t in self.values.iter_mut().flatten() {
            t.set_offset(t.offset() + m * t.row_len());
        }
    }

    /// Places every gradient at its value's offset and zeroes the gradient
    /// rows the coming pass accumulates into.
    pub fn begin_backward(&mut self) {
        for (v, g) in self.values.iter().zip(self.grads.iter_mut()) {
            if let (Some(v), Some(g)) = (v, g) {
                let rows = v.offset() / v.row_len();
                g.ensure_capacity(v.offset()).expect("tables are growable");
                g.zero_rows(rows);
                g.set_offset(v.offset());
                g.set_bs(0);
            }
        }
    }

    /// `(symbol, is_grad, offset)` for every dynamic tensor.
    pub fn offsets(&self) -> Vec<(SymbolId, bool, usize)> {
        let v = self.values.iter().enumerate().filter_map(|(i, t)| t.as_ref().map(|t| (SymbolId(i), false, t.offset())));
        let g = self.grads.iter().enumerate().filter_map(|(i, t)| t.as_ref().map(|t| (SymbolId(i), true, t.offset())));
        v.chain(g).collect()
    }
}

/// Flat vertex-keyed slice store for one channel.
#[derive(Debug, Clone, Default)]
pub struct Exchange {
    slice_len: usize,
    data: Vec<f64>,
    written: Vec<bool>,
}

impl Exchange {
    fn reset(&mut self, vertices: usize, slice_len: usize) {
        self.slice_len = slice_len;
        self.data.clear();
        self.data.resize(vertices * slice_len, 0.0);
        self.written.clear();
        self.written.resize(vertices, false);
    }

    pub fn slice_len(&self) -> usize {
        self.slice_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, key: usize) -> &[f64] {
        &self.data[key * self.slice_len..(key + 1) * self.slice_len]
    }

    pub fn slice_mut(&mut self, key: usize) -> &mut [f64] {
        &mut self.data[key * self.slice_len..(key + 1) * self.slice_len]
    }

    pub fn is_written(&self, key: usize) -> bool {
        self.written.get(key).copied().unwrap_or(false)
    }

    fn vertices(&self) -> usize {
        self.written.len()
    }
}

/// Exchange buffers for every channel.
#[derive(Debug, Clone, Default)]
pub struct ExchangeBuffers {
    pub state: Exchange,
    pub state_grad: Exchange,
    pub pull: Exchange,
    pub pull_grad: Exchange,
    pub push: Exchange,
    pub push_grad: Exchange,
    zeros: Vec<f64>,
}

impl ExchangeBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeroes all channels for a batch of `vertices` vertices and copies the
    /// batch's pull records in.
    pub fn reset(&mut self, program: &Program, batch: &GraphBatch) -> Result<(), MemoryError> {
        let n = batch.total_vertices();
        for ch in Channel::ALL {
            let len = program.channel_len(ch);
            self.get_mut(ch).reset(n, len);
        }
        let widest = Channel::ALL.iter().map(|&c| program.channel_len(c)).max().unwrap_or(0);
        self.zeros.clear();
        self.zeros.resize(widest, 0.0);
        let d = self.pull.slice_len;
        for (gi, g) in batch.graphs().iter().enumerate() {
            for v in 0..g.n_vertices() {
                if let Some(rec) = g.ext_input(v) {
                    let key = batch.global_id(gi, v);
                    if rec.len() != d {
                        return Err(MemoryError::Corruption {
                            buffer: "pull",
                            key,
                            found: rec.len(),
                            expected: d,
                        });
                    }
                    self.pull.slice_mut(key).copy_from_slice(rec);
                    self.pull.written[key] = true;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, ch: Channel) -> &Exchange {
        match ch {
            Channel::State => &self.state,
            Channel::StateGrad => &self.state_grad,
            Channel::Pull => &self.pull,
            Channel::PullGrad => &self.pull_grad,
            Channel::Push => &self.push,
            Channel::PushGrad => &self.push_grad,
        }
    }

    pub fn get_mut(&mut self, ch: Channel) -> &mut Exchange {
        match ch {
            Channel::State => &mut self.state,
            Channel::StateGrad => &mut self.state_grad,
            Channel::Pull => &mut self.pull,
            Channel::PullGrad => &mut self.pull_grad,
            Channel::Push => &mut self.push,
            Channel::PushGrad => &mut self.push_grad,
        }
    }

    /// Slice stored under `key`; a missing key (absent child) reads as
    /// zeros of the channel's slice length.
    pub fn index_buffer(&self, ch: Channel, key: Option<usize>) -> Result<&[f64], MemoryError> {
        let ex = self.get(ch);
        let Some(key) = key else {
            return Ok(&self.zeros[..ex.slice_len]);
        };
        if key >= ex.vertices() {
            return Err(MemoryError::NotReady { buffer: ch.name(), key });
        }
        if ex.data.len() != ex.vertices() * ex.slice_len {
            return Err(MemoryError::Corruption {
                buffer: ch.name(),
                key,
                found: ex.data.len() / ex.vertices().max(1),
                expected: ex.slice_len,
            });
        }
        Ok(ex.slice(key))
    }
}

fn key_vertex(batch: &GraphBatch, key: Key, m: usize) -> Option<usize> {
    match key {
        Key::Own => Some(m),
        Key::Child(k) => batch.children(m).get(k).copied(),
    }
}

/// Loads one slice per task vertex from `ex` into consecutive rows of
/// `out` with a single batched copy. Returns the number of elements moved.
pub fn exec_load(
    ex: &Exchange,
    channel: Channel,
    key: Key,
    vertices: &[usize],
    batch: &GraphBatch,
    out: &mut [f64],
    mode: WriteMode,
) -> Result<usize, MemoryError> {
    let c = ex.slice_len;
    let mut pairs = Vec::with_capacity(vertices.len());
    for (row, &m) in vertices.iter().enumerate() {
        let src = key_vertex(batch, key, m);
        if let Some(src) = src {
            if channel == Channel::State && !ex.is_written(src) {
                return Err(MemoryError::NotReady { buffer: channel.name(), key: src });
            }
        }
        pairs.push(CopyPair {
            dst: row * c,
            src: src.map(|s| s * c),
        });
    }
    batched_copy(out, &ex.data, &pairs, c, mode)?;
    Ok(pairs.iter().filter(|p| p.src.is_some()).count() * c)
}

/// Stores row `i` of `arg` under the key of the `i`-th task vertex with a
/// single batched copy. Overwriting stores may write a key once per pass.
pub fn exec_store(
    ex: &mut Exchange,
    channel: Channel,
    key: Key,
    vertices: &[usize],
    batch: &GraphBatch,
    arg: &[f64],
    mode: WriteMode,
) -> Result<usize, MemoryError> {
    let c = ex.slice_len;
    let mut pairs = Vec::with_capacity(vertices.len());
    for (row, &m) in vertices.iter().enumerate() {
        if let Some(dst) = key_vertex(batch, key, m) {
            if mode == WriteMode::Overwrite && std::mem::replace(&mut ex.written[dst], true) {
                return Err(MemoryError::WriteTwice { buffer: channel.name(), key: dst });
            }
            pairs.push(CopyPair {
                dst: dst * c,
                src: Some(row * c),
            });
        }
    }
    batched_copy(&mut ex.data, arg, &pairs, c, mode)?;
    Ok(pairs.len() * c)
}

/// `gather(k)` into the current window of `out`.
pub fn exec_gather(
    bufs: &ExchangeBuffers,
    child: usize,
    vertices: &[usize],
    batch: &GraphBatch,
    out: &mut DynamicTensor,
) -> Result<usize, MemoryError> {
    exec_load(&bufs.state, Channel::State, Key::Child(child), vertices, batch, out.window_mut()?, WriteMode::Overwrite)
}

/// `pull()` into the current window of `out`.
pub fn exec_pull(
    bufs: &ExchangeBuffers,
    vertices: &[usize],
    batch: &GraphBatch,
    out: &mut DynamicTensor,
) -> Result<usize, MemoryError> {
    exec_load(&bufs.pull, Channel::Pull, Key::Own, vertices, batch, out.window_mut()?, WriteMode::Overwrite)
}

/// `scatter(arg)` from the current window of `arg`.
pub fn exec_scatter(
    bufs: &mut ExchangeBuffers,
    vertices: &[usize],
    batch: &GraphBatch,
    arg: &DynamicTensor,
) -> Result<usize, MemoryError> {
    exec_store(&mut bufs.state, Channel::State, Key::Own, vertices, batch, arg.view()?.data, WriteMode::Overwrite)
}

/// `push(arg)` from the current window of `arg`.
pub fn exec_push(
    bufs: &mut ExchangeBuffers,
    vertices: &[usize],
    batch: &GraphBatch,
    arg: &DynamicTensor,
) -> Result<usize, MemoryError> {
    exec_store(&mut bufs.push, Channel::Push, Key::Own, vertices, batch, arg.view()?.data, WriteMode::Overwrite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_chain, InputGraph};
    use crate::ir::FunctionBuilder;

    fn program() -> Program {
        let mut b = FunctionBuilder::new(2);
        let l = b.gather(0);
        let r = b.gather(1);
        let x = b.pull();
        let s = b.add(l, r);
        let s = b.add(s, x);
        b.scatter(s);
        b.push(s);
        Program::forward(&b.build().unwrap().infer_shapes(&[2], &[2]).unwrap()).unwrap()
    }

    #[test]
    fn forward_offsets_advance() {
        let p = program();
        let mut t = TensorTable::new(&p);
        t.reset(5);
        t.begin_task(3, Direction::Forward).unwrap();
        t.end_task(3);
        assert!(t.offsets().iter().filter(|o| !o.1).all(|o| o.2 == 6));
        t.begin_task(2, Direction::Forward).unwrap();
        t.end_task(2);
        assert!(t.offsets().iter().filter(|o| !o.1).all(|o| o.2 == 10));
        t.begin_backward();
        t.begin_task(2, Direction::Backward).unwrap();
        let v = t.value(SymbolId(0)).unwrap();
        assert_eq!((v.offset(), v.bs()), (6, 2));
        t.begin_task(3, Direction::Backward).unwrap();
        assert!(t.offsets().iter().all(|o| o.2 == 0));
        assert!(matches!(t.begin_task(1, Direction::Backward), Err(MemoryError::Underflow { .. })));
        assert_eq!(t.begin_task(0, Direction::Forward), Err(MemoryError::EmptyTask));
    }

    #[test]
    fn scatter_then_gather() {
        let p = program();
        let g = InputGraph::from_children(vec![vec![], vec![], vec![0, 1]]).unwrap();
        let g = g.with_ext_inputs(vec![vec![1.0, 0.0], vec![], vec![0.5, 0.5]]).unwrap();
        let batch = GraphBatch::new(vec![&g]);
        let mut bufs = ExchangeBuffers::new();
        bufs.reset(&p, &batch).unwrap();
        assert_eq!(bufs.index_buffer(Channel::Pull, Some(0)).unwrap(), &[1.0, 0.0]);
        assert_eq!(bufs.index_buffer(Channel::Pull, Some(1)).unwrap(), &[0.0, 0.0]);
        assert_eq!(bufs.index_buffer(Channel::State, None).unwrap(), &[0.0, 0.0]);

        let mut leaves = DynamicTensor::alloc(&[2], 0).unwrap();
        leaves.set_bs(2);
        leaves.window_mut().unwrap().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        exec_scatter(&mut bufs, &[0, 1], &batch, &leaves).unwrap();
        assert_eq!(bufs.index_buffer(Channel::State, Some(1)).unwrap(), &[3.0, 4.0]);
        assert!(matches!(
            exec_scatter(&mut bufs, &[0, 1], &batch, &leaves),
            Err(MemoryError::WriteTwice { .. })
        ));

        let mut zero = DynamicTensor::alloc(&[2], 0).unwrap();
        zero.set_bs(2);
        exec_gather(&bufs, 0, &[0, 1], &batch, &mut zero).unwrap();
        assert_eq!(zero.view().unwrap().data, &[0.0; 4]);

        let mut root = DynamicTensor::alloc(&[2], 0).unwrap();
        root.set_bs(1);
        exec_gather(&bufs, 1, &[2], &batch, &mut root).unwrap();
        assert_eq!(root.view().unwrap().data, &[3.0, 4.0]);
    }

    #[test]
    fn gather_before_child_scatter_is_rejected() {
        let p = program();
        let g = gen_chain(2).unwrap();
        let batch = GraphBatch::new(vec![&g]);
        let mut bufs = ExchangeBuffers::new();
        bufs.reset(&p, &batch).unwrap();
        let mut out = DynamicTensor::alloc(&[2], 0).unwrap();
        out.set_bs(1);
        assert!(matches!(exec_gather(&bufs, 0, &[1], &batch, &mut out), Err(MemoryError::NotReady { key: 0, .. })));
    }

    #[test]
    fn gradient_store_accumulates() {
        let p = program();
        let g = InputGraph::from_children(vec![vec![], vec![0], vec![0]]).unwrap();
        let batch = GraphBatch::new(vec![&g]);
        let mut bufs = ExchangeBuffers::new();
        bufs.reset(&p, &batch).unwrap();
        // both parents of vertex 0 send gradient in one task
        let rows = [1.0, 1.0, 2.0, 3.0];
        exec_store(&mut bufs.state_grad, Channel::StateGrad, Key::Child(0), &[1, 2], &batch, &rows, WriteMode::Accumulate).unwrap();
        assert_eq!(bufs.state_grad.slice(0), &[3.0, 4.0]);
    }
}
