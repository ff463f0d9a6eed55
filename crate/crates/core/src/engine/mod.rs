//! Batched execution of the forward and backward programs.
//!
//! A pass walks the batching tasks in order and runs the program over each
//! task's rows. Three optional optimizations change how, never what:
//!
//! * lazy batching defers lazy instructions to a single run over all rows
//!   once every task of the pass has finished;
//! * fusion replaces connected elementwise instructions by one fused kernel;
//! * streaming runs eager instructions for every task on a second thread.
//!   The main lane blocks on the task's eager results right before its
//!   first instruction that touches them.
//!
//! During a pass the storage of every dynamic tensor is detached from its
//! header. The headers keep the task bookkeeping on the main lane, the
//! storage written by eager instructions is split into per-task chunks that
//! move between the lanes, and storage the pass only reads is shared.

pub mod classify;
mod frame;
pub mod fusion;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;

pub use classify::{classify_operators, OpClass};
pub use fusion::{apply_fusion, detect_fusion, FusionPlan};

use crate::autodiff::GradProgram;
use crate::error::EngineError;
use crate::graph::GraphBatch;
use crate::ir::SymbolId;
use crate::memory::{Direction, ExchangeBuffers, ParamSet, TensorTable};
use crate::program::{Pass, Program};
use crate::schedule::{BatchTask, TaskStack};
use crate::tensor::DynamicTensor;
use frame::{exec, Frame, Outbound, Shared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EngineOptions {
    pub lazy: bool,
    pub fusion: bool,
    pub streaming: bool,
    /// Run every eager instruction for all tasks before any other
    /// instruction. Used to check the eager classification; takes
    /// precedence over streaming.
    pub eager_prepass: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self::with_flags(true, true, true)
    }
}

impl EngineOptions {
    pub fn with_flags(lazy: bool, fusion: bool, streaming: bool) -> Self {
        Self {
            lazy,
            fusion,
            streaming,
            eager_prepass: false,
        }
    }

    pub fn all_off() -> Self {
        Self::with_flags(false, false, false)
    }

    /// The eight on/off combinations of lazy batching, fusion and
    /// streaming, starting with everything off.
    pub fn grid() -> Vec<Self> {
        (0..8u8)
            .map(|m| Self::with_flags(m & 1 != 0, m & 2 != 0, m & 4 != 0))
            .collect()
    }
}

/// Instrumentation shared by both lanes.
#[derive(Debug, Default)]
pub struct Counters {
    pub(crate) kernel_dispatches: AtomicU64,
    pub(crate) copy_calls: AtomicU64,
    pub(crate) bytes_copied: AtomicU64,
    pub(crate) barrier_waits: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub kernel_dispatches: u64,
    pub copy_calls: u64,
    pub bytes_copied: u64,
    /// Times the main lane found the eager results of a task not ready.
    pub barrier_waits: u64,
}

impl std::ops::Sub for CounterSnapshot {
    type Output = CounterSnapshot;

    fn sub(self, o: Self) -> Self {
        Self {
            kernel_dispatches: self.kernel_dispatches - o.kernel_dispatches,
            copy_calls: self.copy_calls - o.copy_calls,
            bytes_copied: self.bytes_copied - o.bytes_copied,
            barrier_waits: self.barrier_waits - o.barrier_waits,
        }
    }
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            kernel_dispatches: self.kernel_dispatches.load(Ordering::Relaxed),
            copy_calls: self.copy_calls.load(Ordering::Relaxed),
            bytes_copied: self.bytes_copied.load(Ordering::Relaxed),
            barrier_waits: self.barrier_waits.load(Ordering::Relaxed),
        }
    }
}

/// Keyed-copy calls observed during one pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PassReport {
    /// Per task, in execution order, both lanes combined.
    pub task_copies: Vec<usize>,
    /// Calls made by the lazy flush.
    pub flush_copies: usize,
    /// Instructions run by the lazy flush.
    pub deferred: usize,
}

/// A program prepared for execution.
#[derive(Debug, Clone)]
pub struct CompiledPass {
    program: Program,
    classes: Vec<OpClass>,
    fusion: FusionPlan,
}

impl CompiledPass {
    pub fn new(program: &Program, fuse: bool) -> Self {
        let (program, fusion) = if fuse {
            let plan = detect_fusion(program);
            (apply_fusion(program, &plan), plan)
        } else {
            (program.clone(), FusionPlan::default())
        };
        let classes = classify_operators(&program);
        Self {
            program,
            classes,
            fusion,
        }
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn classes(&self) -> &[OpClass] {
        &self.classes
    }

    pub fn fusion(&self) -> &FusionPlan {
        &self.fusion
    }

    fn indices(&self, class: OpClass) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i] == class).collect()
    }
}

#[derive(Debug)]
pub struct Engine {
    forward: CompiledPass,
    backward: CompiledPass,
    opts: EngineOptions,
    counters: Counters,
}

type LaneMsg<'s> = Result<(usize, Vec<&'s mut [f64]>, usize), EngineError>;

impl Engine {
    pub fn new(grad: &GradProgram, opts: EngineOptions) -> Self {
        Self {
            forward: CompiledPass::new(grad.forward(), opts.fusion),
            backward: CompiledPass::new(grad.backward(), opts.fusion),
            opts,
            counters: Counters::default(),
        }
    }

    pub fn options(&self) -> EngineOptions {
        self.opts
    }

    pub fn forward_pass(&self) -> &CompiledPass {
        &self.forward
    }

    pub fn backward_pass(&self) -> &CompiledPass {
        &self.backward
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    /// Fresh storage for this engine's programs.
    pub fn new_table(&self) -> TensorTable {
        TensorTable::new(&self.forward.program)
    }

    pub fn new_params(&self) -> ParamSet {
        ParamSet::zeros(&self.forward.program)
    }

    /// Resets the table and exchange buffers for `batch`, then runs the
    /// forward program over `stack`.
    pub fn forward(
        &self,
        batch: &GraphBatch,
        stack: &TaskStack,
        table: &mut TensorTable,
        params: &mut ParamSet,
        bufs: &mut ExchangeBuffers,
    ) -> Result<PassReport, EngineError> {
        let total = stack.total_vertices();
        if total != batch.total_vertices() {
            return Err(EngineError::Internal(format!(
                "schedule covers {total} vertices, batch has {}",
                batch.total_vertices()
            )));
        }
        table.reset(total);
        bufs.reset(&self.forward.program, batch)
            .map_err(|e| EngineError::Memory { task: 0, source: e })?;
        let mut starts = Vec::with_capacity(stack.len());
        let mut acc = 0;
        for t in stack.tasks() {
            starts.push(acc);
            acc += t.size();
        }
        self.run_pass(&self.forward, batch, stack.tasks(), &starts, table, params, bufs)
    }

    /// Runs the backward program over `tasks` (the forward tasks in reverse
    /// order). The exchange buffers must hold this batch's forward state and
    /// the seeded push gradients; parameter gradients accumulate into
    /// `params`.
    pub fn backward(
        &self,
        batch: &GraphBatch,
        tasks: &[BatchTask],
        table: &mut TensorTable,
        params: &mut ParamSet,
        bufs: &mut ExchangeBuffers,
    ) -> Result<PassReport, EngineError> {
        let total: usize = tasks.iter().map(BatchTask::size).sum();
        if total != batch.total_vertices() {
            return Err(EngineError::Internal(format!(
                "backward tasks cover {total} vertices, batch has {}",
                batch.total_vertices()
            )));
        }
        table.begin_backward();
        let mut starts = Vec::with_capacity(tasks.len());
        let mut acc = total;
        for t in tasks {
            acc -= t.size();
            starts.push(acc);
        }
        self.run_pass(&self.backward, batch, tasks, &starts, table, params, bufs)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_pass(
        &self,
        pass: &CompiledPass,
        batch: &GraphBatch,
        tasks: &[BatchTask],
        starts: &[usize],
        table: &mut TensorTable,
        params: &mut ParamSet,
        bufs: &mut ExchangeBuffers,
    ) -> Result<PassReport, EngineError> {
        let backward = pass.program.pass() == Pass::Backward;
        let total: usize = tasks.iter().map(BatchTask::size).sum();
        let (mut written, mut frozen) = {
            let (w, f) = if backward {
                (&mut table.grads, &mut table.values)
            } else {
                (&mut table.values, &mut table.grads)
            };
            (detach(w), if backward { detach(f) } else { Vec::new() })
        };
        for (s, store) in written.iter().enumerate() {
            if !pass.program.is_param(SymbolId(s)) {
                let need = total * pass.program.slot(crate::program::Slot::Value(SymbolId(s))).row_len();
                if store.len() < need {
                    reattach(table, backward, written, frozen);
                    return Err(EngineError::Internal(format!("storage for symbol {s} is smaller than the pass")));
                }
            }
        }
        let result = self.run_detached(pass, batch, tasks, starts, table, params, bufs, &mut written, &frozen);
        reattach(table, backward, std::mem::take(&mut written), std::mem::take(&mut frozen));
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn run_detached(
        &self,
        pass: &CompiledPass,
        batch: &GraphBatch,
        tasks: &[BatchTask],
        starts: &[usize],
        table: &mut TensorTable,
        params: &mut ParamSet,
        bufs: &mut ExchangeBuffers,
        written: &mut [Vec<f64>],
        frozen: &[Vec<f64>],
    ) -> Result<PassReport, EngineError> {
        let backward = pass.program.pass() == Pass::Backward;
        let direction = if backward { Direction::Backward } else { Direction::Forward };
        let opts = self.opts;
        let total: usize = tasks.iter().map(BatchTask::size).sum();
        let param_ids: Vec<SymbolId> = params.ids().to_vec();
        let (_, param_values, param_grads) = params.split_mut();
        let ExchangeBuffers {
            state,
            state_grad,
            pull,
            pull_grad,
            push,
            push_grad,
            ..
        } = bufs;
        let sh = Shared {
            program: &pass.program,
            batch,
            backward,
            frozen,
            param_ids: &param_ids,
            param_values,
            pull,
            push_grad,
            counters: &self.counters,
        };
        let mut outbound = Outbound {
            state,
            state_grad,
            pull_grad,
            push,
        };
        let mut param_grads = backward.then_some(param_grads);

        let instrs = pass.program.instrs();
        let eager = pass.indices(OpClass::Eager);
        let lazy = if opts.lazy { pass.indices(OpClass::Lazy) } else { Vec::new() };
        let prepass = opts.eager_prepass && !eager.is_empty();
        let streaming = opts.streaming && !prepass && !eager.is_empty();
        let split_eager = prepass || streaming;
        let main: Vec<usize> = (0..instrs.len())
            .filter(|&i| match pass.classes[i] {
                OpClass::Main => true,
                OpClass::Lazy => !opts.lazy,
                OpClass::Eager => !split_eager,
            })
            .collect();

        // symbols whose written slot the eager lane owns
        let n = pass.program.n_symbols();
        let mut owned = vec![false; n];
        if streaming {
            for &i in &eager {
                for slot in instrs[i].writes() {
                    if slot.is_grad() != backward || pass.program.is_param(slot.symbol()) {
                        return Err(EngineError::Internal(format!(
                            "eager instruction {} writes outside the pass's dynamic storage",
                            instrs[i].name()
                        )));
                    }
                    owned[slot.symbol().0] = true;
                }
            }
        }
        let touches: Vec<bool> = instrs
            .iter()
            .map(|ins| {
                ins.reads().iter().chain(ins.writes()).any(|s| {
                    !pass.program.is_param(s.symbol()) && s.is_grad() == backward && owned[s.symbol().0]
                })
            })
            .collect();
        let owned_syms: Vec<usize> = (0..n).filter(|&s| owned[s]).collect();

        let mut report = PassReport::default();

        if prepass {
            for (t, task) in tasks.iter().enumerate() {
                let wins = windows(&sh, written, starts[t], task.size(), &vec![false; n]);
                let mut frame = Frame::build(&sh, wins, None, starts[t], task.size())?;
                for &i in &eager {
                    exec(&instrs[i], &mut frame, &sh, None, &task.vertices, task.id)?;
                }
            }
        }

        let prepass_copies: Vec<usize> = tasks
            .iter()
            .map(|_| if prepass { eager.iter().filter(|&&i| instrs[i].is_message()).count() } else { 0 })
            .collect();

        if streaming {
            let (eager_store, main_store) = partition(written, &owned);
            let chunks = split_chunks(&sh, eager_store, &owned_syms, tasks, starts);
            let sh = &sh;
            let eager = &eager;
            let owned_syms = &owned_syms;
            std::thread::scope(|scope| -> Result<(), EngineError> {
                let (tx, rx) = mpsc::channel::<LaneMsg<'_>>();
                let lane = scope.spawn(move || eager_lane(sh, eager, owned_syms, tasks, starts, chunks, tx));
                let res = self.main_lane(
                    sh,
                    &main,
                    &touches,
                    tasks,
                    starts,
                    table,
                    direction,
                    main_store,
                    param_grads.as_deref_mut(),
                    &mut outbound,
                    Some((&rx, owned_syms)),
                    &mut report,
                );
                drop(rx);
                let joined = lane.join();
                res?;
                joined.map_err(|_| EngineError::Lane("eager lane panicked".into()))
            })?;
        } else {
            let main_store: Vec<Option<&mut Vec<f64>>> = written.iter_mut().map(Some).collect();
            self.main_lane(
                &sh,
                &main,
                &touches,
                tasks,
                starts,
                table,
                direction,
                main_store,
                param_grads.as_deref_mut(),
                &mut outbound,
                None,
                &mut report,
            )?;
        }
        for (c, p) in report.task_copies.iter_mut().zip(prepass_copies) {
            *c += p;
        }

        if !lazy.is_empty() {
            let mut order: Vec<usize> = (0..tasks.len()).collect();
            order.sort_by_key(|&t| starts[t]);
            let mut expect = 0;
            for &t in &order {
                if starts[t] != expect {
                    return Err(EngineError::Window(format!(
                        "task {} starts at row {}, expected {expect}",
                        tasks[t].id, starts[t]
                    )));
                }
                expect += tasks[t].size();
            }
            if expect != total {
                return Err(EngineError::Window(format!("windows cover {expect} rows of {total}")));
            }
            let vertices: Vec<usize> = order.iter().flat_map(|&t| tasks[t].vertices.iter().copied()).collect();
            let wins = windows(&sh, written, 0, total, &vec![false; n]);
            let mut frame = Frame::build(&sh, wins, param_grads, 0, total)?;
            for &i in &lazy {
                exec(&instrs[i], &mut frame, &sh, Some(&mut outbound), &vertices, usize::MAX)?;
                report.flush_copies += usize::from(instrs[i].is_message());
            }
            report.deferred = lazy.len();
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn main_lane<'s>(
        &self,
        sh: &Shared<'s>,
        main: &[usize],
        touches: &[bool],
        tasks: &[BatchTask],
        starts: &[usize],
        table: &mut TensorTable,
        direction: Direction,
        mut store: Vec<Option<&'s mut Vec<f64>>>,
        mut param_grads: Option<&mut [crate::tensor::DenseTensor]>,
        outbound: &mut Outbound<'_>,
        lane: Option<(&mpsc::Receiver<LaneMsg<'s>>, &[usize])>,
        report: &mut PassReport,
    ) -> Result<(), EngineError> {
        let instrs = sh.program.instrs();
        for (t, task) in tasks.iter().enumerate() {
            let (start, rows) = (starts[t], task.size());
            table
                .begin_task(rows, direction)
                .map_err(|e| EngineError::Memory { task: task.id, source: e })?;
            check_window(table, direction, start, rows, task.id)?;
            let wins: Vec<Option<&mut [f64]>> = store
                .iter_mut()
                .enumerate()
                .map(|(s, v)| {
                    if sh.program.is_param(SymbolId(s)) {
                        return None;
                    }
                    let c = sh.row_len(s);
                    v.as_mut().map(|v| &mut v[start * c..(start + rows) * c])
                })
                .collect();
            let mut frame = Frame::build(sh, wins, param_grads.as_deref_mut(), start, rows)?;
            let mut received = lane.is_none();
            let mut copies = 0;
            for &i in main {
                if !received && touches[i] {
                    copies += self.receive(&mut frame, sh, lane.unwrap(), t)?;
                    received = true;
                }
                exec(&instrs[i], &mut frame, sh, Some(outbound), &task.vertices, task.id)?;
                copies += usize::from(instrs[i].is_message());
            }
            if !received {
                copies += self.receive(&mut frame, sh, lane.unwrap(), t)?;
            }
            if direction == Direction::Forward {
                table.end_task(rows);
            }
            report.task_copies.push(copies);
        }
        Ok(())
    }

    fn receive<'f, 's: 'f>(
        &self,
        frame: &mut Frame<'f>,
        sh: &Shared<'_>,
        (rx, owned): (&mpsc::Receiver<LaneMsg<'s>>, &[usize]),
        t: usize,
    ) -> Result<usize, EngineError> {
        let msg = match rx.try_recv() {
            Ok(m) => m,
            Err(mpsc::TryRecvError::Empty) => {
                self.counters.barrier_waits.fetch_add(1, Ordering::Relaxed);
                rx.recv().map_err(|_| EngineError::Lane("eager lane stopped early".into()))?
            }
            Err(mpsc::TryRecvError::Disconnected) => return Err(EngineError::Lane("eager lane stopped early".into())),
        };
        let (task, chunks, copies) = msg?;
        if task != t {
            return Err(EngineError::Internal(format!("eager results for task {task} arrived at task {t}")));
        }
        for (&s, c) in owned.iter().zip(chunks) {
            frame.put_rw(sh.written_slot(s), c);
        }
        Ok(copies)
    }
}

fn eager_lane<'s>(
    sh: &Shared<'s>,
    eager: &[usize],
    owned: &[usize],
    tasks: &[BatchTask],
    starts: &[usize],
    chunks: Vec<Vec<&'s mut [f64]>>,
    tx: mpsc::Sender<LaneMsg<'s>>,
) {
    let n = sh.program.n_symbols();
    let instrs = sh.program.instrs();
    for (t, task_chunks) in chunks.into_iter().enumerate() {
        let task = &tasks[t];
        let mut wins: Vec<Option<&'s mut [f64]>> = (0..n).map(|_| None).collect();
        for (&s, c) in owned.iter().zip(task_chunks) {
            wins[s] = Some(c);
        }
        let run = || -> Result<(Vec<&'s mut [f64]>, usize), EngineError> {
            let mut frame = Frame::build(sh, wins, None, starts[t], task.size())?;
            let mut copies = 0;
            for &i in eager {
                exec(&instrs[i], &mut frame, sh, None, &task.vertices, task.id)?;
                copies += usize::from(instrs[i].is_message());
            }
            let back = owned
                .iter()
                .map(|&s| frame.take_rw(sh.written_slot(s)).expect("eager chunk present"))
                .collect();
            Ok((back, copies))
        };
        let msg = run().map(|(back, copies)| (t, back, copies));
        let failed = msg.is_err();
        if tx.send(msg).is_err() || failed {
            return;
        }
    }
}

fn detach(tensors: &mut [Option<DynamicTensor>]) -> Vec<Vec<f64>> {
    tensors
        .iter_mut()
        .map(|t| t.as_mut().map(DynamicTensor::take_buffer).unwrap_or_default())
        .collect()
}

fn reattach(table: &mut TensorTable, backward: bool, written: Vec<Vec<f64>>, frozen: Vec<Vec<f64>>) {
    let (w, f) = if backward {
        (&mut table.grads, &mut table.values)
    } else {
        (&mut table.values, &mut table.grads)
    };
    for (t, buf) in w.iter_mut().zip(written) {
        if let Some(t) = t {
            t.restore_buffer(buf);
        }
    }
    for (t, buf) in f.iter_mut().zip(frozen) {
        if let Some(t) = t {
            t.restore_buffer(buf);
        }
    }
}

/// Windows `[start, start + rows)` of every written store not in `skip`.
fn windows<'a>(
    sh: &Shared<'_>,
    store: &'a mut [Vec<f64>],
    start: usize,
    rows: usize,
    skip: &[bool],
) -> Vec<Option<&'a mut [f64]>> {
    store
        .iter_mut()
        .enumerate()
        .map(|(s, v)| {
            if skip[s] || sh.program.is_param(SymbolId(s)) {
                return None;
            }
            let c = sh.row_len(s);
            Some(&mut v[start * c..(start + rows) * c])
        })
        .collect()
}

type Partitioned<'a> = (Vec<&'a mut Vec<f64>>, Vec<Option<&'a mut Vec<f64>>>);

fn partition<'a>(store: &'a mut [Vec<f64>], owned: &[bool]) -> Partitioned<'a> {
    let mut eager = Vec::new();
    let mut main = Vec::with_capacity(store.len());
    for (s, v) in store.iter_mut().enumerate() {
        if owned[s] {
            eager.push(v);
            main.push(None);
        } else {
            main.push(Some(v));
        }
    }
    (eager, main)
}

/// Splits each eager-owned buffer into its per-task windows:
/// `result[task][k]` is task `task`'s rows of the `k`-th owned symbol.
fn split_chunks<'a>(
    sh: &Shared<'_>,
    stores: Vec<&'a mut Vec<f64>>,
    owned: &[usize],
    tasks: &[BatchTask],
    starts: &[usize],
) -> Vec<Vec<&'a mut [f64]>> {
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&t| starts[t]);
    let mut out: Vec<Vec<&'a mut [f64]>> = (0..tasks.len()).map(|_| Vec::with_capacity(owned.len())).collect();
    for (&s, store) in owned.iter().zip(stores) {
        let c = sh.row_len(s);
        let mut rest: &'a mut [f64] = store.as_mut_slice();
        let mut at = 0;
        let mut pieces: Vec<Option<&'a mut [f64]>> = (0..tasks.len()).map(|_| None).collect();
        for &t in &order {
            let skip = (starts[t] - at) * c;
            let (_, tail) = rest.split_at_mut(skip);
            let (piece, tail) = tail.split_at_mut(tasks[t].size() * c);
            pieces[t] = Some(piece);
            rest = tail;
            at = starts[t] + tasks[t].size();
        }
        for (t, p) in pieces.into_iter().enumerate() {
            out[t].push(p.expect("every task has a window"));
        }
    }
    out
}

fn check_window(table: &TensorTable, direction: Direction, start: usize, rows: usize, task: usize) -> Result<(), EngineError> {
    let tensors = table.values.iter().chain(if direction == Direction::Backward {
        table.grads.iter()
    } else {
        [].iter()
    });
    for t in tensors.flatten() {
        if t.offset() != start * t.row_len() || t.bs() != rows {
            return Err(EngineError::Window(format!(
                "task {task}: tensor window at offset {} with bs {}, schedule expects rows [{start}, {})",
                t.offset(),
                t.bs(),
                start + rows
            )));
        }
    }
    Ok(())
}
