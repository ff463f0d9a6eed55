//! Per-task storage windows and single-instruction execution.

use std::sync::atomic::Ordering;

use crate::error::EngineError;
use crate::graph::GraphBatch;
use crate::ir::SymbolId;
use crate::memory::{exec_load, exec_store, Exchange};
use crate::program::{Channel, Instr, Program, Slot};
use crate::tensor::{apply_kernel, DenseTensor, TensorView, TensorViewMut};

use super::Counters;

pub(crate) enum Cell<'f> {
    Empty,
    Ro(&'f [f64]),
    Rw(&'f mut [f64]),
}

/// Storage visible to one lane while it runs one task (or a flush).
pub(crate) struct Frame<'f> {
    cells: Vec<Cell<'f>>,
    pub rows: usize,
}

/// Everything both lanes may read during a pass.
pub(crate) struct Shared<'a> {
    pub program: &'a Program,
    pub batch: &'a GraphBatch<'a>,
    pub backward: bool,
    /// Read-only dynamic storage by symbol: forward values during backward.
    pub frozen: &'a [Vec<f64>],
    pub param_ids: &'a [SymbolId],
    pub param_values: &'a [DenseTensor],
    pub pull: &'a Exchange,
    pub push_grad: &'a Exchange,
    pub counters: &'a Counters,
}

/// Exchange channels only the main lane may write.
pub(crate) struct Outbound<'a> {
    pub state: &'a mut Exchange,
    pub state_grad: &'a mut Exchange,
    pub pull_grad: &'a mut Exchange,
    pub push: &'a mut Exchange,
}

impl Shared<'_> {
    /// The slot a pass writes for symbol `s`.
    pub fn written_slot(&self, s: usize) -> Slot {
        if self.backward {
            Slot::Grad(SymbolId(s))
        } else {
            Slot::Value(SymbolId(s))
        }
    }

    pub fn row_len(&self, s: usize) -> usize {
        self.program.slot(Slot::Value(SymbolId(s))).row_len()
    }
}

impl<'f> Frame<'f> {
    /// Builds the cells for rows `[start, start + rows)`. `written` holds
    /// the window of each symbol's written slot that this lane owns.
    pub fn build(
        sh: &Shared<'f>,
        written: Vec<Option<&'f mut [f64]>>,
        param_grads: Option<&'f mut [DenseTensor]>,
        start: usize,
        rows: usize,
    ) -> Result<Self, EngineError> {
        let n = sh.program.n_symbols();
        let mut cells: Vec<Cell<'f>> = (0..2 * n).map(|_| Cell::Empty).collect();
        for (&id, v) in sh.param_ids.iter().zip(sh.param_values) {
            cells[Slot::Value(id).index()] = Cell::Ro(v.data());
        }
        if let Some(grads) = param_grads {
            for (&id, g) in sh.param_ids.iter().zip(grads.iter_mut()) {
                cells[Slot::Grad(id).index()] = Cell::Rw(g.data_mut());
            }
        }
        for (s, w) in written.into_iter().enumerate() {
            if let Some(w) = w {
                cells[sh.written_slot(s).index()] = Cell::Rw(w);
            }
        }
        if sh.backward {
            for (s, store) in sh.frozen.iter().enumerate() {
                if sh.program.is_param(SymbolId(s)) {
                    continue;
                }
                let c = sh.row_len(s);
                let (a, b) = (start * c, (start + rows) * c);
                if b > store.len() {
                    return Err(EngineError::Internal(format!(
                        "forward value of {} holds {} elements, window needs [{a}, {b})",
                        sh.program.symbol_name(SymbolId(s)),
                        store.len()
                    )));
                }
                cells[Slot::Value(SymbolId(s)).index()] = Cell::Ro(&store[a..b]);
            }
        }
        Ok(Self { cells, rows })
    }

    pub fn take_rw(&mut self, slot: Slot) -> Option<&'f mut [f64]> {
        match std::mem::replace(&mut self.cells[slot.index()], Cell::Empty) {
            Cell::Rw(d) => Some(d),
            other => {
                self.cells[slot.index()] = other;
                None
            }
        }
    }

    pub fn put_rw(&mut self, slot: Slot, data: &'f mut [f64]) {
        self.cells[slot.index()] = Cell::Rw(data);
    }

    fn read(&self, slot: Slot) -> Option<&[f64]> {
        match &self.cells[slot.index()] {
            Cell::Ro(d) => Some(d),
            Cell::Rw(d) => Some(d),
            Cell::Empty => None,
        }
    }
}

fn missing(program: &Program, slot: Slot, task: usize) -> EngineError {
    let what = if slot.is_grad() { "gradient" } else { "value" };
    EngineError::Internal(format!(
        "task {task}: {what} of {} is not available to this lane",
        program.symbol_name(slot.symbol())
    ))
}

/// Runs one instruction over the frame's rows.
pub(crate) fn exec(
    ins: &Instr,
    frame: &mut Frame<'_>,
    sh: &Shared<'_>,
    out: Option<&mut Outbound<'_>>,
    vertices: &[usize],
    task: usize,
) -> Result<(), EngineError> {
    let program = sh.program;
    let rows = frame.rows;
    let mem = |e| EngineError::Memory { task, source: e };
    match ins {
        Instr::Load { channel, key, out: dst, mode } => {
            let data = frame.take_rw(*dst).ok_or_else(|| missing(program, *dst, task))?;
            let ex: &Exchange = match (channel, &out) {
                (Channel::Pull, _) => sh.pull,
                (Channel::PushGrad, _) => sh.push_grad,
                (Channel::State, Some(o)) => o.state,
                (Channel::StateGrad, Some(o)) => o.state_grad,
                _ => return Err(EngineError::Internal(format!("task {task}: {} cannot run on this lane", ins.name()))),
            };
            let moved = exec_load(ex, *channel, *key, vertices, sh.batch, data, *mode);
            frame.put_rw(*dst, data);
            let moved = moved.map_err(mem)?;
            count_copy(sh.counters, moved);
            Ok(())
        }
        Instr::Store { channel, key, arg, mode } => {
            let Some(o) = out else {
                return Err(EngineError::Internal(format!("task {task}: {} cannot run on this lane", ins.name())));
            };
            let ex: &mut Exchange = match channel {
                Channel::State => o.state,
                Channel::StateGrad => o.state_grad,
                Channel::PullGrad => o.pull_grad,
                Channel::Push => o.push,
                _ => return Err(EngineError::Internal(format!("task {task}: cannot store to {}", channel.name()))),
            };
            let src = frame.read(*arg).ok_or_else(|| missing(program, *arg, task))?;
            let moved = exec_store(ex, *channel, *key, vertices, sh.batch, src, *mode).map_err(mem)?;
            count_copy(sh.counters, moved);
            Ok(())
        }
        Instr::Math { op, args, outs, mode } => {
            let mut taken = Vec::with_capacity(outs.len());
            for &o in outs {
                taken.push(frame.take_rw(o).ok_or_else(|| missing(program, o, task))?);
            }
            let result = {
                let mut inputs = Vec::with_capacity(args.len());
                for &a in args {
                    let data = frame.read(a).ok_or_else(|| missing(program, a, task))?;
                    let info = program.slot(a);
                    inputs.push(if info.param {
                        TensorView::unbatched(&info.shape, data)
                    } else {
                        TensorView::batched(rows, &info.shape, data)
                    });
                }
                let mut outputs: Vec<TensorViewMut> = outs
                    .iter()
                    .zip(taken.iter_mut())
                    .map(|(&o, d)| {
                        let info = program.slot(o);
                        if info.param {
                            TensorViewMut::unbatched(&info.shape, d)
                        } else {
                            TensorViewMut::batched(rows, &info.shape, d)
                        }
                    })
                    .collect();
                apply_kernel(op, &inputs, &mut outputs, *mode)
            };
            for (&o, d) in outs.iter().zip(taken) {
                frame.put_rw(o, d);
            }
            sh.counters.kernel_dispatches.fetch_add(1, Ordering::Relaxed);
            result.map_err(|e| EngineError::Kernel { task, source: e })
        }
    }
}

fn count_copy(c: &Counters, elements: usize) {
    c.copy_calls.fetch_add(1, Ordering::Relaxed);
    c.bytes_copied.fetch_add((elements * std::mem::size_of::<f64>()) as u64, Ordering::Relaxed);
}
