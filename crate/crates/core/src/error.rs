//! Error types, one per layer.

use thiserror::Error;

use crate::ir::SymbolId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dim must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Shape { op: String, msg: String },
    #[error("view [{start}, {end}) exceeds capacity {capacity}")]
    Bounds {
        start: usize,
        end: usize,
        capacity: usize,
    },
    #[error("batched copy destinations overlap at element {0}")]
    Aliasing(usize),
    #[error("copy slice [{start}, {end}) out of range for buffer of {len}")]
    CopyRange { start: usize, end: usize, len: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("expression {expr} references undefined symbol {sym:?}")]
    UndefinedSymbol { expr: usize, sym: SymbolId },
    #[error("symbol {sym:?} is defined more than once (expression {expr})")]
    Redefined { expr: usize, sym: SymbolId },
    #[error("vertex function must contain exactly one scatter, found {0}")]
    ScatterCount(usize),
    #[error("vertex function may contain at most one {what}, found {count}")]
    Multiplicity { what: &'static str, count: usize },
    #[error("gather index {child} out of range for arity {arity}")]
    ChildIndex { child: usize, arity: usize },
    #[error("expression {expr}: {msg}")]
    Invalid { expr: usize, msg: String },
    #[error("expression {expr} ({op}): {msg}")]
    Inference {
        expr: usize,
        op: String,
        msg: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("vertex function has not been shape-inferred")]
    NotInferred,
    #[error("no gradient rule for {0}")]
    NoGradRule(String),
    #[error("higher-order differentiation is not supported")]
    HigherOrder,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: cycle through vertex {vertex}")]
    Cycle { line: usize, vertex: usize },
    #[error("vertex {vertex} has {degree} children, exceeding arity {arity}")]
    Arity {
        vertex: usize,
        degree: usize,
        arity: usize,
    },
    #[error("invalid generator argument: {0}")]
    Argument(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("graph structure: {0}")]
    Structure(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("cannot schedule an empty batch")]
    EmptyBatch,
    #[error("backward schedule requested on an empty task stack")]
    EmptyStack,
    #[error("scheduler stalled with {0} vertices unevaluated (cycle)")]
    Stalled(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("batching task size must be >= 1")]
    EmptyTask,
    #[error("backward offset underflow on symbol {sym:?}: offset {offset}, retreat {by}")]
    Underflow { sym: SymbolId, offset: usize, by: usize },
    #[error("{buffer} slice for vertex {key} has length {found}, expected {expected}")]
    Corruption {
        buffer: &'static str,
        key: usize,
        found: usize,
        expected: usize,
    },
    #[error("{buffer} slice for vertex {key} written twice in one pass")]
    WriteTwice { buffer: &'static str, key: usize },
    #[error("vertex {key} read from {buffer} before its child was evaluated")]
    NotReady { buffer: &'static str, key: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("task {task}: {source}")]
    Kernel { task: usize, source: TensorError },
    #[error("task {task}: {source}")]
    Memory { task: usize, source: MemoryError },
    #[error("lazy window bookkeeping mismatch: {0}")]
    Window(String),
    #[error("eager lane failed: {0}")]
    Lane(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("incompatible corpus: {0}")]
    Incompatible(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
}
