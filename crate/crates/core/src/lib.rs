//! Batched execution of one vertex function over many input graphs: vertex
//! IR, reverse-mode differentiation, scheduling, dynamic-tensor memory, an
//! optimizing execution engine, reference models and an SGD trainer.

pub mod autodiff;
pub mod engine;
pub mod error;
pub mod graph;
pub mod ir;
pub mod memory;
pub mod models;
pub mod program;
pub mod schedule;
pub mod tensor;
pub mod trainer;
