//! Reverse-mode differentiation of a vertex function.
//!
//! Backward instructions are emitted in reverse forward order, one per
//! (expression, differentiable argument) pair. Every gradient write
//! accumulates, so a symbol with several consumers collects the sum of their
//! contributions. Message primitives swap roles: a gather becomes a keyed
//! gradient store to the child, a scatter becomes a load of what the parents
//! sent, a pull sends its gradient outward and a push reads the externally
//! seeded gradient.

use std::ops::Range;

use crate::error::AutodiffError;
use crate::ir::{Expression, SymbolId, VertexFunction};
use crate::program::{Channel, Instr, Key, Pass, Program, Slot};
use crate::tensor::{KernelOp, WriteMode};

/// Backward instructions generated for one forward expression.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub expr: usize,
    /// Gradients consumed (`∇s_l`).
    pub grad_in: Vec<Slot>,
    /// Forward results (`s_l`).
    pub results: Vec<SymbolId>,
    /// Forward arguments (`s_r`).
    pub args: Vec<SymbolId>,
    pub instrs: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradProgram {
    forward: Program,
    backward: Program,
    records: Vec<GradRecord>,
    param_grads: Vec<(SymbolId, Slot)>,
}

const ACC: WriteMode = WriteMode::Accumulate;

/// Builds the backward program of a shape-inferred vertex function.
pub fn differentiate(f: &VertexFunction) -> Result<GradProgram, AutodiffError> {
    if !f.is_inferred() {
        return Err(AutodiffError::NotInferred);
    }
    let forward = Program::forward(f).map_err(|_| AutodiffError::NotInferred)?;
    let mut instrs = Vec::new();
    let mut records = Vec::new();
    for (e, expr) in f.exprs().iter().enumerate().rev() {
        let start = instrs.len();
        emit(f, expr, &mut instrs)?;
        records.push(GradRecord {
            expr: e,
            grad_in: expr.results().iter().map(|&r| Slot::Grad(r)).collect(),
            results: expr.results().to_vec(),
            args: expr.args().to_vec(),
            instrs: start..instrs.len(),
        });
    }
    let backward = forward.with_instrs(Pass::Backward, instrs);
    let param_grads = f.params().iter().map(|&p| (p, Slot::Grad(p))).collect();
    Ok(GradProgram {
        forward,
        backward,
        records,
        param_grads,
    })
}

fn math(op: KernelOp, args: Vec<Slot>, out: Slot) -> Instr {
    Instr::Math {
        op,
        args,
        outs: vec![out],
        mode: ACC,
    }
}

fn emit(f: &VertexFunction, expr: &Expression, out: &mut Vec<Instr>) -> Result<(), AutodiffError> {
    use Slot::{Grad, Value};
    match expr {
        Expression::Gather { child, result } => out.push(Instr::Store {
            channel: Channel::StateGrad,
            key: Key::Child(*child),
            arg: Grad(*result),
            mode: ACC,
        }),
        Expression::Pull { result } => out.push(Instr::Store {
            channel: Channel::PullGrad,
            key: Key::Own,
            arg: Grad(*result),
            mode: ACC,
        }),
        Expression::Scatter { arg } => out.push(Instr::Load {
            channel: Channel::StateGrad,
            key: Key::Own,
            out: Grad(*arg),
            mode: ACC,
        }),
        Expression::Push { arg } => out.push(Instr::Load {
            channel: Channel::PushGrad,
            key: Key::Own,
            out: Grad(*arg),
            mode: ACC,
        }),
        Expression::Math { op, args, results } => {
            let gy = Grad(results[0]);
            let y = Value(results[0]);
            match op {
                KernelOp::MatMul => {
                    out.push(math(KernelOp::MatMulTransB, vec![gy, Value(args[1])], Grad(args[0])));
                    out.push(math(KernelOp::MatMulTransA, vec![Value(args[0]), gy], Grad(args[1])));
                }
                KernelOp::Add => {
                    out.push(math(KernelOp::Identity, vec![gy], Grad(args[0])));
                    out.push(math(KernelOp::Identity, vec![gy], Grad(args[1])));
                }
                KernelOp::Sub => {
                    out.push(math(KernelOp::Identity, vec![gy], Grad(args[0])));
                    out.push(math(KernelOp::Neg, vec![gy], Grad(args[1])));
                }
                KernelOp::Mul => {
                    out.push(math(KernelOp::Mul, vec![gy, Value(args[1])], Grad(args[0])));
                    out.push(math(KernelOp::Mul, vec![gy, Value(args[0])], Grad(args[1])));
                }
                KernelOp::Div => {
                    out.push(math(KernelOp::Div, vec![gy, Value(args[1])], Grad(args[0])));
                    out.push(math(KernelOp::DivGradRhs, vec![gy, y, Value(args[1])], Grad(args[1])));
                }
                KernelOp::Sigmoid => out.push(math(KernelOp::SigmoidGrad, vec![gy, y], Grad(args[0]))),
                KernelOp::Tanh => out.push(math(KernelOp::TanhGrad, vec![gy, y], Grad(args[0]))),
                KernelOp::Relu => out.push(math(KernelOp::ReluGrad, vec![gy, Value(args[0])], Grad(args[0]))),
                KernelOp::ReduceSum => out.push(math(KernelOp::BroadcastCols, vec![gy], Grad(args[0]))),
                KernelOp::Concat => {
                    let mut start = 0;
                    for &a in args {
                        out.push(math(KernelOp::SliceCols { start }, vec![gy], Grad(a)));
                        start += symbol_width(f, a);
                    }
                }
                KernelOp::Split(_) => {
                    let mut start = 0;
                    for &r in results {
                        out.push(math(KernelOp::EmbedCols { start }, vec![Grad(r)], Grad(args[0])));
                        start += symbol_width(f, r);
                    }
                }
                other => return Err(AutodiffError::NoGradRule(other.name().to_string())),
            }
        }
    }
    Ok(())
}

fn symbol_width(f: &VertexFunction, s: SymbolId) -> usize {
    f.symbol(s).shape.as_ref().map_or(0, |sh| sh.iter().product())
}

impl GradProgram {
    pub fn forward(&self) -> &Program {
        &self.forward
    }

    pub fn backward(&self) -> &Program {
        &self.backward
    }

    pub fn records(&self) -> &[GradRecord] {
        &self.records
    }

    /// Differentiating a gradient program is not supported.
    pub fn differentiate(&self) -> Result<GradProgram, AutodiffError> {
        Err(AutodiffError::HigherOrder)
    }
}

/// Parameter to gradient-slot mapping, one entry per parameter.
pub fn param_grad_symbols(g: &GradProgram) -> &[(SymbolId, Slot)] {
    &g.param_grads
}
