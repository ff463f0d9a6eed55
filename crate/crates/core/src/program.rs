//! Lowered instruction form shared by the forward function and its gradient.
//!
//! Every symbol owns two storage slots: its value and its gradient. Message
//! primitives become keyed loads and stores against exchange channels, and
//! math becomes kernel dispatches with an explicit write mode so gradient
//! contributions can accumulate.

use crate::error::BuildError;
use crate::ir::{Expression, SymbolId, SymbolKind, VertexFunction};
use crate::tensor::{numel, KernelOp, WriteMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Value(SymbolId),
    Grad(SymbolId),
}

impl Slot {
    pub fn symbol(self) -> SymbolId {
        match self {
            Slot::Value(s) | Slot::Grad(s) => s,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Slot::Value(s) => 2 * s.0,
            Slot::Grad(s) => 2 * s.0 + 1,
        }
    }

    pub fn is_grad(self) -> bool {
        matches!(self, Slot::Grad(_))
    }
}

/// Exchange buffer a keyed copy goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    State,
    StateGrad,
    Pull,
    PullGrad,
    Push,
    PushGrad,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::State,
        Channel::StateGrad,
        Channel::Pull,
        Channel::PullGrad,
        Channel::Push,
        Channel::PushGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::State => "state",
            Channel::StateGrad => "state_grad",
            Channel::Pull => "pull",
            Channel::PullGrad => "pull_grad",
            Channel::Push => "push",
            Channel::PushGrad => "push_grad",
        }
    }

    /// Channels that carry messages between vertices of the same graph.
    pub fn is_structural(self) -> bool {
        matches!(self, Channel::State | Channel::StateGrad)
    }
}

/// Which vertex's slice a keyed copy addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Key {
    Own,
    Child(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    /// Copy one slice per task vertex from `channel` into `out`.
    Load {
        channel: Channel,
        key: Key,
        out: Slot,
        mode: WriteMode,
    },
    /// Copy each row of `arg` into `channel` under the row's key.
    Store {
        channel: Channel,
        key: Key,
        arg: Slot,
        mode: WriteMode,
    },
    Math {
        op: KernelOp,
        args: Vec<Slot>,
        outs: Vec<Slot>,
        mode: WriteMode,
    },
}

impl Instr {
    pub fn reads(&self) -> &[Slot] {
        match self {
            Instr::Load { .. } => &[],
            Instr::Store { arg, .. } => std::slice::from_ref(arg),
            Instr::Math { args, .. } => args,
        }
    }

    pub fn writes(&self) -> &[Slot] {
        match self {
            Instr::Load { out, .. } => std::slice::from_ref(out),
            Instr::Store { .. } => &[],
            Instr::Math { outs, .. } => outs,
        }
    }

    pub fn is_message(&self) -> bool {
        !matches!(self, Instr::Math { .. })
    }

    /// Loads from the state channels, the `gather` side of message passing.
    pub fn is_structural_load(&self) -> bool {
        matches!(self, Instr::Load { channel, .. } if channel.is_structural())
    }

    /// Stores to the state channels, the `scatter` side of message passing.
    pub fn is_structural_store(&self) -> bool {
        matches!(self, Instr::Store { channel, .. } if channel.is_structural())
    }

    pub fn name(&self) -> String {
        match self {
            Instr::Load { channel, key, .. } => format!("load[{}{}]", channel.name(), key_suffix(*key)),
            Instr::Store { channel, key, .. } => format!("store[{}{}]", channel.name(), key_suffix(*key)),
            Instr::Math { op, .. } => op.name().to_string(),
        }
    }
}

fn key_suffix(key: Key) -> String {
    match key {
        Key::Own => String::new(),
        Key::Child(k) => format!(":{k}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Backward,
}

/// Storage description of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotInfo {
    pub shape: Vec<usize>,
    /// Parameters and their gradients are unbatched.
    pub param: bool,
}

impl SlotInfo {
    pub fn row_len(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pass: Pass,
    instrs: Vec<Instr>,
    slots: Vec<SlotInfo>,
    names: Vec<String>,
    state_len: usize,
    pull_len: usize,
    push_len: usize,
}

impl Program {
    /// Lowers a shape-inferred vertex function.
    pub fn forward(f: &VertexFunction) -> Result<Self, BuildError> {
        let state = f.state_shape().ok_or_else(not_inferred)?;
        let pull = f.pull_shape().ok_or_else(not_inferred)?;
        let mut slots = Vec::with_capacity(2 * f.symbols().len());
        for s in f.symbols() {
            let shape = s.shape.clone().ok_or_else(not_inferred)?;
            let param = s.kind == SymbolKind::Parameter;
            slots.push(SlotInfo {
                shape: shape.clone(),
                param,
            });
            slots.push(SlotInfo { shape, param });
        }
        let instrs = f
            .exprs()
            .iter()
            .map(|e| match e {
                Expression::Gather { child, result } => Instr::Load {
                    channel: Channel::State,
                    key: Key::Child(*child),
                    out: Slot::Value(*result),
                    mode: WriteMode::Overwrite,
                },
                Expression::Pull { result } => Instr::Load {
                    channel: Channel::Pull,
                    key: Key::Own,
                    out: Slot::Value(*result),
                    mode: WriteMode::Overwrite,
                },
                Expression::Scatter { arg } => Instr::Store {
                    channel: Channel::State,
                    key: Key::Own,
                    arg: Slot::Value(*arg),
                    mode: WriteMode::Overwrite,
                },
                Expression::Push { arg } => Instr::Store {
                    channel: Channel::Push,
                    key: Key::Own,
                    arg: Slot::Value(*arg),
                    mode: WriteMode::Overwrite,
                },
                Expression::Math { op, args, results } => Instr::Math {
                    op: op.clone(),
                    args: args.iter().map(|&a| Slot::Value(a)).collect(),
                    outs: results.iter().map(|&r| Slot::Value(r)).collect(),
                    mode: WriteMode::Overwrite,
                },
            })
            .collect();
        Ok(Self {
            pass: Pass::Forward,
            instrs,
            slots,
            names: f.symbols().iter().map(|s| s.name.clone()).collect(),
            state_len: numel(state),
            pull_len: numel(pull),
            push_len: f.push_shape().map_or(0, numel),
        })
    }

    /// Same storage layout as `self`, different instructions.
    pub(crate) fn with_instrs(&self, pass: Pass, instrs: Vec<Instr>) -> Self {
        Self {
            pass,
            instrs,
            ..self.clone()
        }
    }

    pub fn pass(&self) -> Pass {
        self.pass
    }

    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    pub fn slot(&self, slot: Slot) -> &SlotInfo {
        &self.slots[slot.index()]
    }

    pub fn n_symbols(&self) -> usize {
        self.names.len()
    }

    pub fn symbol_name(&self, s: SymbolId) -> &str {
        &self.names[s.0]
    }

    pub fn is_param(&self, s: SymbolId) -> bool {
        self.slots[2 * s.0].param
    }

    /// Flat length of one vertex's slice in `channel`.
    pub fn channel_len(&self, channel: Channel) -> usize {
        match channel {
            Channel::State | Channel::StateGrad => self.state_len,
            Channel::Pull | Channel::PullGrad => self.pull_len,
            Channel::Push | Channel::PushGrad => self.push_len,
        }
    }

    pub fn message_count(&self) -> usize {
        self.instrs.iter().filter(|i| i.is_message()).count()
    }

    /// Instruction dependency edges `(from, to)`: read-after-write from
    /// every earlier writer of a slot to each later reader, and
    /// write-after-write between successive writers of a slot.
    pub fn dependency_edges(&self) -> Vec<(usize, usize)> {
        let mut writers: Vec<Vec<usize>> = vec![Vec::new(); self.slots.len()];
        let mut edges = Vec::new();
        for (i, ins) in self.instrs.iter().enumerate() {
            for r in ins.reads() {
                for &w in &writers[r.index()] {
                    edges.push((w, i));
                }
            }
            for o in ins.writes() {
                if let Some(&w) = writers[o.index()].last() {
                    edges.push((w, i));
                }
            }
            for o in ins.writes() {
                writers[o.index()].push(i);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

fn not_inferred() -> BuildError {
    BuildError::Invalid {
        expr: 0,
        msg: "vertex function must be shape-inferred before lowering".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::FunctionBuilder;

    #[test]
    fn lowering_keeps_message_count() {
        let mut b = FunctionBuilder::new(2);
        let l = b.gather(0);
        let r = b.gather(1);
        let x = b.pull();
        let s = b.add(l, r);
        let s = b.add(s, x);
        let h = b.tanh(s);
        b.scatter(h);
        b.push(h);
        let f = b.build().unwrap().infer_shapes(&[3], &[3]).unwrap();
        let p = Program::forward(&f).unwrap();
        assert_eq!(p.message_count(), f.message_count());
        assert_eq!(p.channel_len(Channel::State), 3);
        assert_eq!(p.channel_len(Channel::Push), 3);
        assert!(p.instrs()[0].is_structural_load());
        assert!(p.instrs()[6].is_structural_store());
        let edges = p.dependency_edges();
        assert!(edges.contains(&(0, 3)) && edges.contains(&(5, 6)) && edges.contains(&(5, 7)));
        assert!(edges.iter().all(|&(a, b)| a < b));
    }

    #[test]
    fn uninferred_function_rejected() {
        let mut b = FunctionBuilder::new(1);
        let g = b.gather(0);
        b.scatter(g);
        assert!(Program::forward(&b.build().unwrap()).is_err());
    }
}
