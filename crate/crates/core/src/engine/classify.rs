//! Lazy and eager operators.
//!
//! With `g` the structural loads (gathers, or gradient loads from parents)
//! and `s` the structural stores, an instruction is lazy when it descends
//! from some `g` without reaching any `s`, and eager when it reaches some `s`
//! without descending from any `g`. Nothing a parent vertex needs depends on
//! a lazy instruction, and an eager instruction needs nothing a child vertex
//! produces.

use crate::program::Program;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    Eager,
    Lazy,
    Main,
}

/// One tag per instruction of `program`.
pub fn classify_operators(program: &Program) -> Vec<OpClass> {
    let instrs = program.instrs();
    let n = instrs.len();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (a, b) in program.dependency_edges() {
        succ[a].push(b);
        pred[b].push(a);
    }
    let loads: Vec<usize> = (0..n).filter(|&i| instrs[i].is_structural_load()).collect();
    let stores: Vec<usize> = (0..n).filter(|&i| instrs[i].is_structural_store()).collect();
    let below_g = reach(&succ, &loads);
    let above_s = reach(&pred, &stores);
    (0..n)
        .map(|i| {
            let ins = &instrs[i];
            if ins.is_structural_load() || ins.is_structural_store() {
                OpClass::Main
            } else if below_g[i] && !above_s[i] {
                OpClass::Lazy
            } else if above_s[i] && !below_g[i] {
                OpClass::Eager
            } else {
                OpClass::Main
            }
        })
        .collect()
}

/// Nodes reachable from `starts` by one or more edges.
fn reach(adj: &[Vec<usize>], starts: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack: Vec<usize> = starts.iter().flat_map(|&s| adj[s].iter().copied()).collect();
    while let Some(v) = stack.pop() {
        if !std::mem::replace(&mut seen[v], true) {
            stack.extend(adj[v].iter().copied());
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::differentiate;
    use crate::ir::FunctionBuilder;
    use crate::program::Instr;

    #[test]
    fn pull_eager_push_lazy() {
        let mut b = FunctionBuilder::new(1);
        let w = b.param("W", &[2, 2]);
        let g = b.gather(0);
        let x = b.pull();
        let wx = b.matmul(x, w);
        let s = b.add(wx, g);
        let h = b.tanh(s);
        b.scatter(h);
        let out = b.sigmoid(h);
        b.push(out);
        let f = b.build().unwrap().infer_shapes(&[2], &[2]).unwrap();
        let prog = differentiate(&f).unwrap();
        let fwd = classify_operators(prog.forward());
        use OpClass::*;
        assert_eq!(fwd, vec![Main, Eager, Eager, Main, Main, Main, Lazy, Lazy]);

        let bwd = classify_operators(prog.backward());
        for (ins, class) in prog.backward().instrs().iter().zip(&bwd) {
            let writes_param = ins.writes().iter().any(|s| s.is_grad() && prog.backward().is_param(s.symbol()));
            if writes_param {
                assert_eq!(*class, Lazy, "{}", ins.name());
            }
            if let Instr::Load { channel, .. } = ins {
                if *channel == crate::program::Channel::PushGrad {
                    assert_eq!(*class, Eager);
                }
            }
        }
    }
}
