//! Fusion of directly linked elementwise instructions.
//!
//! Candidate groups come from union-find over read-after-write edges whose
//! endpoints are both elementwise. A candidate may not be replaceable by one
//! instruction when a path leaves it and comes back; such candidates are
//! split by how many times a path into each member re-enters the group from
//! outside, which makes every piece closed under paths, and then into
//! connected pieces. Singletons stay as they are.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::sync::Arc;

use crate::program::{Instr, Program, Slot};
use crate::tensor::{FusedArg, FusedKernel, FusedStep, KernelOp, WriteMode};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FusionPlan {
    /// Instruction indices of each group, ascending.
    pub groups: Vec<Vec<usize>>,
}

impl FusionPlan {
    pub fn fused_instructions(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

fn fusable(program: &Program, ins: &Instr) -> bool {
    match ins {
        Instr::Math { op, outs, .. } => op.is_elementwise() && outs.iter().all(|s| !program.slot(*s).param),
        _ => false,
    }
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[a.max(b)] = a.min(b);
        }
    }
}

pub fn detect_fusion(program: &Program) -> FusionPlan {
    let instrs = program.instrs();
    let n = instrs.len();
    let ok: Vec<bool> = instrs.iter().map(|i| fusable(program, i)).collect();
    let edges = program.dependency_edges();
    let mut dsu = Dsu((0..n).collect());
    for (a, b) in raw_edges(program) {
        if ok[a] && ok[b] {
            dsu.union(a, b);
        }
    }
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &edges {
        pred[b].push(a);
    }
    let mut cands: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in (0..n).filter(|&i| ok[i]) {
        cands[dsu.find(i)].push(i);
    }
    let mut groups = Vec::new();
    for cand in cands.into_iter().filter(|c| c.len() > 1) {
        for piece in split_closed(&cand, &pred, n) {
            for part in components(&piece, &edges) {
                if part.len() > 1 {
                    groups.push(part);
                }
            }
        }
    }
    groups.sort();
    FusionPlan { groups }
}

/// Read-after-write edges only.
fn raw_edges(program: &Program) -> Vec<(usize, usize)> {
    let mut writers: Vec<Vec<usize>> = vec![Vec::new(); 2 * program.n_symbols()];
    let mut edges = Vec::new();
    for (i, ins) in program.instrs().iter().enumerate() {
        for r in ins.reads() {
            edges.extend(writers[r.index()].iter().map(|&w| (w, i)));
        }
        for o in ins.writes() {
            writers[o.index()].push(i);
        }
    }
    edges
}

/// Splits `group` by re-entry depth. Instruction indices are a topological
/// order, so one forward sweep computes, for each member, the largest number
/// of outside excursions on any path into it from another member.
fn split_closed(group: &[usize], pred: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    let mut member = vec![false; n];
    for &g in group {
        member[g] = true;
    }
    // depth of members; for outsiders, the deepest member that reaches them
    let mut depth: Vec<Option<usize>> = vec![None; n];
    let first = group[0];
    for v in first..n {
        let mut d: Option<usize> = None;
        for &u in &pred[v] {
            let via = match (member[u], member[v]) {
                (true, _) => depth[u],
                (false, true) => depth[u].map(|x| x + 1),
                (false, false) => depth[u],
            };
            d = d.max(via);
        }
        depth[v] = if member[v] { Some(d.unwrap_or(0)) } else { d };
    }
    let mut by_depth: Vec<(usize, usize)> = group.iter().map(|&g| (depth[g].unwrap(), g)).collect();
    by_depth.sort();
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut last = None;
    for (d, g) in by_depth {
        if last != Some(d) {
            out.push(Vec::new());
            last = Some(d);
        }
        out.last_mut().unwrap().push(g);
    }
    for p in &mut out {
        p.sort_unstable();
    }
    out
}

/// Connected pieces of `piece` under any dependency edge inside it.
fn components(piece: &[usize], edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let pos = |x: usize| piece.binary_search(&x).ok();
    let mut dsu = Dsu((0..piece.len()).collect());
    for &(a, b) in edges {
        if let (Some(i), Some(j)) = (pos(a), pos(b)) {
            dsu.union(i, j);
        }
    }
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); piece.len()];
    for (i, &v) in piece.iter().enumerate() {
        let r = dsu.find(i);
        parts[r].push(v);
    }
    parts.into_iter().filter(|p| !p.is_empty()).collect()
}

/// Replaces every group with one fused instruction and reorders the result
/// topologically, preferring the earliest original instruction.
pub fn apply_fusion(program: &Program, plan: &FusionPlan) -> Program {
    let instrs = program.instrs();
    let n = instrs.len();
    // node id per instruction: groups first, then singletons
    let mut node = vec![usize::MAX; n];
    let mut nodes: Vec<Vec<usize>> = Vec::new();
    for g in &plan.groups {
        for &i in g {
            node[i] = nodes.len();
        }
        nodes.push(g.clone());
    }
    for (i, slot) in node.iter_mut().enumerate() {
        if *slot == usize::MAX {
            *slot = nodes.len();
            nodes.push(vec![i]);
        }
    }
    let m = nodes.len();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut indeg = vec![0usize; m];
    for (a, b) in program.dependency_edges() {
        let (x, y) = (node[a], node[b]);
        if x != y {
            succ[x].push(y);
            indeg[y] += 1;
        }
    }
    let key = |k: usize| nodes[k][0];
    let mut ready: BinaryHeap<Reverse<(usize, usize)>> = (0..m).filter(|&k| indeg[k] == 0).map(|k| Reverse((key(k), k))).collect();
    let mut out = Vec::with_capacity(m);
    while let Some(Reverse((_, k))) = ready.pop() {
        out.push(if nodes[k].len() == 1 {
            instrs[nodes[k][0]].clone()
        } else {
            fuse(program, &nodes[k])
        });
        for &s in &succ[k] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(Reverse((key(s), s)));
            }
        }
    }
    assert_eq!(out.len(), m, "fusion groups must be closed under paths");
    program.with_instrs(program.pass(), out)
}

fn fuse(program: &Program, members: &[usize]) -> Instr {
    let mut outputs: Vec<Slot> = Vec::new();
    for &i in members {
        for &o in program.instrs()[i].writes() {
            if !outputs.contains(&o) {
                outputs.push(o);
            }
        }
    }
    let mut inputs: Vec<Slot> = Vec::new();
    let mut steps = Vec::with_capacity(members.len());
    for &i in members {
        let Instr::Math { op, args, outs, mode } = &program.instrs()[i] else {
            unreachable!("only math instructions are fused")
        };
        let args = args
            .iter()
            .map(|a| match outputs.iter().position(|o| o == a) {
                Some(k) => FusedArg::Output(k),
                None => {
                    let k = inputs.iter().position(|x| x == a).unwrap_or_else(|| {
                        inputs.push(*a);
                        inputs.len() - 1
                    });
                    FusedArg::Input(k)
                }
            })
            .collect();
        steps.push(FusedStep {
            op: op.clone(),
            args,
            out: outputs.iter().position(|o| *o == outs[0]).unwrap(),
            mode: *mode,
        });
    }
    let kernel = FusedKernel::new(steps, inputs.len(), outputs.len()).expect("members are elementwise");
    Instr::Math {
        op: KernelOp::Fused(Arc::new(kernel)),
        args: inputs,
        outs: outputs,
        mode: WriteMode::Overwrite,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::FunctionBuilder;

    fn lower(b: FunctionBuilder, d: usize) -> Program {
        Program::forward(&b.build().unwrap().infer_shapes(&[d], &[d]).unwrap()).unwrap()
    }

    #[test]
    fn chain_of_three_fuses() {
        let mut b = FunctionBuilder::new(1);
        let g = b.gather(0);
        let x = b.pull();
        let a = b.sigmoid(g);
        let m = b.mul(a, x);
        let s = b.add(m, g);
        b.scatter(s);
        let p = lower(b, 2);
        let plan = detect_fusion(&p);
        assert_eq!(plan.groups, vec![vec![2, 3, 4]]);
        let fused = apply_fusion(&p, &plan);
        assert_eq!(fused.instrs().len(), 4);
        assert!(matches!(&fused.instrs()[2], Instr::Math { op: KernelOp::Fused(k), .. } if k.steps().len() == 3));
    }

    #[test]
    fn matmul_separates_groups() {
        let mut b = FunctionBuilder::new(1);
        let w = b.param("W", &[2, 2]);
        let g = b.gather(0);
        let a = b.tanh(g);
        let a = b.sigmoid(a);
        let m = b.matmul(a, w);
        let c = b.tanh(m);
        let c = b.sigmoid(c);
        b.scatter(c);
        let plan = detect_fusion(&lower(b, 2));
        assert_eq!(plan.groups, vec![vec![1, 2], vec![4, 5]]);
    }

    #[test]
    fn singleton_not_rewritten() {
        let mut b = FunctionBuilder::new(1);
        let w = b.param("W", &[2, 2]);
        let g = b.gather(0);
        let a = b.tanh(g);
        let m = b.matmul(a, w);
        b.scatter(m);
        assert!(detect_fusion(&lower(b, 2)).groups.is_empty());
    }

    #[test]
    fn path_through_outside_splits_group() {
        // a -> concat -> split -> b, with a -> b directly as well
        let mut b = FunctionBuilder::new(1);
        let g = b.gather(0);
        let a = b.tanh(g);
        let cat = b.concat(&[a, a]);
        let parts = b.split(cat, 2);
        let c = b.add(parts[0], a);
        b.scatter(c);
        let p = lower(b, 2);
        let plan = detect_fusion(&p);
        assert!(plan.groups.is_empty(), "{:?}", plan.groups);
        let fused = apply_fusion(&p, &plan);
        assert_eq!(fused.instrs(), p.instrs());
    }
}
