//! Symbolic vertex functions.
//!
//! A vertex function is a straight-line program evaluated once per vertex of
//! an input graph. Besides ordinary math it has four message primitives:
//! `gather(k)` reads the state child `k` published, `scatter(s)` publishes
//! this vertex's state for its parents, `pull()` reads the vertex's external
//! input and `push(s)` publishes an output to the outside.

use std::collections::BinaryHeap;
use std::cmp::Reverse;

use crate::error::BuildError;
use crate::tensor::{numel, KernelOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    /// Result of `gather` or `pull`.
    Input,
    Intermediate,
    Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Symbol {
    pub id: SymbolId,
    pub kind: SymbolKind,
    pub name: String,
    /// Per-vertex shape, excluding the batch dim. Parameters carry their
    /// shape from construction; everything else is filled by inference.
    pub shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Gather { child: usize, result: SymbolId },
    Scatter { arg: SymbolId },
    Pull { result: SymbolId },
    Push { arg: SymbolId },
    Math {
        op: KernelOp,
        args: Vec<SymbolId>,
        results: Vec<SymbolId>,
    },
}

impl Expression {
    pub fn args(&self) -> &[SymbolId] {
        match self {
            Expression::Gather { .. } | Expression::Pull { .. } => &[],
            Expression::Scatter { arg } | Expression::Push { arg } => std::slice::from_ref(arg),
            Expression::Math { args, .. } => args,
        }
    }

    pub fn results(&self) -> &[SymbolId] {
        match self {
            Expression::Gather { result, .. } | Expression::Pull { result } => std::slice::from_ref(result),
            Expression::Scatter { .. } | Expression::Push { .. } => &[],
            Expression::Math { results, .. } => results,
        }
    }

    pub fn op_name(&self) -> &'static str {
        match self {
            Expression::Gather { .. } => "gather",
            Expression::Scatter { .. } => "scatter",
            Expression::Pull { .. } => "pull",
            Expression::Push { .. } => "push",
            Expression::Math { op, .. } => op.name(),
        }
    }

    pub fn is_message(&self) -> bool {
        !matches!(self, Expression::Math { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexFunction {
    symbols: Vec<Symbol>,
    exprs: Vec<Expression>,
    params: Vec<SymbolId>,
    arity: usize,
    pull_shape: Option<Vec<usize>>,
    state_shape: Option<Vec<usize>>,
}

impl VertexFunction {
    /// Validates `exprs` against `symbols` for a function over vertices with
    /// at most `arity` children.
    pub fn build(symbols: Vec<Symbol>, exprs: Vec<Expression>, arity: usize) -> Result<Self, BuildError> {
        let n = symbols.len();
        for (i, s) in symbols.iter().enumerate() {
            if s.id != SymbolId(i) {
                return Err(BuildError::Invalid {
                    expr: 0,
                    msg: format!("symbol table out of order at {i} ({:?})", s.id),
                });
            }
            if s.kind == SymbolKind::Parameter && s.shape.as_ref().is_none_or(|sh| sh.is_empty() || sh.contains(&0)) {
                return Err(BuildError::Invalid {
                    expr: 0,
                    msg: format!("parameter {} needs a concrete shape", s.name),
                });
            }
        }
        let mut defined: Vec<bool> = symbols.iter().map(|s| s.kind == SymbolKind::Parameter).collect();
        let (mut scatters, mut pushes, mut pulls) = (0, 0, 0);
        let mut gathered = vec![false; arity];
        for (e, expr) in exprs.iter().enumerate() {
            for &a in expr.args() {
                if a.0 >= n || !defined[a.0] {
                    return Err(BuildError::UndefinedSymbol { expr: e, sym: a });
                }
            }
            let want = match expr {
                Expression::Gather { child, .. } => {
                    if *child >= arity {
                        return Err(BuildError::ChildIndex { child: *child, arity });
                    }
                    if std::mem::replace(&mut gathered[*child], true) {
                        return Err(BuildError::Multiplicity { what: "gather per child index", count: 2 });
                    }
                    SymbolKind::Input
                }
                Expression::Pull { .. } => {
                    pulls += 1;
                    SymbolKind::Input
                }
                Expression::Scatter { .. } => {
                    scatters += 1;
                    SymbolKind::Intermediate
                }
                Expression::Push { .. } => {
                    pushes += 1;
                    SymbolKind::Intermediate
                }
                Expression::Math { op, args, results } => {
                    check_math_arity(e, op, args.len(), results.len())?;
                    SymbolKind::Intermediate
                }
            };
            for &r in expr.results() {
                if r.0 >= n {
                    return Err(BuildError::UndefinedSymbol { expr: e, sym: r });
                }
                if defined[r.0] {
                    return Err(BuildError::Redefined { expr: e, sym: r });
                }
                if symbols[r.0].kind != want {
                    return Err(BuildError::Invalid {
                        expr: e,
                        msg: format!("{} result {} must be {:?}", expr.op_name(), symbols[r.0].name, want),
                    });
                }
                defined[r.0] = true;
            }
        }
        if scatters != 1 {
            return Err(BuildError::ScatterCount(scatters));
        }
        if pushes > 1 {
            return Err(BuildError::Multiplicity { what: "push", count: pushes });
        }
        if pulls > 1 {
            return Err(BuildError::Multiplicity { what: "pull", count: pulls });
        }
        if let Some(i) = defined.iter().position(|d| !d) {
            return Err(BuildError::Invalid {
                expr: exprs.len(),
                msg: format!("symbol {} is never defined", symbols[i].name),
            });
        }
        let params = symbols.iter().filter(|s| s.kind == SymbolKind::Parameter).map(|s| s.id).collect();
        Ok(Self {
            symbols,
            exprs,
            params,
            arity,
            pull_shape: None,
            state_shape: None,
        })
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn symbol(&self, id: SymbolId) -> &Symbol {
        &self.symbols[id.0]
    }

    pub fn exprs(&self) -> &[Expression] {
        &self.exprs
    }

    pub fn params(&self) -> &[SymbolId] {
        &self.params
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn pull_shape(&self) -> Option<&[usize]> {
        self.pull_shape.as_deref()
    }

    pub fn state_shape(&self) -> Option<&[usize]> {
        self.state_shape.as_deref()
    }

    pub fn is_inferred(&self) -> bool {
        self.state_shape.is_some()
    }

    /// The symbol handed to `push`, if any.
    pub fn pushed(&self) -> Option<SymbolId> {
        self.exprs.iter().find_map(|e| match e {
            Expression::Push { arg } => Some(*arg),
            _ => None,
        })
    }

    pub fn push_shape(&self) -> Option<&[usize]> {
        self.pushed().and_then(|s| self.symbols[s.0].shape.as_deref())
    }

    pub fn message_count(&self) -> usize {
        self.exprs.iter().filter(|e| e.is_message()).count()
    }

    /// Assigns a concrete shape to every symbol.
    pub fn infer_shapes(&self, pull_shape: &[usize], state_shape: &[usize]) -> Result<Self, BuildError> {
        let mut out = self.clone();
        for s in &mut out.symbols {
            if s.kind != SymbolKind::Parameter {
                s.shape = None;
            }
        }
        let err = |e: usize, expr: &Expression, msg: String| BuildError::Inference {
            expr: e,
            op: expr.op_name().into(),
            msg,
        };
        for (e, expr) in self.exprs.iter().enumerate() {
            let shape_of = |id: SymbolId, syms: &[Symbol]| -> Vec<usize> { syms[id.0].shape.clone().expect("defined earlier") };
            let is_param = |id: SymbolId| self.symbols[id.0].kind == SymbolKind::Parameter;
            match expr {
                Expression::Gather { result, .. } => out.symbols[result.0].shape = Some(state_shape.to_vec()),
                Expression::Pull { result } => out.symbols[result.0].shape = Some(pull_shape.to_vec()),
                Expression::Scatter { arg } => {
                    let s = shape_of(*arg, &out.symbols);
                    if s != state_shape {
                        return Err(err(e, expr, format!("scattered shape {s:?} differs from state shape {state_shape:?}")));
                    }
                    if is_param(*arg) {
                        return Err(err(e, expr, "cannot scatter a parameter".into()));
                    }
                }
                Expression::Push { arg } => {
                    if is_param(*arg) {
                        return Err(err(e, expr, "cannot push a parameter".into()));
                    }
                }
                Expression::Math { op, args, results } => {
                    let shapes: Vec<Vec<usize>> = args.iter().map(|a| shape_of(*a, &out.symbols)).collect();
                    let params: Vec<bool> = args.iter().map(|a| is_param(*a)).collect();
                    let res = math_shapes(op, &shapes, &params, results.len()).map_err(|m| err(e, expr, m))?;
                    for (r, s) in results.iter().zip(res) {
                        out.symbols[r.0].shape = Some(s);
                    }
                }
            }
        }
        out.pull_shape = Some(pull_shape.to_vec());
        out.state_shape = Some(state_shape.to_vec());
        Ok(out)
    }

    /// Stable topological order of the expressions: among ready expressions
    /// the earliest in program order goes first.
    pub fn topo_order(&self) -> Vec<usize> {
        let n = self.exprs.len();
        let mut producer = vec![None; self.symbols.len()];
        for (e, expr) in self.exprs.iter().enumerate() {
            for r in expr.results() {
                producer[r.0] = Some(e);
            }
        }
        let mut indeg = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (e, expr) in self.exprs.iter().enumerate() {
            for a in expr.args() {
                if let Some(p) = producer[a.0] {
                    indeg[e] += 1;
                    users[p].push(e);
                }
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&e| indeg[e] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(e)) = ready.pop() {
            order.push(e);
            for &u in &users[e] {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.push(Reverse(u));
                }
            }
        }
        order
    }
}

fn check_math_arity(e: usize, op: &KernelOp, nargs: usize, nres: usize) -> Result<(), BuildError> {
    let (want_args, want_res): (Option<usize>, usize) = match op {
        KernelOp::Split(p) => (Some(1), *p),
        KernelOp::Concat => (None, 1),
        KernelOp::MatMul | KernelOp::SoftmaxXent => (Some(2), 1),
        KernelOp::ReduceSum => (Some(1), 1),
        other => (other.elementwise_arity(), 1),
    };
    let bad_args = match want_args {
        Some(k) => nargs != k,
        None => nargs == 0,
    };
    if bad_args || nres != want_res {
        return Err(BuildError::Invalid {
            expr: e,
            msg: format!("{} takes {want_args:?} args and {want_res} results, got {nargs} and {nres}", op.name()),
        });
    }
    Ok(())
}

fn math_shapes(op: &KernelOp, shapes: &[Vec<usize>], params: &[bool], nres: usize) -> Result<Vec<Vec<usize>>, String> {
    let one_d = |s: &Vec<usize>| -> Result<usize, String> {
        if s.len() == 1 {
            Ok(s[0])
        } else {
            Err(format!("{} needs 1-d operands, got {s:?}", op.name()))
        }
    };
    let no_params = || -> Result<(), String> {
        if params.iter().any(|&p| p) {
            Err(format!("{} does not accept parameter operands", op.name()))
        } else {
            Ok(())
        }
    };
    match op {
        _ if op.is_elementwise() => {
            if params.iter().all(|&p| p) {
                return Err("needs at least one per-vertex operand".into());
            }
            if shapes.iter().any(|s| *s != shapes[0]) {
                return Err(format!("operand shapes differ: {shapes:?}"));
            }
            Ok(vec![shapes[0].clone()])
        }
        KernelOp::MatMul => {
            if params[0] {
                return Err("left operand must be per-vertex".into());
            }
            if !params[1] || shapes[1].len() != 2 {
                return Err("right operand must be a 2-d parameter".into());
            }
            let m = numel(&shapes[0]);
            if shapes[1][0] != m {
                return Err(format!("weight {:?} does not accept operand {:?}", shapes[1], shapes[0]));
            }
            Ok(vec![vec![shapes[1][1]]])
        }
        KernelOp::Concat => {
            no_params()?;
            let mut total = 0;
            for s in shapes {
                total += one_d(s)?;
            }
            Ok(vec![vec![total]])
        }
        KernelOp::Split(p) => {
            no_params()?;
            let w = one_d(&shapes[0])?;
            if *p == 0 || w % p != 0 {
                return Err(format!("{w} does not split into {p} equal parts"));
            }
            Ok(vec![vec![w / p]; nres])
        }
        KernelOp::ReduceSum => {
            no_params()?;
            Ok(vec![vec![1]])
        }
        KernelOp::SoftmaxXent => {
            no_params()?;
            one_d(&shapes[0])?;
            if shapes[1] != [1] {
                return Err("labels must have shape [1]".into());
            }
            Ok(vec![vec![1]])
        }
        other => Err(format!("{} is not a forward operator", other.name())),
    }
}

/// Incremental construction of a [`VertexFunction`].
#[derive(Debug, Clone)]
pub struct FunctionBuilder {
    arity: usize,
    symbols: Vec<Symbol>,
    exprs: Vec<Expression>,
}

impl FunctionBuilder {
    pub fn new(arity: usize) -> Self {
        Self {
            arity,
            symbols: Vec::new(),
            exprs: Vec::new(),
        }
    }

    fn fresh(&mut self, kind: SymbolKind, name: Option<&str>, shape: Option<Vec<usize>>) -> SymbolId {
        let id = SymbolId(self.symbols.len());
        let name = name.map_or_else(|| format!("s{}", id.0), str::to_string);
        self.symbols.push(Symbol { id, kind, name, shape });
        id
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> SymbolId {
        self.fresh(SymbolKind::Parameter, Some(name), Some(shape.to_vec()))
    }

    /// Renames a symbol; names only matter for diagnostics and reports.
    pub fn name(&mut self, id: SymbolId, name: &str) -> SymbolId {
        self.symbols[id.0].name = name.to_string();
        id
    }

    pub fn gather(&mut self, child: usize) -> SymbolId {
        let result = self.fresh(SymbolKind::Input, None, None);
        self.exprs.push(Expression::Gather { child, result });
        result
    }

    pub fn pull(&mut self) -> SymbolId {
        let result = self.fresh(SymbolKind::Input, None, None);
        self.exprs.push(Expression::Pull { result });
        result
    }

    pub fn scatter(&mut self, arg: SymbolId) {
        self.exprs.push(Expression::Scatter { arg });
    }

    pub fn push(&mut self, arg: SymbolId) {
        self.exprs.push(Expression::Push { arg });
    }

    pub fn math(&mut self, op: KernelOp, args: &[SymbolId]) -> SymbolId {
        let result = self.fresh(SymbolKind::Intermediate, None, None);
        self.exprs.push(Expression::Math {
            op,
            args: args.to_vec(),
            results: vec![result],
        });
        result
    }

    pub fn split(&mut self, arg: SymbolId, parts: usize) -> Vec<SymbolId> {
        let results: Vec<SymbolId> = (0..parts).map(|_| self.fresh(SymbolKind::Intermediate, None, None)).collect();
        self.exprs.push(Expression::Math {
            op: KernelOp::Split(parts),
            args: vec![arg],
            results: results.clone(),
        });
        results
    }

    pub fn matmul(&mut self, x: SymbolId, w: SymbolId) -> SymbolId {
        self.math(KernelOp::MatMul, &[x, w])
    }

    pub fn add(&mut self, a: SymbolId, b: SymbolId) -> SymbolId {
        self.math(KernelOp::Add, &[a, b])
    }

    pub fn sub(&mut self, a: SymbolId, b: SymbolId) -> SymbolId {
        self.math(KernelOp::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: SymbolId, b: SymbolId) -> SymbolId {
        self.math(KernelOp::Mul, &[a, b])
    }

    pub fn div(&mut self, a: SymbolId, b: SymbolId) -> SymbolId {
        self.math(KernelOp::Div, &[a, b])
    }

    pub fn sigmoid(&mut self, a: SymbolId) -> SymbolId {
        self.math(KernelOp::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: SymbolId) -> SymbolId {
        self.math(KernelOp::Tanh, &[a])
    }

    pub fn relu(&mut self, a: SymbolId) -> SymbolId {
        self.math(KernelOp::Relu, &[a])
    }

    pub fn concat(&mut self, parts: &[SymbolId]) -> SymbolId {
        self.math(KernelOp::Concat, parts)
    }

    pub fn build(self) -> Result<VertexFunction, BuildError> {
        VertexFunction::build(self.symbols, self.exprs, self.arity)
    }
}
