//! Elementwise, structural and reduction kernels over batched views.

use std::sync::Arc;

use crate::error::TensorError;

use super::{matmul, TensorView, TensorViewMut};

/// How a kernel combines its result with what the output already holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WriteMode {
    Overwrite,
    Accumulate,
}

/// Kernel dispatch identifier.
///
/// The forward vocabulary is `MatMul` through `SoftmaxXent`; the remaining
/// codes are the gradient kernels emitted by autodiff.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelOp {
    /// `[b, m] · [m, n] -> [b, n]`, right operand unbatched.
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Relu,
    /// Along the last dim.
    Concat,
    /// Equal parts along the last dim.
    Split(usize),
    /// Sum along the last dim, `[b, n] -> [b, 1]`.
    ReduceSum,
    /// Inputs `(logits [b, c], labels [b, 1])`, output per-row loss `[b, 1]`.
    SoftmaxXent,
    Fused(Arc<FusedKernel>),

    /// `∇y · Wᵀ`: `[b, n], [m, n] -> [b, m]`.
    MatMulTransB,
    /// `xᵀ · ∇y`: `[b, m], [b, n] -> [m, n]`, summed over the batch.
    MatMulTransA,
    Neg,
    Identity,
    /// `(∇y, y) -> ∇y · y · (1 - y)`.
    SigmoidGrad,
    /// `(∇y, y) -> ∇y · (1 - y²)`.
    TanhGrad,
    /// `(∇y, x) -> ∇y · [x > 0]`.
    ReluGrad,
    /// `(∇y, y, b) -> -∇y · y / b`, the divisor's share of a quotient.
    DivGradRhs,
    /// Columns `[start, start + w)` of the input.
    SliceCols { start: usize },
    /// Input written into columns `[start, start + w)` of the output.
    EmbedCols { start: usize },
    /// `[b, 1] -> [b, n]`.
    BroadcastCols,
    /// `softmax(logits) - onehot(labels)`.
    SoftmaxXentGrad,
}

impl KernelOp {
    /// Arity for per-element codes, `None` for everything else.
    pub fn elementwise_arity(&self) -> Option<usize> {
        use KernelOp::*;
        match self {
            Sigmoid | Tanh | Relu | Neg | Identity => Some(1),
            Add | Sub | Mul | Div | SigmoidGrad | TanhGrad | ReluGrad => Some(2),
            DivGradRhs => Some(3),
            _ => None,
        }
    }

    pub fn is_elementwise(&self) -> bool {
        self.elementwise_arity().is_some()
    }

    pub fn name(&self) -> &'static str {
        use KernelOp::*;
        match self {
            MatMul => "matmul",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Sigmoid => "sigmoid",
            Tanh => "tanh",
            Relu => "relu",
            Concat => "concat",
            Split(_) => "split",
            ReduceSum => "reduce_sum",
            SoftmaxXent => "softmax_xent",
            Fused(_) => "fused",
            MatMulTransB => "matmul_tb",
            MatMulTransA => "matmul_ta",
            Neg => "neg",
            Identity => "identity",
            SigmoidGrad => "sigmoid_grad",
            TanhGrad => "tanh_grad",
            ReluGrad => "relu_grad",
            DivGradRhs => "div_grad_rhs",
            SliceCols { .. } => "slice_cols",
            EmbedCols { .. } => "embed_cols",
            BroadcastCols => "broadcast_cols",
            SoftmaxXentGrad => "softmax_xent_grad",
        }
    }
}

#[inline(always)]
fn eval_elem(op: &KernelOp, a: f64, b: f64, c: f64) -> f64 {
    use KernelOp::*;
    match op {
        Add => a + b,
        Sub => a - b,
        Mul => a * b,
        Div => a / b,
        Sigmoid => 1.0 / (1.0 + (-a).exp()),
        Tanh => a.tanh(),
        Relu => {
            if a > 0.0 {
                a
            } else {
                0.0
            }
        }
        Neg => -a,
        Identity => a,
        SigmoidGrad => a * b * (1.0 - b),
        TanhGrad => a * (1.0 - b * b),
        ReluGrad => {
            if b > 0.0 {
                a
            } else {
                0.0
            }
        }
        DivGradRhs => -a * b / c,
        _ => unreachable!("not an elementwise kernel"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusedArg {
    Input(usize),
    Output(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedStep {
    pub op: KernelOp,
    pub args: Vec<FusedArg>,
    pub out: usize,
    pub mode: WriteMode,
}

/// A chain of elementwise steps evaluated in one pass over the elements.
///
/// For each element the steps run in order, so a step reading an output sees
/// the value earlier steps produced for that same element.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    steps: Vec<FusedStep>,
    n_inputs: usize,
    n_outputs: usize,
}

impl FusedKernel {
    pub fn new(steps: Vec<FusedStep>, n_inputs: usize, n_outputs: usize) -> Result<Self, TensorError> {
        let bad = |msg: String| TensorError::Shape {
            op: "fused".into(),
            msg,
        };
        for (i, s) in steps.iter().enumerate() {
            let arity = s
                .op
                .elementwise_arity()
                .ok_or_else(|| bad(format!("step {i} ({}) is not elementwise", s.op.name())))?;
            if s.args.len() != arity {
                return Err(bad(format!("step {i} takes {arity} args, got {}", s.args.len())));
            }
            if s.out >= n_outputs {
                return Err(bad(format!("step {i} writes output {}", s.out)));
            }
            for a in &s.args {
                let ok = match *a {
                    FusedArg::Input(k) => k < n_inputs,
                    FusedArg::Output(k) => k < n_outputs,
                };
                if !ok {
                    return Err(bad(format!("step {i} argument {a:?} out of range")));
                }
            }
        }
        Ok(Self {
            steps,
            n_inputs,
            n_outputs,
        })
    }

    pub fn steps(&self) -> &[FusedStep] {
        &self.steps
    }

    pub fn ops(&self) -> Vec<KernelOp> {
        self.steps.iter().map(|s| s.op.clone()).collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }
}

fn shape_err(op: &KernelOp, msg: impl Into<String>) -> TensorError {
    named_err(op.name(), msg)
}

fn named_err(name: &str, msg: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op: name.into(),
        msg: msg.into(),
    }
}

fn arity(op: &KernelOp, ins: &[TensorView], outs: &[TensorViewMut], ni: usize, no: usize) -> Result<(), TensorError> {
    if ins.len() != ni || outs.len() != no {
        return Err(shape_err(
            op,
            format!("expects {ni} inputs / {no} outputs, got {} / {}", ins.len(), outs.len()),
        ));
    }
    Ok(())
}

fn batched_rows(op: &KernelOp, v: &TensorView, what: &str) -> Result<usize, TensorError> {
    v.rows.ok_or_else(|| shape_err(op, format!("{what} must be batched")))
}

#[inline(always)]
fn put(dst: &mut f64, v: f64, mode: WriteMode) {
    match mode {
        WriteMode::Overwrite => *dst = v,
        WriteMode::Accumulate => *dst += v,
    }
}

/// Applies `op` to batched views. Batched operands are processed row by row
/// independently; unbatched operands broadcast across rows, and an unbatched
/// output of a per-element kernel receives the sum over rows.
pub fn apply_kernel(
    op: &KernelOp,
    inputs: &[TensorView],
    outputs: &mut [TensorViewMut],
    mode: WriteMode,
) -> Result<(), TensorError> {
    use KernelOp::*;
    match op {
        _ if op.is_elementwise() => {
            arity(op, inputs, outputs, op.elementwise_arity().unwrap(), 1)?;
            elementwise(op, inputs, &mut outputs[0], mode)
        }
        Fused(kernel) => fused(kernel, inputs, outputs),
        MatMul => {
            arity(op, inputs, outputs, 2, 1)?;
            let rows = batched_rows(op, &inputs[0], "lhs")?;
            let (m, n) = param_2d(op, &inputs[1])?;
            if inputs[0].cols() != m {
                return Err(shape_err(op, format!("lhs has {} cols, weight expects {m}", inputs[0].cols())));
            }
            check_out(op, &outputs[0], Some(rows), n)?;
            matmul::matmul(inputs[0].data, inputs[1].data, outputs[0].data, rows, m, n, mode);
            Ok(())
        }
        MatMulTransB => {
            arity(op, inputs, outputs, 2, 1)?;
            let rows = batched_rows(op, &inputs[0], "gradient")?;
            let (m, n) = param_2d(op, &inputs[1])?;
            if inputs[0].cols() != n {
                return Err(shape_err(op, format!("gradient has {} cols, weight has {n}", inputs[0].cols())));
            }
            check_out(op, &outputs[0], Some(rows), m)?;
            matmul::matmul_trans_b(inputs[0].data, inputs[1].data, outputs[0].data, rows, m, n, mode);
            Ok(())
        }
        MatMulTransA => {
            arity(op, inputs, outputs, 2, 1)?;
            let rows = batched_rows(op, &inputs[0], "lhs")?;
            let rows_g = batched_rows(op, &inputs[1], "gradient")?;
            if rows != rows_g {
                return Err(shape_err(op, format!("row mismatch {rows} vs {rows_g}")));
            }
            let (m, n) = (inputs[0].cols(), inputs[1].cols());
            let out = &mut outputs[0];
            if out.rows.is_some() || out.shape != [m, n] {
                return Err(shape_err(op, format!("output must be unbatched [{m}, {n}], got {:?}", out.dims())));
            }
            matmul::matmul_trans_a(inputs[0].data, inputs[1].data, out.data, rows, m, n, mode);
            Ok(())
        }
        Concat => {
            if inputs.is_empty() || outputs.len() != 1 {
                return Err(shape_err(op, "needs >= 1 input and one output"));
            }
            let rows = batched_rows(op, &inputs[0], "input")?;
            let mut total = 0;
            for v in inputs {
                if v.rows != Some(rows) {
                    return Err(shape_err(op, "inputs must share the batch size"));
                }
                total += v.cols();
            }
            check_out(op, &outputs[0], Some(rows), total)?;
            let out = &mut outputs[0].data;
            for r in 0..rows {
                let mut at = r * total;
                for v in inputs {
                    let c = v.cols();
                    for (d, s) in out[at..at + c].iter_mut().zip(&v.data[r * c..(r + 1) * c]) {
                        put(d, *s, mode);
                    }
                    at += c;
                }
            }
            Ok(())
        }
        Split(parts) => {
            let parts = *parts;
            arity(op, inputs, outputs, 1, parts)?;
            let rows = batched_rows(op, &inputs[0], "input")?;
            let cols = inputs[0].cols();
            if parts == 0 || !cols.is_multiple_of(parts) {
                return Err(shape_err(op, format!("{cols} cols do not split into {parts}")));
            }
            let w = cols / parts;
            for (k, out) in outputs.iter_mut().enumerate() {
                check_out(op, out, Some(rows), w)?;
                for r in 0..rows {
                    let src = &inputs[0].data[r * cols + k * w..r * cols + (k + 1) * w];
                    for (d, s) in out.data[r * w..(r + 1) * w].iter_mut().zip(src) {
                        put(d, *s, mode);
                    }
                }
            }
            Ok(())
        }
        SliceCols { start } => {
            arity(op, inputs, outputs, 1, 1)?;
            let rows = batched_rows(op, &inputs[0], "input")?;
            let wide = inputs[0].cols();
            let w = outputs[0].cols();
            if start + w > wide {
                return Err(shape_err(op, format!("columns [{start}, {}) exceed {wide}", start + w)));
            }
            check_out(op, &outputs[0], Some(rows), w)?;
            for r in 0..rows {
                let src = &inputs[0].data[r * wide + start..r * wide + start + w];
                for (d, s) in outputs[0].data[r * w..(r + 1) * w].iter_mut().zip(src) {
                    put(d, *s, mode);
                }
            }
            Ok(())
        }
        EmbedCols { start } => {
            arity(op, inputs, outputs, 1, 1)?;
            let rows = batched_rows(op, &inputs[0], "input")?;
            let w = inputs[0].cols();
            let wide = outputs[0].cols();
            if start + w > wide {
                return Err(shape_err(op, format!("columns [{start}, {}) exceed {wide}", start + w)));
            }
            check_out(op, &outputs[0], Some(rows), wide)?;
            for r in 0..rows {
                let src = &inputs[0].data[r * w..(r + 1) * w];
                for (d, s) in outputs[0].data[r * wide + start..r * wide + start + w].iter_mut().zip(src) {
                    put(d, *s, mode);
                }
            }
            Ok(())
        }
        ReduceSum => {
            arity(op, inputs, outputs, 1, 1)?;
            let rows = batched_rows(op, &inputs[0], "input")?;
            let c = inputs[0].cols();
            check_out(op, &outputs[0], Some(rows), 1)?;
            for r in 0..rows {
                let mut acc = 0.0;
                for v in &inputs[0].data[r * c..(r + 1) * c] {
                    acc += v;
                }
                put(&mut outputs[0].data[r], acc, mode);
            }
            Ok(())
        }
        BroadcastCols => {
            arity(op, inputs, outputs, 1, 1)?;
            let rows = batched_rows(op, &inputs[0], "input")?;
            if inputs[0].cols() != 1 {
                return Err(shape_err(op, "input must have one column"));
            }
            let c = outputs[0].cols();
            check_out(op, &outputs[0], Some(rows), c)?;
            for r in 0..rows {
                let v = inputs[0].data[r];
                for d in &mut outputs[0].data[r * c..(r + 1) * c] {
                    put(d, v, mode);
                }
            }
            Ok(())
        }
        SoftmaxXent | SoftmaxXentGrad => {
            arity(op, inputs, outputs, 2, 1)?;
            let rows = batched_rows(op, &inputs[0], "logits")?;
            let c = inputs[0].cols();
            if inputs[1].rows != Some(rows) || inputs[1].cols() != 1 {
                return Err(shape_err(op, "labels must be [b, 1]"));
            }
            let out_cols = if matches!(op, SoftmaxXent) { 1 } else { c };
            check_out(op, &outputs[0], Some(rows), out_cols)?;
            for r in 0..rows {
                let logits = &inputs[0].data[r * c..(r + 1) * c];
                let label = inputs[1].data[r];
                if label < 0.0 || label.fract() != 0.0 || label as usize >= c {
                    return Err(shape_err(op, format!("label {label} outside [0, {c})")));
                }
                let label = label as usize;
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &l in logits {
                    z += (l - max).exp();
                }
                if matches!(op, SoftmaxXent) {
                    put(&mut outputs[0].data[r], max + z.ln() - logits[label], mode);
                } else {
                    let out = &mut outputs[0].data[r * c..(r + 1) * c];
                    for (j, (&l, d)) in logits.iter().zip(out.iter_mut()).enumerate() {
                        let p = (l - max).exp() / z;
                        put(d, if j == label { p - 1.0 } else { p }, mode);
                    }
                }
            }
            Ok(())
        }
        _ => unreachable!("elementwise handled above"),
    }
}

fn param_2d(op: &KernelOp, v: &TensorView) -> Result<(usize, usize), TensorError> {
    if v.rows.is_some() || v.shape.len() != 2 {
        return Err(shape_err(op, format!("weight must be an unbatched 2-d parameter, got {:?}", v.dims())));
    }
    Ok((v.shape[0], v.shape[1]))
}

fn check_out(op: &KernelOp, out: &TensorViewMut, rows: Option<usize>, cols: usize) -> Result<(), TensorError> {
    if out.rows != rows || out.cols() != cols {
        return Err(shape_err(
            op,
            format!("output {:?} does not match rows {rows:?} x {cols} cols", out.dims()),
        ));
    }
    Ok(())
}

struct Operand<'a> {
    data: &'a [f64],
    stride: usize,
}

fn broadcast_layout<'a>(name: &str, inputs: &'a [TensorView]) -> Result<(Option<usize>, usize, Vec<Operand<'a>>), TensorError> {
    let cols = inputs[0].cols();
    let mut rows = None;
    for v in inputs {
        if v.cols() != cols {
            return Err(named_err(name, format!("operands disagree on element count: {:?} vs {:?}", inputs[0].dims(), v.dims())));
        }
        if let Some(r) = v.rows {
            match rows {
                None => rows = Some(r),
                Some(prev) if prev != r => {
                    return Err(named_err(name, format!("batch mismatch {prev} vs {r}")));
                }
                _ => {}
            }
        }
    }
    let ops = inputs
        .iter()
        .map(|v| Operand {
            data: v.data,
            stride: if v.rows.is_some() { cols } else { 0 },
        })
        .collect();
    Ok((rows, cols, ops))
}

/// Elements per column block of the blocked elementwise loops.
const BLOCK: usize = 256;

#[inline(always)]
fn run_block(f: impl Fn(f64, f64, f64) -> f64, a: &[f64], b: &[f64], c: &[f64], out: &mut [f64], mode: WriteMode) {
    let n = out.len();
    let (a, b, c) = (&a[..n], &b[..n], &c[..n]);
    match mode {
        WriteMode::Overwrite => {
            for i in 0..n {
                out[i] = f(a[i], b[i], c[i]);
            }
        }
        WriteMode::Accumulate => {
            for i in 0..n {
                out[i] += f(a[i], b[i], c[i]);
            }
        }
    }
}

/// `out[i] (=|+=) op(a[i], b[i], c[i])`; unused operands may repeat `a`.
fn map_block(op: &KernelOp, a: &[f64], b: &[f64], c: &[f64], out: &mut [f64], mode: WriteMode) {
    use KernelOp::*;
    macro_rules! go {
        ($op:ident) => {
            run_block(|x, y, z| eval_elem(&$op, x, y, z), a, b, c, out, mode)
        };
    }
    match op {
        Add => go!(Add),
        Sub => go!(Sub),
        Mul => go!(Mul),
        Div => go!(Div),
        Sigmoid => go!(Sigmoid),
        Tanh => go!(Tanh),
        Relu => go!(Relu),
        Neg => go!(Neg),
        Identity => go!(Identity),
        SigmoidGrad => go!(SigmoidGrad),
        TanhGrad => go!(TanhGrad),
        ReluGrad => go!(ReluGrad),
        DivGradRhs => go!(DivGradRhs),
        _ => unreachable!("not an elementwise kernel"),
    }
}

fn elementwise(op: &KernelOp, inputs: &[TensorView], out: &mut TensorViewMut, mode: WriteMode) -> Result<(), TensorError> {
    let (rows, cols, ops) = broadcast_layout(op.name(), inputs)?;
    let rows = rows.ok_or_else(|| shape_err(op, "needs at least one batched operand"))?;
    if out.cols() != cols {
        return Err(shape_err(op, format!("output {:?} does not match {cols} elements per row", out.dims())));
    }
    match out.rows {
        Some(r) if r == rows => {
            let arg = |k: usize, from: usize, len: usize| -> &[f64] {
                let o = &ops[k.min(ops.len() - 1)];
                &o.data[from..from + len]
            };
            if ops.iter().all(|o| o.stride == cols) {
                let n = rows * cols;
                map_block(op, arg(0, 0, n), arg(1, 0, n), arg(2, 0, n), &mut out.data[..n], mode);
            } else {
                for r in 0..rows {
                    let at = |k: usize| {
                        let o = &ops[k.min(ops.len() - 1)];
                        &o.data[r * o.stride..r * o.stride + cols]
                    };
                    map_block(op, at(0), at(1), at(2), &mut out.data[r * cols..(r + 1) * cols], mode);
                }
            }
        }
        None => {
            let at = |k: usize, r: usize, c: usize| -> f64 {
                match ops.get(k) {
                    Some(o) => o.data[r * o.stride + c],
                    None => 0.0,
                }
            };
            for c in 0..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += eval_elem(op, at(0, r, c), at(1, r, c), at(2, r, c));
                }
                put(&mut out.data[c], acc, mode);
            }
        }
        Some(r) => return Err(shape_err(op, format!("output has {r} rows, operands have {rows}"))),
    }
    Ok(())
}

/// Runs the steps over blocks of elements. Elements are independent, so
/// finishing every step on a block before the next block gives each element
/// the same sequence of operations as a per-element loop.
fn fused(kernel: &FusedKernel, inputs: &[TensorView], outputs: &mut [TensorViewMut]) -> Result<(), TensorError> {
    let op = "fused";
    if inputs.len() != kernel.n_inputs || outputs.len() != kernel.n_outputs {
        return Err(named_err(op, "operand count does not match kernel"));
    }
    if inputs.is_empty() {
        return Err(named_err(op, "fused kernel without inputs"));
    }
    let (rows, cols, ops) = broadcast_layout(op, inputs)?;
    let rows = rows.ok_or_else(|| named_err(op, "needs at least one batched operand"))?;
    for o in outputs.iter() {
        if o.rows != Some(rows) || o.cols() != cols {
            return Err(named_err(op, format!("output {:?} does not match [{rows}, {cols}]", o.dims())));
        }
    }
    let mut scratch = [[0.0f64; BLOCK]; 3];
    for r in 0..rows {
        let mut c0 = 0;
        while c0 < cols {
            let len = (cols - c0).min(BLOCK);
            let e0 = r * cols + c0;
            for step in &kernel.steps {
                for (slot, arg) in scratch.iter_mut().zip(&step.args) {
                    let src = match *arg {
                        FusedArg::Input(k) => {
                            let from = r * ops[k].stride + c0;
                            &ops[k].data[from..from + len]
                        }
                        FusedArg::Output(k) => &outputs[k].data[e0..e0 + len],
                    };
                    slot[..len].copy_from_slice(src);
                }
                let [a, b, c] = &scratch;
                map_block(&step.op, a, b, c, &mut outputs[step.out].data[e0..e0 + len], step.mode);
            }
            c0 += len;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(op: KernelOp, ins: &[TensorView], out_rows: Option<usize>, out_shape: &[usize]) -> Vec<f64> {
        let n = out_rows.unwrap_or(1) * out_shape.iter().product::<usize>();
        let mut data = vec![0.0; n];
        let mut outs = [TensorViewMut {
            rows: out_rows,
            shape: out_shape,
            data: &mut data,
        }];
        apply_kernel(&op, ins, &mut outs, WriteMode::Overwrite).unwrap();
        data
    }

    #[test]
    fn matmul_identity() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let out = run(
            KernelOp::MatMul,
            &[TensorView::batched(2, &[2], &x), TensorView::unbatched(&[2, 2], &eye)],
            Some(2),
            &[2],
        );
        assert_eq!(out, x);
    }

    #[test]
    fn sigmoid_of_zero() {
        let z = [0.0; 3];
        let out = run(KernelOp::Sigmoid, &[TensorView::batched(1, &[3], &z)], Some(1), &[3]);
        assert_eq!(out, vec![0.5; 3]);
    }

    #[test]
    fn concat_and_split() {
        let a = [1.0, 2.0];
        let b = [3.0];
        let out = run(
            KernelOp::Concat,
            &[TensorView::batched(1, &[2], &a), TensorView::batched(1, &[1], &b)],
            Some(1),
            &[3],
        );
        assert_eq!(out, vec![1.0, 2.0, 3.0]);

        let s = [1.0, 2.0, 3.0, 4.0];
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        let mut outs = [
            TensorViewMut::batched(1, &[2], &mut lo),
            TensorViewMut::batched(1, &[2], &mut hi),
        ];
        apply_kernel(&KernelOp::Split(2), &[TensorView::batched(1, &[4], &s)], &mut outs, WriteMode::Overwrite).unwrap();
        assert_eq!(lo, [1.0, 2.0]);
        assert_eq!(hi, [3.0, 4.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = [1.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        let mut o = [0.0; 2];
        let mut outs = [TensorViewMut::batched(1, &[2], &mut o)];
        let err = apply_kernel(
            &KernelOp::Add,
            &[TensorView::batched(1, &[2], &a), TensorView::batched(1, &[3], &b)],
            &mut outs,
            WriteMode::Overwrite,
        );
        assert!(matches!(err, Err(TensorError::Shape { .. })));
    }

    #[test]
    fn division_by_zero_propagates() {
        let a = [1.0];
        let z = [0.0];
        let out = run(
            KernelOp::Div,
            &[TensorView::batched(1, &[1], &a), TensorView::batched(1, &[1], &z)],
            Some(1),
            &[1],
        );
        assert!(out[0].is_infinite());
    }

    #[test]
    fn bias_broadcast_and_row_reduction() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0];
        let out = run(
            KernelOp::Add,
            &[TensorView::batched(2, &[2], &x), TensorView::unbatched(&[2], &b)],
            Some(2),
            &[2],
        );
        assert_eq!(out, vec![11.0, 22.0, 13.0, 24.0]);
        let sum = run(KernelOp::Identity, &[TensorView::batched(2, &[2], &x)], None, &[2]);
        assert_eq!(sum, vec![4.0, 6.0]);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let logits = [0.0; 4];
        let label = [2.0];
        let ins = [TensorView::batched(1, &[4], &logits), TensorView::batched(1, &[1], &label)];
        let loss = run(KernelOp::SoftmaxXent, &ins, Some(1), &[1]);
        assert!((loss[0] - 4f64.ln()).abs() < 1e-15);
        let grad = run(KernelOp::SoftmaxXentGrad, &ins, Some(1), &[4]);
        assert_eq!(grad, vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn fused_matches_unfused() {
        // y = sigmoid(a) * b + a
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.8).collect();
        let b: Vec<f64> = (0..6).map(|i| 1.0 - i as f64 * 0.1).collect();
        let s = run(KernelOp::Sigmoid, &[TensorView::batched(2, &[3], &a)], Some(2), &[3]);
        let m = run(
            KernelOp::Mul,
            &[TensorView::batched(2, &[3], &s), TensorView::batched(2, &[3], &b)],
            Some(2),
            &[3],
        );
        let y = run(
            KernelOp::Add,
            &[TensorView::batched(2, &[3], &m), TensorView::batched(2, &[3], &a)],
            Some(2),
            &[3],
        );
        let kernel = FusedKernel::new(
            vec![
                FusedStep { op: KernelOp::Sigmoid, args: vec![FusedArg::Input(0)], out: 0, mode: WriteMode::Overwrite },
                FusedStep { op: KernelOp::Mul, args: vec![FusedArg::Output(0), FusedArg::Input(1)], out: 1, mode: WriteMode::Overwrite },
                FusedStep { op: KernelOp::Add, args: vec![FusedArg::Output(1), FusedArg::Input(0)], out: 2, mode: WriteMode::Overwrite },
            ],
            2,
            3,
        )
        .unwrap();
        let (mut o0, mut o1, mut o2) = (vec![0.0; 6], vec![0.0; 6], vec![0.0; 6]);
        let mut outs = [
            TensorViewMut::batched(2, &[3], &mut o0),
            TensorViewMut::batched(2, &[3], &mut o1),
            TensorViewMut::batched(2, &[3], &mut o2),
        ];
        apply_kernel(
            &KernelOp::Fused(Arc::new(kernel)),
            &[TensorView::batched(2, &[3], &a), TensorView::batched(2, &[3], &b)],
            &mut outs,
            WriteMode::Overwrite,
        )
        .unwrap();
        assert_eq!(o0, s);
        assert_eq!(o1, m);
        assert_eq!(o2, y);
    }

    #[test]
    fn fused_rejects_matmul() {
        let step = FusedStep { op: KernelOp::MatMul, args: vec![], out: 0, mode: WriteMode::Overwrite };
        assert!(FusedKernel::new(vec![step], 1, 1).is_err());
    }
}
