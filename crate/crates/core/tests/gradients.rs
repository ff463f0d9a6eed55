mod common;

use common::{finite_difference_check, Rig};
use vbatch_core::engine::EngineOptions;
use vbatch_core::graph::{gen_chain, gen_random_tree, generate_corpus, CorpusSpec, InputGraph};
use vbatch_core::ir::FunctionBuilder;
use vbatch_core::models::{chain_lstm_fn, tree_fc_fn, tree_fc_fn_nary, tree_lstm_fn};

fn with_inputs(g: InputGraph, d: usize, salt: f64) -> InputGraph {
    let x = (0..g.n_vertices())
        .map(|v| (0..d).map(|j| (salt + 0.7 * v as f64 + 0.3 * j as f64).sin()).collect())
        .collect();
    g.with_ext_inputs(x).unwrap()
}

fn check(rig: &mut Rig, graphs: &[InputGraph]) {
    let n = finite_difference_check(rig, graphs, 1e-5, 1e-4).unwrap_or_else(|e| panic!("{e}"));
    assert!(n > 0);
}

#[test]
fn tree_lstm_gradients_match_finite_differences() {
    let g = with_inputs(InputGraph::from_children(vec![vec![], vec![], vec![0, 1], vec![], vec![2, 3]]).unwrap(), 2, 0.2);
    let mut rig = Rig::new(tree_lstm_fn(2, 3, 2).unwrap(), EngineOptions::default(), 7);
    check(&mut rig, &[g]);
}

#[test]
fn ternary_tree_lstm_gradients_match_finite_differences() {
    let g = with_inputs(gen_random_tree(7, 3, 4).unwrap(), 2, 0.4);
    let mut rig = Rig::new(tree_lstm_fn(3, 2, 2).unwrap(), EngineOptions::with_flags(true, false, true), 3);
    check(&mut rig, &[g]);
}

#[test]
fn tree_fc_gradients_match_finite_differences() {
    let graphs = generate_corpus(&CorpusSpec::Random { min_n: 2, max_n: 6, arity: 2, count: 3, seed: 8 }, 2, 8).unwrap();
    let mut rig = Rig::new(tree_fc_fn(3, 2).unwrap(), EngineOptions::with_flags(false, true, false), 5);
    check(&mut rig, &graphs);
}

#[test]
fn unary_tree_fc_gradients_match_finite_differences() {
    let g = with_inputs(gen_chain(4).unwrap(), 1, 0.9);
    let mut rig = Rig::new(tree_fc_fn_nary(1, 2, 1).unwrap(), EngineOptions::all_off(), 2);
    check(&mut rig, &[g]);
}

#[test]
fn chain_lstm_gradients_match_finite_differences() {
    let g = with_inputs(gen_chain(4).unwrap(), 2, 1.3);
    let mut rig = Rig::new(chain_lstm_fn(2, 2).unwrap(), EngineOptions::default(), 4);
    check(&mut rig, &[g]);
}

/// Exercises the remaining differentiable kernels in one cell.
#[test]
fn mixed_kernel_cell_gradients_match_finite_differences() {
    let (h, d) = (3, 2);
    let mut b = FunctionBuilder::new(2);
    let w = b.param("W", &[d, h]);
    let u = b.param("U", &[h, h]);
    let k = b.param("k", &[h]);
    let l = b.gather(0);
    let r = b.gather(1);
    let x = b.pull();
    let wx = b.matmul(x, w);
    let diff = b.sub(l, r);
    let ud = b.matmul(diff, u);
    let relu = b.relu(ud);
    let den = b.sigmoid(wx);
    let den = b.add(den, k);
    let q = b.div(relu, den);
    let m = b.mul(q, l);
    let s = b.sub(m, wx);
    let s = b.tanh(s);
    let cat = b.concat(&[s, m]);
    let parts = b.split(cat, 2);
    let out = b.add(parts[0], parts[1]);
    let out = b.tanh(out);
    let sum = b.math(vbatch_core::tensor::KernelOp::ReduceSum, &[out]);
    let pushed = b.concat(&[out, sum, x]);
    b.scatter(out);
    b.push(pushed);
    let f = b.build().unwrap().infer_shapes(&[d], &[h]).unwrap();
    let graphs = generate_corpus(&CorpusSpec::Random { min_n: 3, max_n: 7, arity: 2, count: 2, seed: 1 }, d, 2).unwrap();
    for opts in [EngineOptions::all_off(), EngineOptions::default()] {
        let mut rig = Rig::new(f.clone(), opts, 12);
        for (i, v) in rig.params.values_mut().iter_mut().enumerate() {
            if i == 2 {
                v.fill(1.5);
            }
        }
        check(&mut rig, &graphs);
    }
}
