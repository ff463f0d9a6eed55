//! Input graphs, their corpus file format and synthetic generators.
//!
//! A corpus holds one JSON object per line:
//! `{"parents":[...],"x":[[...],...],"loss":[...]}`. `parents[i]` is vertex
//! `i`'s parent or `-1`, `x` holds optional per-vertex pull records and
//! `loss` lists the vertices whose pushed output feeds the loss (roots when
//! absent). Child lists are ordered by ascending vertex ID, which fixes the
//! gather index of each child.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GraphError;

#[derive(Debug, Clone, PartialEq)]
pub struct InputGraph {
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
    ext: Option<Vec<Vec<f64>>>,
    loss: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    parents: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<Vec<usize>>,
}

impl InputGraph {
    /// Builds a graph from ordered child lists. Loss defaults to the roots.
    pub fn from_children(children: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let n = children.len();
        if n == 0 {
            return Err(GraphError::Structure("graph has no vertices".into()));
        }
        let mut has_parent = vec![false; n];
        for (v, cs) in children.iter().enumerate() {
            for &c in cs {
                if c >= n {
                    return Err(GraphError::Structure(format!("vertex {v} lists child {c} outside 0..{n}")));
                }
                has_parent[c] = true;
            }
        }
        if let Some(v) = find_cycle(&children) {
            return Err(GraphError::Cycle { line: 0, vertex: v });
        }
        let roots: Vec<usize> = (0..n).filter(|&v| !has_parent[v]).collect();
        Ok(Self {
            children,
            loss: roots.clone(),
            roots,
            ext: None,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.children.len()
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn child_lists(&self) -> &[Vec<usize>] {
        &self.children
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn loss_vertices(&self) -> &[usize] {
        &self.loss
    }

    pub fn ext_inputs(&self) -> Option<&[Vec<f64>]> {
        self.ext.as_deref()
    }

    /// The pull record of `v`; `None` means zeros.
    pub fn ext_input(&self, v: usize) -> Option<&[f64]> {
        self.ext.as_ref().and_then(|x| x.get(v)).map(Vec::as_slice).filter(|r| !r.is_empty())
    }

    pub fn n_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn max_degree(&self) -> usize {
        self.children.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn with_loss(mut self, loss: Vec<usize>) -> Result<Self, GraphError> {
        if let Some(&v) = loss.iter().find(|&&v| v >= self.n_vertices()) {
            return Err(GraphError::Structure(format!("loss vertex {v} out of range")));
        }
        self.loss = loss;
        Ok(self)
    }

    pub fn with_ext_inputs(mut self, x: Vec<Vec<f64>>) -> Result<Self, GraphError> {
        if x.len() != self.n_vertices() {
            return Err(GraphError::Structure(format!(
                "{} pull records for {} vertices",
                x.len(),
                self.n_vertices()
            )));
        }
        self.ext = Some(x);
        Ok(self)
    }

    /// Rejects vertices with more children than `arity`.
    pub fn check_arity(&self, arity: usize) -> Result<(), GraphError> {
        match self.children.iter().position(|c| c.len() > arity) {
            Some(v) => Err(GraphError::Arity {
                vertex: v,
                degree: self.children[v].len(),
                arity,
            }),
            None => Ok(()),
        }
    }

    /// Topological level of each vertex: leaves are 0, every other vertex
    /// sits one above its highest child.
    pub fn levels(&self) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.n_vertices()];
        // iterative post-order so long chains do not overflow the stack
        for start in 0..self.n_vertices() {
            if level[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if let Some(&c) = self.children[v].get(*next) {
                    *next += 1;
                    if level[c] == usize::MAX {
                        stack.push((c, 0));
                    }
                } else {
                    level[v] = self.children[v].iter().map(|&c| level[c] + 1).max().unwrap_or(0);
                    stack.pop();
                }
            }
        }
        level
    }

    /// Parent pointers; fails for vertices shared by several parents.
    pub fn parents(&self) -> Result<Vec<i64>, GraphError> {
        let mut parents = vec![-1i64; self.n_vertices()];
        for (v, cs) in self.children.iter().enumerate() {
            for &c in cs {
                if parents[c] >= 0 {
                    return Err(GraphError::Structure(format!(
                        "vertex {c} has several parents; the corpus format stores trees only"
                    )));
                }
                parents[c] = v as i64;
            }
        }
        Ok(parents)
    }

    fn from_record(rec: Record, line: usize) -> Result<Self, GraphError> {
        let n = rec.parents.len();
        let parse = |msg: String| GraphError::Parse { line, msg };
        if n == 0 {
            return Err(parse("empty parents list".into()));
        }
        let mut children = vec![Vec::new(); n];
        for (v, &p) in rec.parents.iter().enumerate() {
            if p == -1 {
                continue;
            }
            if p < 0 || p as usize >= n {
                return Err(parse(format!("vertex {v} has parent {p} outside -1..{n}")));
            }
            if p as usize == v {
                return Err(GraphError::Cycle { line, vertex: v });
            }
            children[p as usize].push(v);
        }
        let mut g = Self::from_children(children).map_err(|e| match e {
            GraphError::Cycle { vertex, .. } => GraphError::Cycle { line, vertex },
            other => other,
        })?;
        if let Some(x) = rec.x {
            if x.len() != n {
                return Err(parse(format!("{} pull records for {n} vertices", x.len())));
            }
            g.ext = Some(x);
        }
        if let Some(loss) = rec.loss {
            if let Some(&v) = loss.iter().find(|&&v| v >= n) {
                return Err(parse(format!("loss vertex {v} out of range")));
            }
            g.loss = loss;
        }
        Ok(g)
    }

    /// One corpus line (without the trailing newline).
    pub fn to_line(&self) -> Result<String, GraphError> {
        let rec = Record {
            parents: self.parents()?,
            x: self.ext.clone(),
            loss: (self.loss != self.roots).then(|| self.loss.clone()),
        };
        serde_json::to_string(&rec).map_err(|e| GraphError::Structure(e.to_string()))
    }

    pub fn from_line(line: &str) -> Result<Self, GraphError> {
        parse_line(line, 1)
    }
}

fn parse_line(text: &str, line: usize) -> Result<InputGraph, GraphError> {
    let rec: Record = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        line,
        msg: e.to_string(),
    })?;
    InputGraph::from_record(rec, line)
}

/// Returns a vertex on a cycle, if any.
fn find_cycle(children: &[Vec<usize>]) -> Option<usize> {
    let n = children.len();
    let mut indeg = vec![0usize; n];
    for cs in children {
        for &c in cs {
            indeg[c] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                stack.push(c);
            }
        }
    }
    (seen < n).then(|| (0..n).find(|&v| indeg[v] > 0).unwrap())
}

/// Parses a corpus from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_graphs(reader: impl BufRead) -> Result<Vec<InputGraph>, GraphError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GraphError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn parse_graphs(path: impl AsRef<Path>) -> Result<Vec<InputGraph>, GraphError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_graphs(BufReader::new(file))
}

pub fn serialize_graphs(graphs: &[InputGraph]) -> Result<String, GraphError> {
    let mut s = String::new();
    for g in graphs {
        s.push_str(&g.to_line()?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_graphs(path: impl AsRef<Path>, graphs: &[InputGraph]) -> Result<(), GraphError> {
    let path = path.as_ref();
    let text = serialize_graphs(graphs)?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> GraphError {
    GraphError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Complete binary tree over `leaves` leaves: leaves are `0..L`, internal
/// vertices follow level by level and the root is the last ID.
pub fn gen_complete_binary_tree(leaves: usize) -> Result<InputGraph, GraphError> {
    if leaves == 0 || !leaves.is_power_of_two() {
        return Err(GraphError::Argument(format!("leaf count {leaves} is not a power of two")));
    }
    let mut children = vec![Vec::new(); leaves];
    let mut level: Vec<usize> = (0..leaves).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            next.push(children.len());
            children.push(pair.to_vec());
        }
        level = next;
    }
    InputGraph::from_children(children)
}

/// Chain of `steps` vertices, `i - 1 -> i`, with a loss at every vertex.
pub fn gen_chain(steps: usize) -> Result<InputGraph, GraphError> {
    if steps == 0 {
        return Err(GraphError::Argument("chain needs at least one step".into()));
    }
    let children = (0..steps).map(|i| if i == 0 { vec![] } else { vec![i - 1] }).collect();
    let g = InputGraph::from_children(children)?;
    g.with_loss((0..steps).collect())
}

/// Random tree rooted at vertex 0: vertex `i` attaches to a uniformly chosen
/// earlier vertex that still has fewer than `arity` children.
pub fn gen_random_tree(n: usize, arity: usize, seed: u64) -> Result<InputGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tree_with(n, arity, &mut rng)
}

pub(crate) fn random_tree_with(n: usize, arity: usize, rng: &mut impl Rng) -> Result<InputGraph, GraphError> {
    if n == 0 || arity == 0 {
        return Err(GraphError::Argument(format!("random tree needs n >= 1 and arity >= 1, got {n}, {arity}")));
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut open: Vec<usize> = vec![0];
    for v in 1..n {
        if open.is_empty() {
            return Err(GraphError::Structure("no vertex with spare arity".into()));
        }
        let pick = rng.gen_range(0..open.len());
        let p = open[pick];
        children[p].push(v);
        if children[p].len() == arity {
            open.swap_remove(pick);
        }
        open.push(v);
    }
    InputGraph::from_children(children)
}

/// Corpus generator kinds accepted by the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSpec {
    Cbt { leaves: usize, count: usize },
    Chain { steps: usize, count: usize },
    Random { min_n: usize, max_n: usize, arity: usize, count: usize, seed: u64 },
}

impl std::str::FromStr for CorpusSpec {
    type Err = GraphError;

    /// `cbt:L:count`, `chain:n:count` or `random:n:N:count:seed`, where the
    /// random size may be a range `lo-hi`.
    fn from_str(s: &str) -> Result<Self, GraphError> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || GraphError::Argument(format!("cannot parse corpus kind {s:?}"));
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["cbt", l, c] => Ok(CorpusSpec::Cbt { leaves: num(l)?, count: num(c)? }),
            ["chain", n, c] => Ok(CorpusSpec::Chain { steps: num(n)?, count: num(c)? }),
            ["random", n, a, c, seed] => {
                let (lo, hi) = match n.split_once('-') {
                    Some((lo, hi)) => (num(lo)?, num(hi)?),
                    None => (num(n)?, num(n)?),
                };
                if lo == 0 || lo > hi {
                    return Err(GraphError::Argument(format!("invalid size range {n:?}")));
                }
                Ok(CorpusSpec::Random {
                    min_n: lo,
                    max_n: hi,
                    arity: num(a)?,
                    count: num(c)?,
                    seed: seed.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Generates a corpus. With `input_dim > 0` every vertex gets a pull record
/// drawn uniformly from `[-1, 1)` using a stream derived from `seed`.
pub fn generate_corpus(spec: &CorpusSpec, input_dim: usize, seed: u64) -> Result<Vec<InputGraph>, GraphError> {
    let mut graphs = Vec::new();
    match *spec {
        CorpusSpec::Cbt { leaves, count } => {
            let g = gen_complete_binary_tree(leaves)?;
            graphs.resize(count, g);
        }
        CorpusSpec::Chain { steps, count } => {
            let g = gen_chain(steps)?;
            graphs.resize(count, g);
        }
        CorpusSpec::Random {
            min_n,
            max_n,
            arity,
            count,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let n = rng.gen_range(min_n..=max_n);
                graphs.push(random_tree_with(n, arity, &mut rng)?);
            }
        }
    }
    if input_dim > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        graphs = graphs
            .into_iter()
            .map(|g| {
                let x = (0..g.n_vertices())
                    .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                g.with_ext_inputs(x)
            })
            .collect::<Result<_, _>>()?;
    }
    Ok(graphs)
}

/// Mini-batch of graphs addressed by dense global vertex IDs, assigned graph
/// by graph in local vertex order.
#[derive(Debug, Clone)]
pub struct GraphBatch<'a> {
    graphs: Vec<&'a InputGraph>,
    starts: Vec<usize>,
    child_start: Vec<usize>,
    child_ids: Vec<usize>,
}

impl<'a> GraphBatch<'a> {
    pub fn new(graphs: Vec<&'a InputGraph>) -> Self {
        let mut starts = Vec::with_capacity(graphs.len() + 1);
        let mut child_start = vec![0];
        let mut child_ids = Vec::new();
        let mut base = 0;
        for g in &graphs {
            starts.push(base);
            for v in 0..g.n_vertices() {
                child_ids.extend(g.children(v).iter().map(|&c| base + c));
                child_start.push(child_ids.len());
            }
            base += g.n_vertices();
        }
        starts.push(base);
        Self {
            graphs,
            starts,
            child_start,
            child_ids,
        }
    }

    pub fn graphs(&self) -> &[&'a InputGraph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn total_vertices(&self) -> usize {
        *self.starts.last().unwrap()
    }

    pub fn global_id(&self, graph: usize, local: usize) -> usize {
        self.starts[graph] + local
    }

    /// `(graph index, local vertex)` of a global ID.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let g = self.starts.partition_point(|&s| s <= global) - 1;
        (g, global - self.starts[g])
    }

    pub fn graph_range(&self, graph: usize) -> std::ops::Range<usize> {
        self.starts[graph]..self.starts[graph + 1]
    }

    /// Children of a global vertex as global IDs.
    pub fn children(&self, global: usize) -> &[usize] {
        &self.child_ids[self.child_start[global]..self.child_start[global + 1]]
    }

    pub fn max_degree(&self) -> usize {
        self.graphs.iter().map(|g| g.max_degree()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_tree_line() {
        let g = InputGraph::from_line(r#"{"parents":[2,2,-1]}"#).unwrap();
        assert_eq!(g.children(2), &[0, 1]);
        assert_eq!(g.roots(), &[2]);
        assert_eq!(g.loss_vertices(), &[2]);
    }

    #[test]
    fn parse_chain_with_loss() {
        let g = InputGraph::from_line(r#"{"parents":[1,-1],"loss":[1]}"#).unwrap();
        assert_eq!(g.children(1), &[0]);
        assert_eq!(g.loss_vertices(), &[1]);
    }

    #[test]
    fn parse_rejects_cycle_and_range() {
        let err = read_graphs(r#"{"parents":[1,0]}"#.as_bytes()).unwrap_err();
        assert!(matches!(err, GraphError::Cycle { line: 1, .. }), "{err:?}");
        let err = read_graphs("\n{\"parents\":[-1]}\n{\"parents\":[5,-1]}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 3, .. }), "{err:?}");
        assert!(InputGraph::from_line(r#"{"parents":[0]}"#).is_err());
    }

    #[test]
    fn complete_binary_tree_shape() {
        assert_eq!(gen_complete_binary_tree(256).unwrap().n_vertices(), 511);
        let one = gen_complete_binary_tree(1).unwrap();
        assert_eq!(one.n_vertices(), 1);
        assert!(one.children(0).is_empty());
        let g = gen_complete_binary_tree(4).unwrap();
        assert_eq!(g.child_lists(), &[vec![], vec![], vec![], vec![], vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(g.roots(), &[6]);
        assert!(gen_complete_binary_tree(6).is_err());
    }

    #[test]
    fn chain_shape() {
        let g = gen_chain(3).unwrap();
        assert_eq!(g.child_lists(), &[vec![], vec![0], vec![1]]);
        assert_eq!(g.loss_vertices(), &[0, 1, 2]);
        assert_eq!(gen_chain(64).unwrap().n_vertices(), 64);
        assert_eq!(gen_chain(1).unwrap().levels(), vec![0]);
    }

    #[test]
    fn random_tree_is_deterministic() {
        let a = gen_random_tree(7, 2, 42).unwrap();
        assert_eq!(a, gen_random_tree(7, 2, 42).unwrap());
        a.check_arity(2).unwrap();
        assert_eq!(a.roots(), &[0]);
        assert_eq!(gen_random_tree(1, 3, 0).unwrap().n_vertices(), 1);
    }

    #[test]
    fn levels_of_cbt() {
        let g = gen_complete_binary_tree(4).unwrap();
        assert_eq!(g.levels(), vec![0, 0, 0, 0, 1, 1, 2]);
    }

    #[test]
    fn round_trip_keeps_inputs() {
        let g = gen_chain(2).unwrap().with_ext_inputs(vec![vec![0.1, -3.5e-7], vec![1.0, 2.0]]).unwrap();
        let line = g.to_line().unwrap();
        assert_eq!(line, r#"{"parents":[1,-1],"x":[[0.1,-3.5e-7],[1.0,2.0]],"loss":[0,1]}"#);
        assert_eq!(InputGraph::from_line(&line).unwrap(), g);
    }

    #[test]
    fn batch_ids_are_dense() {
        let a = gen_chain(3).unwrap();
        let b = gen_complete_binary_tree(2).unwrap();
        let batch = GraphBatch::new(vec![&a, &b]);
        assert_eq!(batch.total_vertices(), 6);
        assert_eq!(batch.children(5), &[3, 4]);
        assert_eq!(batch.children(2), &[1]);
        assert_eq!(batch.locate(4), (1, 1));
        assert_eq!(batch.global_id(1, 2), 5);
    }

    #[test]
    fn corpus_spec_parsing() {
        assert_eq!("cbt:4:2".parse::<CorpusSpec>().unwrap(), CorpusSpec::Cbt { leaves: 4, count: 2 });
        assert!(matches!(
            "random:1-54:2:10:7".parse::<CorpusSpec>().unwrap(),
            CorpusSpec::Random { min_n: 1, max_n: 54, .. }
        ));
        assert!("tree:3".parse::<CorpusSpec>().is_err());
        let c = generate_corpus(&"random:3-9:2:20:5".parse().unwrap(), 2, 5).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.iter().all(|g| (3..=9).contains(&g.n_vertices()) && g.ext_inputs().is_some()));
    }
}
