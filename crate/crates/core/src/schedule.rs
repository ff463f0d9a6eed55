//! Batching tasks over a mini-batch of graphs.
//!
//! The forward schedule repeatedly collects every vertex whose children have
//! all been evaluated into one task and pushes it onto a stack; the backward
//! schedule pops the stack. Discovery uses remaining-children counters, so a
//! pass touches each vertex and edge once.

use crate::error::ScheduleError;
use crate::graph::GraphBatch;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BatchTask {
    pub id: usize,
    /// Global vertex IDs in ascending order.
    pub vertices: Vec<usize>,
}

impl BatchTask {
    pub fn size(&self) -> usize {
        self.vertices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TaskStack {
    tasks: Vec<BatchTask>,
}

impl TaskStack {
    pub fn tasks(&self) -> &[BatchTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_vertices(&self) -> usize {
        self.tasks.iter().map(BatchTask::size).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(BatchTask::size).collect()
    }

    /// All vertices in push order; row `r` of every dynamic tensor holds
    /// the vertex at position `r`.
    pub fn vertex_order(&self) -> Vec<usize> {
        self.tasks.iter().flat_map(|t| t.vertices.iter().copied()).collect()
    }

    pub fn push(&mut self, vertices: Vec<usize>) {
        let id = self.tasks.len();
        self.tasks.push(BatchTask { id, vertices });
    }
}

/// Task discovery with a vertex-visit counter.
#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    visits: u64,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vertices visited since construction, counting forward and backward.
    pub fn visits(&self) -> u64 {
        self.visits
    }

    pub fn forward_schedule(&mut self, batch: &GraphBatch) -> Result<TaskStack, ScheduleError> {
        let n = batch.total_vertices();
        if batch.is_empty() || n == 0 {
            return Err(ScheduleError::EmptyBatch);
        }
        let mut pending: Vec<usize> = (0..n).map(|v| batch.children(v).len()).collect();
        let mut parents_start = vec![0usize; n + 1];
        for v in 0..n {
            for &c in batch.children(v) {
                parents_start[c + 1] += 1;
            }
        }
        for v in 0..n {
            parents_start[v + 1] += parents_start[v];
        }
        let mut fill = parents_start.clone();
        let mut parents = vec![0usize; parents_start[n]];
        for v in 0..n {
            for &c in batch.children(v) {
                parents[fill[c]] = v;
                fill[c] += 1;
            }
        }
        let mut stack = TaskStack::default();
        let mut frontier: Vec<usize> = (0..n).filter(|&v| pending[v] == 0).collect();
        let mut done = 0;
        while !frontier.is_empty() {
            self.visits += frontier.len() as u64;
            done += frontier.len();
            let mut next = Vec::new();
            for &v in &frontier {
                for &p in &parents[parents_start[v]..parents_start[v + 1]] {
                    pending[p] -= 1;
                    if pending[p] == 0 {
                        next.push(p);
                    }
                }
            }
            next.sort_unstable();
            stack.push(std::mem::replace(&mut frontier, next));
        }
        if done != n {
            return Err(ScheduleError::Stalled(n - done));
        }
        Ok(stack)
    }

    /// Pops every task: the tasks in reverse push order.
    pub fn backward_schedule(&mut self, stack: TaskStack) -> Result<Vec<BatchTask>, ScheduleError> {
        if stack.is_empty() {
            return Err(ScheduleError::EmptyStack);
        }
        let mut tasks = stack.tasks;
        tasks.reverse();
        self.visits += tasks.iter().map(|t| t.size() as u64).sum::<u64>();
        Ok(tasks)
    }

    /// One vertex per task: graph by graph, each graph in level order with
    /// ascending IDs inside a level.
    pub fn serial_schedule(&mut self, batch: &GraphBatch) -> Result<TaskStack, ScheduleError> {
        if batch.is_empty() || batch.total_vertices() == 0 {
            return Err(ScheduleError::EmptyBatch);
        }
        let mut stack = TaskStack::default();
        for (gi, g) in batch.graphs().iter().enumerate() {
            let levels = g.levels();
            let mut order: Vec<usize> = (0..g.n_vertices()).collect();
            order.sort_by_key(|&v| (levels[v], v));
            for v in order {
                stack.push(vec![batch.global_id(gi, v)]);
            }
        }
        self.visits += batch.total_vertices() as u64;
        Ok(stack)
    }
}
