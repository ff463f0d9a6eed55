//! Fixtures shared by the `batching` benchmarks.

use vbatch_core::engine::EngineOptions;
use vbatch_core::graph::{generate_corpus, CorpusSpec, InputGraph};
use vbatch_core::models::{ModelKind, ModelPreset};
use vbatch_core::trainer::{train, RunReport, TrainerConfig};

/// A corpus together with the model preset that trains on it.
pub struct Workload {
    pub corpus: Vec<InputGraph>,
    pub preset: ModelPreset,
}

impl Workload {
    /// Complete binary trees with `leaves` leaves and `d`-wide inputs.
    pub fn trees(kind: ModelKind, leaves: usize, count: usize, hidden: usize, d: usize) -> Self {
        let corpus = generate_corpus(&CorpusSpec::Cbt { leaves, count }, d, 1).expect("valid corpus spec");
        Self {
            corpus,
            preset: ModelPreset::new(kind, hidden, d),
        }
    }

    /// Random binary trees of 1 to `max_n` vertices.
    pub fn random_trees(kind: ModelKind, max_n: usize, count: usize, hidden: usize, d: usize) -> Self {
        let spec = CorpusSpec::Random { min_n: 1, max_n, arity: 2, count, seed: 7 };
        let corpus = generate_corpus(&spec, d, 7).expect("valid corpus spec");
        Self {
            corpus,
            preset: ModelPreset::new(kind, hidden, d),
        }
    }

    /// One epoch with the given batch size and engine options.
    pub fn epoch(&self, batch_size: usize, serial: bool, engine: EngineOptions) -> RunReport {
        let cfg = TrainerConfig {
            batch_size,
            serial,
            engine,
            ..TrainerConfig::default()
        };
        train(&self.preset, &self.corpus, &cfg).expect("workload trains")
    }
}

/// Short label for a flag combination, e.g. `lazy+fusion`.
pub fn label(opts: EngineOptions) -> String {
    let on: Vec<&str> = [(opts.lazy, "lazy"), (opts.fusion, "fusion"), (opts.streaming, "streaming")]
        .into_iter()
        .filter_map(|(b, n)| b.then_some(n))
        .collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_name_every_flag() {
        assert_eq!(label(EngineOptions::all_off()), "none");
        assert_eq!(label(EngineOptions::default()), "lazy+fusion+streaming");
    }

    #[test]
    fn tiny_workload_trains() {
        let w = Workload::trees(ModelKind::TreeFc, 4, 4, 3, 2);
        assert!(w.epoch(2, false, EngineOptions::default()).final_loss().is_finite());
    }
}
