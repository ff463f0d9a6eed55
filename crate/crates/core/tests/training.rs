mod common;

use common::close;
use vbatch_core::engine::EngineOptions;
use vbatch_core::error::TrainError;
use vbatch_core::graph::{generate_corpus, write_graphs, CorpusSpec};
use vbatch_core::models::{LossKind, ModelKind, ModelPreset};
use vbatch_core::trainer::{train, train_from_path, TrainerConfig};

#[test]
fn batched_and_serial_trajectories_agree() {
    let spec = CorpusSpec::Random { min_n: 1, max_n: 15, arity: 2, count: 24, seed: 3 };
    let corpus = generate_corpus(&spec, 3, 3).unwrap();
    for kind in [ModelKind::TreeLstm, ModelKind::TreeFc] {
        let preset = ModelPreset::new(kind, 5, 3);
        let base = TrainerConfig {
            batch_size: 6,
            epochs: 2,
            lr: 0.1,
            seed: 11,
            ..TrainerConfig::default()
        };
        let batched = train(&preset, &corpus, &base).unwrap();
        let serial = train(&preset, &corpus, &TrainerConfig { serial: true, ..base }).unwrap();
        for (a, b) in batched.params.values().iter().zip(serial.params.values()) {
            assert!(close(a.data(), b.data(), 1e-6), "{kind:?}");
        }
        for (a, b) in batched.rows.iter().zip(&serial.rows) {
            assert!((a.loss - b.loss).abs() <= 1e-6 * a.loss.abs().max(b.loss.abs()));
        }
    }
}

#[test]
fn losses_are_finite_and_non_negative_for_every_preset() {
    let trees = generate_corpus(&CorpusSpec::Random { min_n: 1, max_n: 20, arity: 2, count: 10, seed: 1 }, 4, 1).unwrap();
    let chains = generate_corpus(&CorpusSpec::Chain { steps: 6, count: 10 }, 4, 2).unwrap();
    for kind in ModelKind::ALL {
        let corpus = if kind.is_chain() { &chains } else { &trees };
        for loss in [LossKind::SoftmaxXent, LossKind::Mse] {
            let preset = ModelPreset::new(kind, 6, 4).with_loss(loss);
            let cfg = TrainerConfig {
                batch_size: 4,
                epochs: 2,
                ..TrainerConfig::default()
            };
            let r = train(&preset, corpus, &cfg).unwrap();
            assert!(r.rows.iter().all(|x| x.loss.is_finite() && x.loss >= 0.0), "{kind:?} {loss:?}");
        }
    }
}

#[test]
fn ablation_grid_reports_equal_losses() {
    let corpus = generate_corpus(&CorpusSpec::Random { min_n: 1, max_n: 20, arity: 2, count: 20, seed: 9 }, 3, 9).unwrap();
    let preset = ModelPreset::new(ModelKind::TreeLstm, 6, 3);
    let losses: Vec<f64> = EngineOptions::grid()
        .into_iter()
        .map(|engine| {
            let cfg = TrainerConfig {
                batch_size: 5,
                epochs: 2,
                engine,
                ..TrainerConfig::default()
            };
            train(&preset, &corpus, &cfg).unwrap().final_loss()
        })
        .collect();
    assert!(losses.iter().all(|l| (l - losses[0]).abs() <= 1e-9 * losses[0]));
}

#[test]
fn parses_once_and_charges_it_to_the_first_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_graphs(&path, &generate_corpus(&CorpusSpec::Cbt { leaves: 4, count: 12 }, 2, 0).unwrap()).unwrap();
    let preset = ModelPreset::new(ModelKind::TreeFc, 3, 2);
    let cfg = TrainerConfig {
        batch_size: 4,
        epochs: 3,
        ..TrainerConfig::default()
    };
    let r = train_from_path(&preset, &path, &cfg).unwrap();
    assert_eq!(r.corpus_parses, 1);
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.rows.iter().map(|x| x.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(r.rows.iter().all(|x| x.kernel_dispatches > 0 && x.bytes_copied > 0));
}

#[test]
fn incompatible_corpus_is_rejected() {
    let ternary = generate_corpus(&CorpusSpec::Random { min_n: 10, max_n: 10, arity: 3, count: 4, seed: 0 }, 2, 0).unwrap();
    let preset = ModelPreset::new(ModelKind::TreeFc, 3, 2);
    let r = train(&preset, &ternary, &TrainerConfig::default());
    assert!(matches!(r, Err(TrainError::Incompatible(_))), "{r:?}");
    let wrong_dim = generate_corpus(&CorpusSpec::Cbt { leaves: 2, count: 2 }, 5, 0).unwrap();
    assert!(matches!(train(&preset, &wrong_dim, &TrainerConfig::default()), Err(TrainError::Incompatible(_))));
}
