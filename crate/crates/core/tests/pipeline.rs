mod common;

use sigood_core::detector::{detect, run_loop, DetectorConfig, DetectorState};
use sigood_core::eval::{prepare_run, results_auc};
use sigood_core::gnn::{encode_dataset, pretrain};
use sigood_core::linalg::Matrix;

use common::*;

#[test]
fn transductive_steps_mostly_descend() {
    let cfg = feature_benchmark();
    let (train, test) = prepare_run(&cfg.protocol, 0).unwrap();
    let model = pretrain(&train, &cfg.pretrain).unwrap();
    let embedded = encode_dataset(&test, &model).unwrap();
    let mut offsets = vec![0];
    for g in &embedded {
        offsets.push(offsets.last().unwrap() + g.node_count());
    }
    let rows: Vec<&Matrix> = embedded.iter().map(|g| &g.embeddings).collect();
    let det = DetectorConfig {
        iterations: 200,
        check_descent: true,
        ..cfg.detector
    };
    let mut state = DetectorState::new(Matrix::vstack(&rows).unwrap(), offsets, &det).unwrap();
    let (_, steps) = run_loop(&mut state, &model, &det).unwrap();
    let descended = steps
        .iter()
        .filter(|s| s.post_step_loss.unwrap() <= s.total_loss)
        .count();
    assert!(
        descended * 10 >= steps.len() * 9,
        "{descended} of {} steps descended",
        steps.len()
    );
}

#[test]
fn small_benchmark_separates_and_is_reproducible() {
    let cfg = small_benchmark(vec![0]);
    let (train, test) = prepare_run(&cfg.protocol, 0).unwrap();
    let model = pretrain(&train, &cfg.pretrain).unwrap();
    let a = detect(&test, &model, &cfg.detector).unwrap();
    let b = detect(&test, &model, &cfg.detector).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), test.len());
    assert!(a.iter().all(|r| r.trace.len() == 50 && r.label.is_some()));
    let auc = results_auc(&a).unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
