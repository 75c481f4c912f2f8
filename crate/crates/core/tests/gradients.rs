use std::path::PathBuf;

use foke_core::embedding::gradcheck::{finite_diff_gradient, max_relative_error, DEFAULT_EPSILON};
use foke_core::embedding::{Activation, Similarity, TrainingProblem};
use foke_core::store::load_forest;
use foke_core::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(config: TrainConfig, seed: u64) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/forest.json");
    let (forest, triples) = load_forest(&std::fs::read(path).unwrap()).unwrap();
    let problem = TrainingProblem::new(&forest, &triples, &config).unwrap();
    let template = problem.init_model();

    // Move away from the identity GNN and zero bias the init produces.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = template
        .flatten()
        .iter()
        .map(|v| v + rng.gen_range(-0.3..0.3))
        .collect();
    let mut model = template.clone();
    model.assign(&x);

    let (_, grad) = problem.evaluate(&model);
    let numeric = finite_diff_gradient(|p| problem.objective_at(&template, p), &x, DEFAULT_EPSILON);
    let err = max_relative_error(&grad.flatten(), &numeric);
    assert!(err < 1e-4, "relative error {err:e} for {config:?}");
}

fn base() -> TrainConfig {
    TrainConfig {
        dim: 4,
        negatives_per_edge: 2,
        margin: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn plain_objective() {
    check(base(), 1);
}

#[test]
fn cosine_contrastive_with_sampled_denominators() {
    check(
        TrainConfig {
            similarity: Similarity::Cosine,
            contrastive_samples: Some(3),
            ..base()
        },
        2,
    );
}

#[test]
fn through_message_passing() {
    for (layers, activation) in [(1, Activation::Tanh), (2, Activation::Tanh), (2, Activation::Identity)] {
        check(
            TrainConfig {
                gnn_layers: layers,
                activation,
                lambda_s: 0.7,
                lambda_u: 1.3,
                ..base()
            },
            3 + layers as u64,
        );
    }
}
