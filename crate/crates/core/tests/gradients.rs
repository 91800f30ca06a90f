mod common;

use common::*;
use lexrl::grpo::{grpo_sequences, policy_loss};
use lexrl::policy::transformer::TensorClass;
use lexrl::policy::{ModelConfig, WeightedSequence};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn assert_close(checks: &[TensorCheck]) {
    for c in checks {
        assert!(c.norm > 0.0, "{} received no gradient", c.name);
        assert!(c.rel_err < TOL, "{}: relative error {:.3e}", c.name, c.rel_err);
    }
    for class in [
        TensorClass::Embedding,
        TensorClass::Attention,
        TensorClass::FeedForward,
        TensorClass::Norm,
        TensorClass::Projection,
    ] {
        assert!(checks.iter().any(|c| c.class == class), "{class:?} not probed");
    }
}

#[test]
fn sft_cross_entropy_gradients_match_central_differences() {
    let cfg = toy_model();
    let policy = perturbed_policy(cfg, 11);
    let seqs = sft_batch(&cfg, 2);
    assert_close(&finite_difference_check(&policy, &seqs, EPS, 6, 1));
}

#[test]
fn grpo_policy_loss_gradients_match_central_differences() {
    let cfg = toy_model();
    let policy = perturbed_policy(cfg, 12);
    let batch = scripted_group(&cfg, "la casa grande", "piichi miyo'u");
    assert!(batch.advantages.iter().any(|&a| a != 0.0));
    assert!(batch.advantages.iter().any(|&a| a < 0.0));
    let (seqs, _) = grpo_sequences(&batch);
    let graph = policy_loss(&batch, &policy).unwrap().unwrap();
    assert_eq!(graph.value(), policy.record_loss(&seqs).unwrap().value());
    assert_close(&finite_difference_check(&policy, &seqs, EPS, 6, 2));
}

#[test]
fn single_head_and_single_layer_shapes_also_check_out() {
    for (layers, heads) in [(1, 1), (3, 4)] {
        let cfg = ModelConfig {
            n_layers: layers,
            n_heads: heads,
            ..toy_model()
        };
        let policy = perturbed_policy(cfg, 5);
        let seqs = vec![WeightedSequence::new(vec![3, 99, 260, 101, 32, 7, 261], vec![0.0, 0.3, -0.7, 1.0, 0.0, 0.2, 0.5])];
        assert_close(&finite_difference_check(&policy, &seqs, EPS, 4, 3));
    }
}

#[test]
fn explicit_labels_are_differentiated_against_the_labels() {
    let cfg = toy_model();
    let policy = perturbed_policy(cfg, 8);
    let mut seq = WeightedSequence::new(vec![10, 20, 30, 40, 50], vec![0.0, 1.0, 1.0, 0.5, 1.0]);
    seq.labels = Some(vec![0, 21, 31, 41, 51]);
    assert_close(&finite_difference_check(&policy, &[seq], EPS, 4, 4));
}
