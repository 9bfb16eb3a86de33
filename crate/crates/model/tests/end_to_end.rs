mod common;

use common::checks;
use pixelrt_model::model::ModelConfig;
use pixelrt_model::train::TrainConfig;

#[test]
fn gradients_match_finite_differences() {
    let s = checks::gradient_check(5).unwrap();
    println!("{s}");
}

#[test]
fn stages_freeze_the_rest() {
    checks::stage_freeze().unwrap();
}

#[test]
fn memory_protocol_conserves_slots() {
    checks::protocol_conservation(1000).unwrap();
}

#[test]
fn seg_routing_across_token_counts() {
    checks::seg_routing_sweep().unwrap();
}

#[test]
fn short_tiny_run_reduces_loss_and_oracle_is_exact() {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        steps: 3,
        batch_size: 2,
        frames: 2,
        early_stop: None,
        ..checks::overfit_config()
    };
    let run = checks::overfit_run(cfg).unwrap();
    assert_eq!(run.steps, 3);
    assert!(run.fit.1.is_finite());
    checks::oracle_injection_is_exact(&run.model, &run.samples).unwrap();
}
