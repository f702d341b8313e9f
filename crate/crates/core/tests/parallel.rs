//! Parallel and sequential execution produce bit-identical results.
//! Kept in its own binary because the execution mode is process-wide.

use std::sync::Arc;

use segloop_core::clinician::Strategy;
use segloop_core::data::{synthesize, SynthConfig};
use segloop_core::eval::{evaluate_interactive, EvalConfig};
use segloop_core::parallel::{execution, set_execution, Execution};
use segloop_core::{AnnotatedCase, Model, ModelConfig, SessionConfig, SessionMode};

#[test]
fn evaluation_is_identical_in_both_modes() {
    let model = Arc::new(Model::init(ModelConfig::compact()).unwrap());
    let (cases, _) = synthesize(&SynthConfig { cases: 6, ..SynthConfig::default() }).unwrap();
    let refs: Vec<&AnnotatedCase> = cases.iter().collect();
    let mut cfg = EvalConfig::new(Strategy::LastWrong, SessionMode::Adaptive, SessionConfig::for_model(&model));
    cfg.interactions = 2;
    cfg.thresholds = vec![0.5];

    set_execution(Execution::Sequential);
    assert_eq!(execution(), Execution::Sequential);
    let seq = evaluate_interactive(&model, &refs, &cfg).unwrap();
    set_execution(Execution::Parallel);
    let par = evaluate_interactive(&model, &refs, &cfg).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq.trajectories.len(), 6);
    assert!(seq.trajectories.iter().all(|t| t.dice.len() == 3));
}
