//! GRPO with signed entropy calibration on explicit softmax policies.

pub mod env;
pub mod loss;
pub mod policy;
pub mod trainer;

pub use env::RefusalTrapEnv;
pub use loss::{
    calibration_loss, group_advantages, kl_penalty, l2_norm, path_entropies, pg_loss, LossGrad, Trajectory,
    TrajectoryGroup,
};
pub use policy::{StateMode, ToyPolicy};
pub use trainer::{
    run_scenario, sample_group, total_step, PolicySnapshot, ScenarioSummary, ScenarioTrace, StepReport, TraceRow,
    TrainConfig, Variant,
    Verdict, VerdictConfig,
};
