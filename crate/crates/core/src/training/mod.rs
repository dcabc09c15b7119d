//! Objectives and the three-phase training procedure.

mod config;
mod losses;
mod train;

pub use config::{
    FlowPhaseConfig, JointConfig, LossToggles, NetworkConfig, PretrainConfig, TradeoffSchedule,
    TrainConfig,
};
pub use losses::{
    alternative_pairs, conex_terms, counterfactual_candidate, hyconex_loss, plausibility_loss,
    pretrain_loss, proximity_loss, ConexTerms, JointContext, JointLoss, PretrainLoss,
};
pub use train::{
    early_stop_score, log_hash, log_to_jsonl, train, validation_metrics, LogRecord, LossSummary,
    TrainOutcome, ValMetrics,
};
