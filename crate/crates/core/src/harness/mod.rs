//! Training, evaluation and ablation driver.

mod ablate;
mod checkpoint;
mod config;
mod optim;
mod train;

pub use ablate::{ablate, ablation_csv, sweep_configs, trial_seed, AblationRow, ABLATION_HEADER};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use optim::{cosine_lr, Optimizer};
pub use train::{
    build_model, evaluate, iterations_for, load_model, train, train_from_manifest, EpochLog, Evaluation, TrainOutcome,
    LOG_HEADER,
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_arithmetic() {
        assert_eq!(iterations_for(1706, 75, 32, 1).unwrap(), 4050);
        assert_eq!(iterations_for(16, 1, 16, 1).unwrap(), 1);
        assert_eq!(iterations_for(17, 1, 16, 1).unwrap(), 2);
        assert!(iterations_for(17, 1, 0, 1).is_err());
        assert!(iterations_for(17, 1, 4, 0).is_err());
    }
}
