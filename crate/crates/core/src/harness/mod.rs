//! Experiment orchestration: configuration, checkpoints, training, the
//! round loop and on-disk records.

mod checkpoint;
mod config;
mod experiment;
mod records;
mod trainer;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use config::{
    apply_overrides, resolve_key, ExperimentConfig, ExperimentSection, OptimizerName, PruningSection,
    RewindMode, RewindSection, StopRule, StopSection, TrainSection,
};
pub use experiment::{
    checkpoint_name, data_root, decide, load_data, prune_round, rewind, run_experiment, run_from_baseline,
    sweep_rewind, train_to_completion, with_sweep_epochs, Baseline, RoundOutcome, RoundState, RunResult,
    SweepRow, DATA_DIR_ENV,
};
pub use records::{
    read_records, write_records, Manifest, PruneRoundRecord, RunStatus, MANIFEST_FILE, RECORDS_FILE,
};
pub use trainer::{argmax, evaluate, pin_masked, TrainState, Trainer};
