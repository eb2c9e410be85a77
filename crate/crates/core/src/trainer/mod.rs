//! Two-stage training protocol: configuration, training loops, selection
//! and the final test evaluation.

pub mod config;
pub mod protocol;

pub use config::{
    GridConfig, Preset, ProtocolConfig, SchedulerConfig, Seeds, Stage2Config, Stage2Init, Stage2Lr,
    SCHEMA_VERSION, SYNTHETIC_LR,
};
pub use protocol::{
    run_protocol, train_stage1, train_stage2, write_atomic, AccessLog, EpochRecord, Observer, Phase,
    ProtocolReport, Quiet, Stage1Summary, StageOutcome, ValidationRecord, BEST_STAGE1_FILE,
    CHECKPOINT_DIR, LOG_FILE, MODEL_FILE, REPORT_FILE,
};
