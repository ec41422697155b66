//! Online prompt adaptation: objective, optimizer, shift detection and the stream loop.

mod adam;
mod detector;
mod gradcheck;
mod objective;
mod step;

pub use adam::{AdamConfig, AdamSlot, AdamState};
pub use detector::ShiftDetector;
pub use gradcheck::{
    grad_fixture, prompt_gradcheck, GradFixture, LossTerm, PromptGradCheck, GRADCHECK_STEP, GRADCHECK_TOL,
};
pub use objective::{objective, Batch, Detached, LossConfig, Objective};
pub use step::{
    adapt_step, batch_logits, evaluate_source, reset_prompts, run_stream, write_metrics_csv, AdaptConfig, AdaptState,
    DetectorConfig, RunLog, DESK_LR, RunSummary, StepRecord, CSV_HEADER,
};
