//! Library side of the `dream` command-line tool.

pub mod checks;
pub mod commands;
pub mod config;

pub use checks::{cmd_grad_check, CheckRow, GradCheckTable};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_synth, cmd_train, AblationRow, EvalOutcome, Generated, ImageInput,
    TrainControl, TrainOutcome,
};
pub use config::{Ablate, Overrides, RunConfig, Split};
