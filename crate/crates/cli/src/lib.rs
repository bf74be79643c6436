//! Library side of the `moesumm` command: corpus resolution and the
//! subcommand implementations, callable without spawning the binary.

pub mod commands;
pub mod data;

pub use commands::{eval, finetune, generate, synth, train, GenerateOptions, Metrics, Mode, TrainOutcome, CHECKPOINT_FILE};
