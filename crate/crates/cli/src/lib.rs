//! Command-line front end: dataset generation, training, evaluation,
//! sweeps, ensembling and embeddings, all file-in file-out.

pub mod commands;
pub mod config;
pub mod plot;

/// Exit status for a failed command: 2 for malformed input files, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<milpath_core::Error>() {
        Some(e) if e.is_malformed_input() => 2,
        _ => 1,
    }
}
