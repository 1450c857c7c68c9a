//! Experiment runner for the incremental-learning laboratory.
//!
//! The binary is a thin shell: every command lives here as a library
//! function operating on [`config::ExperimentConfig`], so tests and sweeps
//! drive the exact code paths the CLI does.

pub mod checks;
pub mod commands;
pub mod config;
pub mod runner;

pub use cil_core::{Error, Result};

/// Exit code classes: configuration faults, runtime faults, and numerical
/// aborts are distinguishable by scripts.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::DegenerateVector { .. } => EXIT_NUMERICAL,
        Error::Config(_)
        | Error::InfeasibleSpec(_)
        | Error::CsvParse { .. }
        | Error::FormatVersion { .. }
        | Error::Json(_)
        | Error::LabelOutOfRange { .. }
        | Error::NoClasses
        | Error::EmptyClass(_)
        | Error::ClassAlreadyBuffered(_)
        | Error::MissingExemplars(_)
        | Error::UndefinedCorrelation(_)
        | Error::UndefinedForgetting => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_error_space() {
        assert_eq!(
            exit_code_for(&Error::Config("x".into())),
            EXIT_CONFIG
        );
        assert_eq!(
            exit_code_for(&Error::NonFinite {
                context: "x".into()
            }),
            EXIT_NUMERICAL
        );
        assert_eq!(
            exit_code_for(&Error::DegenerateVector {
                op: "cos",
                norm: 0.0
            }),
            EXIT_NUMERICAL
        );
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(exit_code_for(&io), EXIT_RUNTIME);
        assert_eq!(
            exit_code_for(&Error::FormatVersion {
                found: 9,
                supported: 1
            }),
            EXIT_CONFIG
        );
    }
}
