//! Experiment orchestration: config, calibration, runs, reports and manifests.

pub mod config;
pub mod diagnostics;
pub mod io;
pub mod manifest;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, DESK_TOML};
pub use diagnostics::{gradcheck, guidance_diagnostic, GradcheckReport, GuidanceReport, ProbeLoss};
pub use io::{read_grid, write_grid};
pub use manifest::{Artifact, RunManifest};
pub use report::{write_report, AttackSummary, ImageResult, ReportFiles, RobustnessReport};
pub use run::{derive_seed, run_experiment, run_with_setup, RunOutput, Setup};
