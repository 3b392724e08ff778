//! Pipeline orchestration, configuration, reporting and the inversion probe.

pub mod attack;
pub mod config;
pub mod pipeline;
pub mod report;

pub use attack::{attack_all_classes, inversion_attack, template_agreement, AttackSummary, Inversion};
pub use config::RunConfig;
pub use pipeline::{run_pipeline, PipelineOutcome, Run, RunOptions, RunSummary, Stage};
pub use report::emit_report;
