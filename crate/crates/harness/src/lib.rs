//! Experiment harness for cautious tabular RL: seeded repeated training
//! runs, oracle validation and CSV/JSON export.

pub mod config;
pub mod describe;
pub mod error;
pub mod experiment;
pub mod output;
pub mod validation;

pub use config::{AgentKind, ExperimentConfig, TraceLevel};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, RunSummary};
pub use validation::{run_validation, ValidationReport, ValidationSuite};
