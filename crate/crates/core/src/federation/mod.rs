//! The three-phase protocol between centers and a coordinator.
//!
//! Centers never send subject-level rows except opt-in score projections:
//! only moments, ADMM weight iterates and truncated eigenpacks leave a site.

pub mod agent;
pub mod audit;
pub mod covariates;
pub mod message;
pub mod pipeline;
pub mod protocol;
pub mod transport;

pub use audit::{audit_privacy, AuditContext, AuditReport};
pub use covariates::{CovariateSpec, CovariateTable, CovariateTerm};
pub use message::{Message, MessageKind};
pub use pipeline::{expected_message_count, run_pipeline, AnalysisResult, Pipeline, PipelineRun, Transcript};
pub use protocol::{CenterSite, CenterState, CoordinatorState, GroundTruth, Phase, PhaseKind, PipelineConfig};
pub use transport::{Address, FileExchangeTransport, InProcessTransport, Transport};
