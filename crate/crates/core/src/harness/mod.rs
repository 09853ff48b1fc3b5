//! Scripted operators, the closed-loop session, trial records and batches.

pub mod batch;
pub mod metrics;
pub mod operator;
pub mod record;
pub mod session;

pub use batch::{run_batch, BatchSummary};
pub use metrics::{deviation_mae, DeviationMetrics};
pub use operator::{OperatorInput, OperatorKind, OperatorSource, OperatorView, ReplayOperator, ScriptedOperator};
pub use record::{run_trial, RecordLevel, TrialRecord, TrialSummary};
pub use session::{Condition, Outcome, Session, TickRow};
