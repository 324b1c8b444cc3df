//! Closed-loop experiments: configuration, reference signals, the
//! simulation driver and trace persistence.

pub mod closed_loop;
pub mod config;
pub mod reference;
pub mod report;

pub use closed_loop::{
    final_quarter_rmse, rmse, run_centralized_oracle, run_closed_loop, ConstraintAudit, SampleRecord,
    SimulationReport, StepStats, StepTiming, TimingSummary,
};
pub use config::{InitialCt, PointSpec, SimConfig};
pub use reference::{load_or_generate_reference, ReferenceSignal, ReferenceSource};
