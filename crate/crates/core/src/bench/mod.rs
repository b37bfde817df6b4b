//! Memory-operation accounting, accuracy metrics, parameter sweeps and timing.

mod metrics;
mod microbench;
mod sweep;

pub use metrics::{count_memops, mean_error, mean_memory_ratio, mean_recall, recall_at_budget, MemOpCount};
pub use microbench::{microbench, MicrobenchOptions, StageTiming, TimingTable};
pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepRow};
