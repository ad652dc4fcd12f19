//! Gradient checks, synthetic tasks, training loops, and memory sweeps.

pub mod check;
pub mod optim;
pub mod sweep;
pub mod task;
pub mod train;

pub use check::{check_adapter_gradients, probe_backbone, TensorCheck, GRADCHECK_EPS, GRADCHECK_TOL};
pub use optim::{clip_global_norm, lr_at, AdamW, AdamWConfig, Schedule};
pub use task::{make_task, Example, NiahConfig, SeqclassConfig, Task, TaskSpec};
pub use train::{evaluate, measure_step, measure_throughput, train, RunReport, StepMeasure, TrainConfig, TrainOptions};
pub use sweep::{
    default_spec, fit_slopes, parse_targets, run_sweep, sweep_points, write_csv, GridValue, SlopeSummary, SweepConfig,
    SweepDimension, SweepMode, SweepPoint, SweepRow, SweepSettings,
};
