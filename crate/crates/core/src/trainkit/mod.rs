//! Desk-scale training harness: stacks of quantized linear layers with ReLU,
//! AdamW with warmup and cosine decay, and two synthetic tasks.

mod model;
mod optim;
mod sweep;
mod task;
mod train;

pub use model::{ForwardTrace, Gradients, Model};
pub use optim::{clip_global_norm, lr_at, AdamW, AdamWParams};
pub use sweep::{loss_gap_sweep, median, SchemePair, SweepCell, SweepSetup};
pub use task::{SequenceTask, Targets, Task, TeacherStudent};
pub use train::{evaluate, train, CurvePoint, Outcome, TrainConfig, TrainResult};
