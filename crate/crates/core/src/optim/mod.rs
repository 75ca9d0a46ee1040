//! Adam, the MeSO training loop with its explicit-`A` reference, state
//! policies and learning-rate schedules.

mod adam;
mod meso;
mod reference;
mod schedule;
mod trainer;

pub use adam::{adam_init, adam_init_with, adam_update, AdamConfig, AdamState, ADAM_OPS_PER_ELEMENT};
pub use meso::{refreshes_periodically, select_rows, update_state_policy, MatrixOptimizer, MesoConfig, StatePolicy};
pub use reference::reference_train_with_a;
pub use schedule::{Schedule, DECAY_FLOOR};
pub use trainer::{sketch_columns, Method, RefreshSource, StepStats, Trainer, ADAPTOR_STREAM, PROJECTION_STREAM};
