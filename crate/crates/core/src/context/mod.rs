//! Instruction pool, projectors, and initial-context selection.

mod pool;
mod projection;
mod selection;

pub use pool::{ContextPool, PoolEmbeddings, PoolEntry};
pub use projection::{distill_projector, train_projection, DistilledProjector, ProjectionModel, ProjectionSample, TrainOptions, TrainStats};
pub use selection::{fit_subset, select_initial_contexts, select_subset, SelectionMode, SelectionResult, SubsetFit, EXHAUSTIVE_MAX_POOL};
