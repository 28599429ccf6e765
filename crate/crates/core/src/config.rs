//! Default hyperparameters. These are shared by every crate in the workspace;
//! tests pin them so a silent change is caught.

pub const D_MODEL: usize = 512;
pub const N_TOKENS: usize = 8;
pub const LR_CONTEXT: f64 = 1e-4;
pub const LR_ALPHA: f64 = 1e-4;
pub const BATCH_SIZE: usize = 32;
pub const MAX_ROUNDS: usize = 8;
pub const POOL_SIZE: usize = 100;
pub const TRAINING_EPOCHS: usize = 100;
/// Fraction of problems used to train the projectors and generators.
pub const TRAIN_FRACTION: f64 = 0.2;

pub const N_AGENTS: usize = 4;
pub const BETA: f64 = 1.0;
pub const ALPHA_MAX: f64 = 100.0;
pub const SCALE_DIM: usize = 64;
pub const MOCK_GAMMA: f64 = 0.5;
