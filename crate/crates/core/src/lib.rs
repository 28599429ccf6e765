//! Core algorithms for multi-agent discussion with evolving per-agent contexts.
//!
//! A fixed single-head attention block scores how a context steers an agent.
//! Initial instructions are picked from a pool by a distilled projector, then
//! refined each round by a per-agent generator under a drift budget enforced
//! with a dual variable.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod evolution;
pub mod http;
pub mod numerics;
pub mod optim;
pub mod synthetic;

pub use agents::{AgentBackend, AgentContext, AgentError, AgentResponse, ConsensusMock, ConsensusMockSpec, HttpAgent, HttpAgentSpec};
pub use attention::{AttentionBlock, BoundConfig, BoundReport};
pub use context::{ContextPool, DistilledProjector, PoolEntry, ProjectionModel, SelectionMode, SelectionResult};
pub use embedding::{EmbedderSpec, EmbeddingProvider, HashEmbedder};
pub use engine::{DiscussionConfig, DiscussionTranscript, InstructionMode, Learner, Pipeline, Problem, TurnRecord};
pub use error::{Error, Result};
pub use evolution::{DualState, EvolveReport, InstructionGenerator};
pub use numerics::{Matrix, Vector};
