//! Shared inputs for the criterion benches, built from the synthetic
//! generators at production dimensions.

use m2cl_core::context::PoolEmbeddings;
use m2cl_core::embedding::{EmbedderSpec, EmbeddingProvider, HashEmbedder};
use m2cl_core::evolution::EvolveInputs;
use m2cl_core::numerics::{Matrix, Vector};
use m2cl_core::synthetic;
use m2cl_core::{AttentionBlock, ContextPool, DistilledProjector};

pub const SEED: u64 = 0;

pub struct Workload {
    pub embedder: HashEmbedder,
    pub block: AttentionBlock,
    pub pool: ContextPool,
    pub pool_embeddings: PoolEmbeddings,
    pub projector: DistilledProjector,
    pub problem: Matrix,
    pub problem_vector: Vector,
    pub peers: Vec<Matrix>,
}

impl Workload {
    pub fn new(d_model: usize, n_tokens: usize, pool_size: usize) -> Self {
        let embedder = HashEmbedder::new(EmbedderSpec {
            d_model,
            n_tokens,
            seed: SEED,
        })
        .expect("valid spec");
        let pool = synthetic::generate_pool(pool_size, SEED).expect("pool");
        let pool_embeddings = pool.embed(&embedder).expect("embed pool");
        let problem = &synthetic::generate_problems(1, SEED).expect("problems")[0];
        Workload {
            block: AttentionBlock::seeded(d_model, 64.min(d_model), SEED),
            problem: embedder.embed_tokens(&problem.text).expect("embed"),
            problem_vector: embedder.embed_sentence(&problem.text).expect("embed"),
            peers: pool_embeddings.tokens[1..4].to_vec(),
            projector: DistilledProjector::identity(d_model),
            embedder,
            pool,
            pool_embeddings,
        }
    }

    pub fn evolve_inputs(&self) -> EvolveInputs<'_> {
        EvolveInputs {
            problem: &self.problem,
            init_instruction: &self.pool_embeddings.tokens[0],
            prev_own_response: &self.pool_embeddings.tokens[4],
            peer_responses: &self.peers,
        }
    }
}
