//! Single-block attention activation and its linear surrogate.
//!
//! The activation of a context `C = [I; X̄; P]` uses queries built from the
//! problem columns only, and keys/values from the whole concatenation:
//!
//! ```text
//! a(C) = W_V C softmax((W_K C)^T W_Q P / sqrt(d))
//! ```

mod bounds;
pub mod suite;

pub use bounds::{
    check_decomposition_error, check_decoupling_bound, check_denominator_bound, check_linear_decomposition,
    check_softmax_linear_gap, check_theorem1, estimate_smoothness, rescale_to_bounds, AgentPair, BoundConfig,
    BoundReport, BOUND_TOLERANCE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{concat_columns, softmax_columns, Matrix};

/// Fixed attention weights `(W_Q, W_K, W_V)` and score scale `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    scale_dim: usize,
}

/// Intermediates of one forward pass, kept for the backward pass.
struct Forward {
    queries: Matrix,
    weights: Matrix,
    out: Matrix,
}

impl AttentionBlock {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, scale_dim: usize) -> Result<Self> {
        let d_model = wv.rows();
        if wv.cols() != d_model {
            return Err(Error::dims("AttentionBlock::new (W_V square)", d_model, wv.cols()));
        }
        if wq.shape() != wk.shape() {
            return Err(Error::dims(
                "AttentionBlock::new (W_Q vs W_K)",
                format!("{:?}", wq.shape()),
                format!("{:?}", wk.shape()),
            ));
        }
        if wq.cols() != d_model {
            return Err(Error::dims("AttentionBlock::new (W_Q cols)", d_model, wq.cols()));
        }
        if scale_dim == 0 {
            return Err(Error::invalid("scale_dim must be positive"));
        }
        Ok(AttentionBlock { wq, wk, wv, scale_dim })
    }

    /// Gaussian weights scaled by `1/sqrt(d_model)`, deterministic per seed.
    /// `W_Q` and `W_K` have `scale_dim` rows.
    pub fn seeded(d_model: usize, scale_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d_model as f64).sqrt();
        let mut draw = |rows, cols| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * s
            })
        };
        let wq = draw(scale_dim, d_model);
        let wk = draw(scale_dim, d_model);
        let wv = draw(d_model, d_model);
        AttentionBlock { wq, wk, wv, scale_dim }
    }

    pub fn d_model(&self) -> usize {
        self.wv.rows()
    }

    pub fn scale_dim(&self) -> usize {
        self.scale_dim
    }

    pub fn wq(&self) -> &Matrix {
        &self.wq
    }

    pub fn wk(&self) -> &Matrix {
        &self.wk
    }

    pub fn wv(&self) -> &Matrix {
        &self.wv
    }

    /// Returns a copy with `W_K` replaced.
    pub fn with_wk(&self, wk: Matrix) -> Result<Self> {
        AttentionBlock::new(self.wq.clone(), wk, self.wv.clone(), self.scale_dim)
    }

    fn check_rows(&self, m: &Matrix, op: &'static str) -> Result<()> {
        if m.rows() != self.d_model() {
            return Err(Error::dims(op, format!("{} rows", self.d_model()), format!("{} rows", m.rows())));
        }
        Ok(())
    }

    fn forward(&self, keys_values: &Matrix, query_source: &Matrix) -> Result<Forward> {
        self.check_rows(keys_values, "attend (keys/values)")?;
        self.check_rows(query_source, "attend (queries)")?;
        let queries = self.wq.matmul(query_source)?;
        let keys = self.wk.matmul(keys_values)?;
        let scores = keys.t_matmul(&queries)?.scale(1.0 / (self.scale_dim as f64).sqrt());
        let weights = softmax_columns(&scores);
        // W_V (C A) is cheaper than (W_V C) A when the context is wide.
        let out = self.wv.matmul(&keys_values.matmul(&weights)?)?;
        Ok(Forward { queries, weights, out })
    }

    /// Softmax attention over `keys_values` with queries from `query_source`.
    pub fn attend(&self, keys_values: &Matrix, query_source: &Matrix) -> Result<Matrix> {
        Ok(self.forward(keys_values, query_source)?.out)
    }

    /// `a([I; X̄; P])`; an empty `responses` slice gives the initial context `[I; P]`.
    pub fn activation(&self, instruction: &Matrix, responses: &[Matrix], problem: &Matrix) -> Result<Matrix> {
        let mut parts: Vec<&Matrix> = Vec::with_capacity(responses.len() + 2);
        parts.push(instruction);
        parts.extend(responses.iter());
        parts.push(problem);
        let context = concat_columns(&parts)?;
        self.attend(&context, problem)
    }

    /// Shorthand `a([content; P])` used by the alignment losses.
    pub fn activation_of(&self, content: &Matrix, problem: &Matrix) -> Result<Matrix> {
        self.activation(content, &[], problem)
    }

    /// Activation of a fully assembled context whose trailing columns are the problem.
    pub fn activation_of_context(&self, context: &Matrix, problem: &Matrix) -> Result<Matrix> {
        self.attend(context, problem)
    }

    /// Linear attention `W_V C (W_K C)^T W_Q Q`, no softmax and no scaling.
    pub fn linear_attend(&self, keys_values: &Matrix, query_source: &Matrix) -> Result<Matrix> {
        self.check_rows(keys_values, "linear_attend (keys/values)")?;
        self.check_rows(query_source, "linear_attend (queries)")?;
        let queries = self.wq.matmul(query_source)?;
        let keys = self.wk.matmul(keys_values)?;
        let scores = keys.t_matmul(&queries)?;
        self.wv.matmul(&keys_values.matmul(&scores)?)
    }

    /// `a'(Y) = W_V [Y, P] (W_K [Y, P])^T W_Q P` with `Y` the concatenated segments.
    pub fn linear_activation(&self, content: &[Matrix], problem: &Matrix) -> Result<Matrix> {
        let mut parts: Vec<&Matrix> = content.iter().collect();
        parts.push(problem);
        let context = concat_columns(&parts)?;
        self.linear_attend(&context, problem)
    }

    /// Gradient of a scalar loss with respect to `content`, where the loss
    /// depends on `a([content; P])` through `upstream = dL/da`.
    pub fn activation_content_grad(&self, content: &Matrix, problem: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        let context = concat_columns(&[content, problem])?;
        let fwd = self.forward(&context, problem)?;
        if upstream.shape() != fwd.out.shape() {
            return Err(Error::dims(
                "activation_content_grad",
                format!("{:?}", fwd.out.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        // out = W_V (C A)
        let d_mixed = self.wv.t_matmul(upstream)?; // d_model x n_q
        let mut d_context = d_mixed.matmul_t(&fwd.weights)?; // d_model x m
        let d_weights = context.t_matmul(&d_mixed)?; // m x n_q

        // Column-wise softmax backward.
        let (m, nq) = d_weights.shape();
        let mut d_scores = Matrix::zeros(m, nq);
        for q in 0..nq {
            let inner: f64 = (0..m).map(|k| fwd.weights.get(k, q) * d_weights.get(k, q)).sum();
            for k in 0..m {
                d_scores.set(k, q, fwd.weights.get(k, q) * (d_weights.get(k, q) - inner));
            }
        }
        let inv_sqrt = 1.0 / (self.scale_dim as f64).sqrt();
        // scores = K^T Q / sqrt(d) with K = W_K C, so dK = Q dS^T / sqrt(d).
        let d_keys = fwd.queries.matmul_t(&d_scores)?.scale(inv_sqrt); // d x m
        d_context.axpy(1.0, &self.wk.t_matmul(&d_keys)?)?;
        Ok(d_context.columns(0, content.cols()))
    }
}
