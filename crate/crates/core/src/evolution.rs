//! Per-agent instruction generators and the alternating primal/dual update
//! that keeps each evolved instruction near its initialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::checkpoint::{self, Sidecar, CHECKPOINT_VERSION};
use crate::config;
use crate::context::ContextPool;
use crate::embedding::{nearest_texts, rank_by_cosine, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::optim::Adam;

/// Fixed text placed ahead of every decoded instruction. Bump the suffix when
/// editing so old transcripts stay attributable.
pub const COLLABORATION_PREAMBLE_V1: &str = "[collab-v1] You are one of several agents working on the same problem. \
Read the other agents' latest answers, keep the reasoning that holds up, correct what does not, \
and move toward a shared answer. End with a final line of the form \"Answer: <answer>\".";

/// Token-wise affine generator:
/// `I = W_p P + W_b I_b + W_x mean(X̄) + B`, with `mean(X̄)` the column-wise
/// average of the peer responses (zero when there are none).
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionGenerator {
    agent_id: usize,
    n_tokens: usize,
    w_p: Matrix,
    w_b: Matrix,
    w_x: Matrix,
    bias: Matrix,
    adam: Option<Adam>,
}

/// Inputs shared by the loss, its gradient and the update step.
#[derive(Debug, Clone, Copy)]
pub struct EvolveInputs<'a> {
    pub problem: &'a Matrix,
    pub init_instruction: &'a Matrix,
    pub prev_own_response: &'a Matrix,
    pub peer_responses: &'a [Matrix],
}

impl InstructionGenerator {
    pub const KIND: &'static str = "generator";

    /// Starts as the identity on the initial instruction: `W_b = I`, everything else zero.
    pub fn new(agent_id: usize, d_model: usize, n_tokens: usize) -> Self {
        InstructionGenerator {
            agent_id,
            n_tokens,
            w_p: Matrix::zeros(d_model, d_model),
            w_b: Matrix::identity(d_model),
            w_x: Matrix::zeros(d_model, d_model),
            bias: Matrix::zeros(d_model, n_tokens),
            adam: None,
        }
    }

    pub fn from_parts(agent_id: usize, w_p: Matrix, w_b: Matrix, w_x: Matrix, bias: Matrix) -> Result<Self> {
        let d = bias.rows();
        for (name, m) in [("W_p", &w_p), ("W_b", &w_b), ("W_x", &w_x)] {
            if m.shape() != (d, d) {
                return Err(Error::dims("generator weights", format!("{name} {d}x{d}"), format!("{:?}", m.shape())));
            }
        }
        Ok(InstructionGenerator {
            agent_id,
            n_tokens: bias.cols(),
            w_p,
            w_b,
            w_x,
            bias,
            adam: None,
        })
    }

    pub fn agent_id(&self) -> usize {
        self.agent_id
    }

    pub fn d_model(&self) -> usize {
        self.bias.rows()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model();
        3 * d * d + d * self.n_tokens
    }

    /// Flat parameters in the order `W_p, W_b, W_x, B`, each row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for m in [&self.w_p, &self.w_b, &self.w_x, &self.bias] {
            p.extend_from_slice(m.data());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dims("generator parameters", self.n_params(), p.len()));
        }
        let mut off = 0;
        for m in [&mut self.w_p, &mut self.w_b, &mut self.w_x, &mut self.bias] {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&p[off..off + len]);
            off += len;
        }
        Ok(())
    }

    fn check_token_matrix(&self, m: &Matrix, what: &'static str) -> Result<()> {
        if m.shape() != (self.d_model(), self.n_tokens) {
            return Err(Error::dims(
                what,
                format!("{}x{}", self.d_model(), self.n_tokens),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        Ok(())
    }

    fn peer_mean(&self, peers: &[Matrix]) -> Result<Matrix> {
        let mut acc = Matrix::zeros(self.d_model(), self.n_tokens);
        for p in peers {
            self.check_token_matrix(p, "generator peer response")?;
            acc.axpy(1.0, p)?;
        }
        if !peers.is_empty() {
            acc = acc.scale(1.0 / peers.len() as f64);
        }
        Ok(acc)
    }

    /// `I_i^t = G([P; I_b; X̄])`.
    pub fn generate(&self, problem: &Matrix, init_instruction: &Matrix, peer_responses: &[Matrix]) -> Result<Matrix> {
        self.check_token_matrix(problem, "generator problem")?;
        self.check_token_matrix(init_instruction, "generator initial instruction")?;
        let xm = self.peer_mean(peer_responses)?;
        let mut out = self.bias.clone();
        out.axpy(1.0, &self.w_p.matmul(problem)?)?;
        out.axpy(1.0, &self.w_b.matmul(init_instruction)?)?;
        out.axpy(1.0, &self.w_x.matmul(&xm)?)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path, seed: u64, alpha: f64) -> Result<()> {
        let params = self.params();
        let sidecar = Sidecar {
            kind: Self::KIND.into(),
            d_model: self.d_model(),
            n_tokens: self.n_tokens,
            agent_id: Some(self.agent_id),
            seed,
            version: CHECKPOINT_VERSION,
            n_params: params.len(),
            alpha: Some(alpha),
        };
        checkpoint::write(path, &params, &sidecar)
    }

    /// Returns the generator and the dual variable stored with it.
    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let (p, sc) = checkpoint::read(path, Self::KIND)?;
        let mut g = InstructionGenerator::new(sc.agent_id.unwrap_or(0), sc.d_model, sc.n_tokens);
        g.set_params(&p)?;
        Ok((g, sc.alpha.unwrap_or(0.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_max: f64,
}

impl DualState {
    pub fn new(beta: f64) -> Result<Self> {
        let s = DualState {
            alpha: 0.0,
            beta,
            alpha_max: config::ALPHA_MAX,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.alpha_max > 0.0) || !(self.alpha >= 0.0 && self.alpha <= self.alpha_max) {
            return Err(Error::invalid(format!("invalid dual state {self:?}")));
        }
        Ok(())
    }

    /// Projected ascent on `alpha (|I - I_b| - beta)`.
    pub fn ascend(&mut self, violation: f64, lr: f64) {
        self.alpha = (self.alpha + lr * violation).clamp(0.0, self.alpha_max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveReport {
    /// Total loss after the update, evaluated with the updated `alpha`.
    pub generator_loss: f64,
    /// Activation alignment term before the update.
    pub alignment_before: f64,
    /// Activation alignment term after the update.
    pub alignment: f64,
    /// `|I - I_b| - beta` after the update.
    pub constraint_violation: f64,
    pub alpha_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub alignment: f64,
    pub distance: f64,
    pub total: f64,
}

struct Evaluated {
    instruction: Matrix,
    peer_mean: Matrix,
    terms: LossTerms,
}

fn evaluate(block: &AttentionBlock, gen: &InstructionGenerator, inputs: &EvolveInputs<'_>, alpha: f64) -> Result<Evaluated> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    gen.check_token_matrix(inputs.prev_own_response, "generator previous response")?;
    let instruction = gen.generate(inputs.problem, inputs.init_instruction, inputs.peer_responses)?;
    let peer_mean = gen.peer_mean(inputs.peer_responses)?;
    let alignment = block
        .activation_of(&instruction, inputs.problem)?
        .sub(&block.activation_of(inputs.prev_own_response, inputs.problem)?)?
        .frobenius_norm();
    let distance = instruction.sub(inputs.init_instruction)?.frobenius_norm();
    Ok(Evaluated {
        instruction,
        peer_mean,
        terms: LossTerms {
            alignment,
            distance,
            total: alignment + alpha * distance,
        },
    })
}

/// `|a([G; P]) - a([X_i^{t-1}; P])| + alpha |G - I_b|`, split into its terms.
pub fn generator_loss_terms(block: &AttentionBlock, gen: &InstructionGenerator, inputs: &EvolveInputs<'_>, alpha: f64) -> Result<LossTerms> {
    Ok(evaluate(block, gen, inputs, alpha)?.terms)
}

pub fn generator_loss(block: &AttentionBlock, gen: &InstructionGenerator, inputs: &EvolveInputs<'_>, alpha: f64) -> Result<f64> {
    Ok(generator_loss_terms(block, gen, inputs, alpha)?.total)
}

/// Analytic gradient of [`generator_loss`] with respect to [`InstructionGenerator::params`].
pub fn generator_gradient(block: &AttentionBlock, gen: &InstructionGenerator, inputs: &EvolveInputs<'_>, alpha: f64) -> Result<Vec<f64>> {
    let ev = evaluate(block, gen, inputs, alpha)?;
    let (d, n) = (gen.d_model(), gen.n_tokens);
    let mut d_instr = Matrix::zeros(d, n);
    if ev.terms.alignment > 0.0 {
        let diff = block
            .activation_of(&ev.instruction, inputs.problem)?
            .sub(&block.activation_of(inputs.prev_own_response, inputs.problem)?)?;
        let upstream = diff.scale(1.0 / ev.terms.alignment);
        d_instr = block.activation_content_grad(&ev.instruction, inputs.problem, &upstream)?;
    }
    if alpha > 0.0 && ev.terms.distance > 0.0 {
        let drift = ev.instruction.sub(inputs.init_instruction)?;
        d_instr.axpy(alpha / ev.terms.distance, &drift)?;
    }
    let mut grad = Vec::with_capacity(gen.n_params());
    for src in [inputs.problem, inputs.init_instruction, &ev.peer_mean] {
        grad.extend_from_slice(d_instr.matmul_t(src)?.data());
    }
    grad.extend_from_slice(d_instr.data());
    Ok(grad)
}

/// One alternating update: Adam on θ with `alpha` fixed, then projected
/// ascent on `alpha` using the violation of the updated instruction.
pub fn evolve_step(
    block: &AttentionBlock,
    gen: &mut InstructionGenerator,
    dual: &mut DualState,
    inputs: &EvolveInputs<'_>,
    lr_theta: f64,
    lr_alpha: f64,
) -> Result<EvolveReport> {
    if !(lr_theta > 0.0 && lr_theta.is_finite()) || !(lr_alpha > 0.0 && lr_alpha.is_finite()) {
        return Err(Error::invalid(format!("learning rates must be positive, got {lr_theta} and {lr_alpha}")));
    }
    let alignment_before = generator_loss_terms(block, gen, inputs, dual.alpha)?.alignment;
    let grad = generator_gradient(block, gen, inputs, dual.alpha)?;
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let mut params = gen.params();
    let n = params.len();
    let adam = gen.adam.get_or_insert_with(|| Adam::new(n, lr_theta));
    adam.lr = lr_theta;
    adam.step(&mut params, &grad);
    gen.set_params(&params)?;

    let after = evaluate(block, gen, inputs, dual.alpha)?;
    let violation = after.terms.distance - dual.beta;
    dual.ascend(violation, lr_alpha);
    Ok(EvolveReport {
        generator_loss: after.terms.alignment + dual.alpha * after.terms.distance,
        alignment_before,
        alignment: after.terms.alignment,
        constraint_violation: violation,
        alpha_after: dual.alpha,
    })
}

/// Renders the preamble, the first template verbatim, and any extra
/// templates as secondary suggestions.
pub fn render_instruction(templates: &[&str]) -> String {
    let mut out = String::from(COLLABORATION_PREAMBLE_V1);
    if let Some((first, rest)) = templates.split_first() {
        out.push('\n');
        out.push_str(first);
        if !rest.is_empty() {
            out.push_str("\nAlso consider:");
            for t in rest {
                out.push_str("\n- ");
                out.push_str(t);
            }
        }
    }
    out
}

/// Maps an instruction embedding back to text via its nearest pool templates.
pub fn decode_instruction(embedding: &Matrix, pool: &ContextPool, provider: &dyn EmbeddingProvider, k: usize) -> Result<String> {
    if k == 0 {
        return Err(Error::invalid("decode_instruction needs k >= 1"));
    }
    let ranked = nearest_texts(provider, &embedding.column_mean(), &pool.texts(), k)?;
    let templates: Vec<&str> = ranked.iter().map(|r| pool.entries()[r.index].text.as_str()).collect();
    Ok(render_instruction(&templates))
}

/// As [`decode_instruction`] with the pool's sentence vectors precomputed.
pub fn decode_with_vectors(embedding: &Matrix, pool: &ContextPool, sentences: &[Vector], k: usize) -> Result<String> {
    if k == 0 {
        return Err(Error::invalid("decode_instruction needs k >= 1"));
    }
    let ranked = rank_by_cosine(&embedding.column_mean(), sentences, k)?;
    let templates: Vec<&str> = ranked.iter().map(|r| pool.entries()[r.index].text.as_str()).collect();
    Ok(render_instruction(&templates))
}
