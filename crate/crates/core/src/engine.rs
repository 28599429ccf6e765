//! The multi-round discussion loop.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::agents::{AgentBackend, AgentContext, AgentError, AgentResponse};
use crate::attention::AttentionBlock;
use crate::config;
use crate::context::{select_initial_contexts, ContextPool, DistilledProjector, PoolEmbeddings, SelectionMode, SelectionResult};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::evolution::{decode_with_vectors, evolve_step, render_instruction, DualState, EvolveInputs, EvolveReport, InstructionGenerator};
use crate::numerics::{concat_columns, Matrix, Vector};

/// Where each round's instruction embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionMode {
    /// The initial instruction every round.
    Fixed,
    /// The agent's generator applied to `[P; I_b; X̄]`.
    #[default]
    Generated,
    /// The agent's own previous response (its initial instruction in round 1).
    Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyMetric {
    /// Max squared distance between `a([X_i; P])`.
    #[default]
    Activation,
    /// Max squared distance between raw response embeddings.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscussionConfig {
    pub n_agents: usize,
    pub max_rounds: usize,
    pub beta: f64,
    pub seed: u64,
    pub training: bool,
    pub mode: InstructionMode,
    pub selection: SelectionMode,
    pub metric: DiscrepancyMetric,
    pub lr_theta: f64,
    pub lr_alpha: f64,
    /// Pool templates used when decoding an instruction embedding to text.
    pub decode_k: usize,
}

impl Default for DiscussionConfig {
    fn default() -> Self {
        DiscussionConfig {
            n_agents: config::N_AGENTS,
            max_rounds: config::MAX_ROUNDS,
            beta: config::BETA,
            seed: 0,
            training: false,
            mode: InstructionMode::Generated,
            selection: SelectionMode::Greedy,
            metric: DiscrepancyMetric::Activation,
            lr_theta: config::LR_CONTEXT,
            lr_alpha: config::LR_ALPHA,
            decode_k: 1,
        }
    }
}

impl DiscussionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::invalid(format!("need at least 2 agents, got {}", self.n_agents)));
        }
        if self.max_rounds < 1 {
            return Err(Error::invalid("need at least 1 round"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.decode_k == 0 {
            return Err(Error::invalid("decode_k must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub key: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub round: usize,
    pub agent: usize,
    pub instruction: String,
    pub response: String,
    pub answer: String,
    pub activation_norm: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub discrepancy: f64,
    pub alpha_mean: f64,
    pub violation_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub final_answer: String,
    pub discrepancy_series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscussionTranscript {
    pub problem_key: String,
    pub chosen_ids: Vec<String>,
    pub selection: Option<SelectionResult>,
    pub records: Vec<TurnRecord>,
    pub metrics: Vec<RoundMetrics>,
    /// Generator updates, in round then agent order (training only).
    pub evolve_reports: Vec<EvolveReport>,
    pub final_answer: String,
    pub discrepancy_series: Vec<f64>,
}

impl DiscussionTranscript {
    pub fn rounds_run(&self) -> usize {
        self.discrepancy_series.len()
    }

    pub fn summary(&self) -> TranscriptSummary {
        TranscriptSummary {
            final_answer: self.final_answer.clone(),
            discrepancy_series: self.discrepancy_series.clone(),
        }
    }

    /// One JSON object per turn, then the summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary()).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("round,discrepancy,alpha_mean,violation_mean\n");
        for m in &self.metrics {
            let _ = writeln!(out, "{},{},{},{}", m.round, m.discrepancy, m.alpha_mean, m.violation_mean);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum DiscussionError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("agent {agent} failed in round {round}: {source}")]
    Agent {
        agent: usize,
        round: usize,
        #[source]
        source: AgentError,
        /// Every round completed before the failure.
        partial: Box<DiscussionTranscript>,
    },
}

/// Per-agent trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub generator: InstructionGenerator,
    pub dual: DualState,
}

impl Learner {
    pub fn fresh(agent_id: usize, d_model: usize, n_tokens: usize, beta: f64) -> Result<Self> {
        Ok(Learner {
            generator: InstructionGenerator::new(agent_id, d_model, n_tokens),
            dual: DualState::new(beta)?,
        })
    }
}

/// Shared, read-only pieces of a run.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub block: &'a AttentionBlock,
    pub provider: &'a dyn EmbeddingProvider,
    pub pool: &'a ContextPool,
    pub pool_embeddings: &'a PoolEmbeddings,
    /// `None` selects the first `n_agents` pool entries (fixed-context baseline).
    pub projector: Option<&'a DistilledProjector>,
}

/// Column layout of an assembled context `[I; X̄; P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBundle {
    pub matrix: Matrix,
    pub instruction: Range<usize>,
    pub peers: Vec<Range<usize>>,
    pub problem: Range<usize>,
}

pub fn build_context(instruction: &Matrix, peer_responses: &[Matrix], problem: &Matrix) -> Result<ContextBundle> {
    let mut parts: Vec<&Matrix> = vec![instruction];
    parts.extend(peer_responses.iter());
    parts.push(problem);
    let matrix = concat_columns(&parts)?;
    let mut off = instruction.cols();
    let peers = peer_responses
        .iter()
        .map(|p| {
            let r = off..off + p.cols();
            off += p.cols();
            r
        })
        .collect();
    Ok(ContextBundle {
        matrix,
        instruction: 0..instruction.cols(),
        peers,
        problem: off..off + problem.cols(),
    })
}

/// Trim, lowercase, and collapse internal whitespace.
pub fn canonicalize(answer: &str) -> String {
    answer.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Modal canonical answer; ties go to the tied answer given by the earliest agent.
pub fn majority_vote(answers: &[String]) -> Result<String> {
    if answers.is_empty() {
        return Err(Error::invalid("majority vote over no answers"));
    }
    let canon: Vec<String> = answers.iter().map(|a| canonicalize(a)).collect();
    let mut best = 0;
    let mut best_count = 0;
    for (i, a) in canon.iter().enumerate() {
        let count = canon.iter().filter(|b| *b == a).count();
        if count > best_count {
            best = i;
            best_count = count;
        }
    }
    Ok(canon[best].clone())
}

/// Text after `Answer:` on the last line that has it, else the whole response.
pub fn extract_answer(response: &str) -> String {
    const MARK: &str = "Answer:";
    if let Some(line) = response.lines().rev().find(|l| l.contains(MARK)) {
        let tail = line[line.rfind(MARK).expect("line contains marker") + MARK.len()..].trim();
        if !tail.is_empty() {
            return tail.to_string();
        }
    }
    canonicalize(response)
}

/// Maximum squared pairwise distance between `a([X_i; P])`.
pub fn discrepancy_intensity(block: &AttentionBlock, responses: &[Matrix], problem: &Matrix) -> Result<f64> {
    if responses.len() < 2 {
        return Err(Error::invalid("discrepancy needs at least 2 responses"));
    }
    let acts = responses
        .iter()
        .map(|x| block.activation_of(x, problem))
        .collect::<Result<Vec<_>>>()?;
    max_pairwise_sq(&acts)
}

fn max_pairwise_sq(ms: &[Matrix]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for i in 0..ms.len() {
        for j in i + 1..ms.len() {
            best = best.max(ms[i].sub(&ms[j])?.frobenius_norm().powi(2));
        }
    }
    Ok(best)
}

struct Turn {
    instruction: Matrix,
    instruction_text: String,
    peers: Vec<Matrix>,
    peer_texts: Vec<String>,
    activation_norm: f64,
    violation: f64,
    alpha: f64,
}

/// Runs selection, then `max_rounds` rounds of instruction -> response.
/// `learners` must hold one entry per agent in generated mode and may be
/// empty otherwise.
pub fn run_discussion(
    cfg: &DiscussionConfig,
    pipe: &Pipeline<'_>,
    learners: &mut [Learner],
    agents: &[&dyn AgentBackend],
    problem: &Problem,
) -> std::result::Result<DiscussionTranscript, DiscussionError> {
    cfg.validate()?;
    if agents.len() != cfg.n_agents {
        return Err(Error::dims("agents", cfg.n_agents, agents.len()).into());
    }
    if cfg.mode == InstructionMode::Generated && learners.len() != cfg.n_agents {
        return Err(Error::dims("learners", cfg.n_agents, learners.len()).into());
    }
    if cfg.n_agents > pipe.pool.len() {
        return Err(Error::invalid(format!("pool of {} cannot seed {} agents", pipe.pool.len(), cfg.n_agents)).into());
    }

    let p = pipe.provider.embed_tokens(&problem.text)?;
    let (chosen, selection) = match pipe.projector {
        Some(f) => {
            let v_p = pipe.provider.embed_sentence(&problem.text)?;
            let sel = select_initial_contexts(pipe.pool, pipe.pool_embeddings, &p, &v_p, f, cfg.n_agents, cfg.selection)?;
            let idx: Vec<usize> = sel
                .chosen_ids
                .iter()
                .map(|id| pipe.pool.index_of(id).expect("selected from this pool"))
                .collect();
            (idx, Some(sel))
        }
        None => ((0..cfg.n_agents).collect(), None),
    };
    let init: Vec<&Matrix> = chosen.iter().map(|&i| &pipe.pool_embeddings.tokens[i]).collect();

    let mut tr = DiscussionTranscript {
        problem_key: problem.key.clone(),
        chosen_ids: chosen.iter().map(|&i| pipe.pool.entries()[i].id.clone()).collect(),
        selection,
        ..Default::default()
    };
    let mut prev: Option<Vec<AgentResponse>> = None;

    for round in 1..=cfg.max_rounds {
        let mut turns = Vec::with_capacity(cfg.n_agents);
        for i in 0..cfg.n_agents {
            let (peers, peer_texts): (Vec<Matrix>, Vec<String>) = match &prev {
                Some(xs) => xs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, x)| (x.embedding.clone(), x.text.clone()))
                    .unzip(),
                None => (Vec::new(), Vec::new()),
            };
            let (instruction, decoded) = match (cfg.mode, &prev) {
                (InstructionMode::Generated, _) => (learners[i].generator.generate(&p, init[i], &peers)?, true),
                (InstructionMode::Tracking, Some(xs)) => (xs[i].embedding.clone(), true),
                _ => (init[i].clone(), false),
            };
            let instruction_text = if decoded {
                decode_with_vectors(&instruction, pipe.pool, &pipe.pool_embeddings.sentences, cfg.decode_k)?
            } else {
                render_instruction(&[pipe.pool.entries()[chosen[i]].text.as_str()])
            };
            let activation_norm = pipe.block.activation(&instruction, &peers, &p)?.frobenius_norm();
            let violation = instruction.sub(init[i])?.frobenius_norm() - cfg.beta;
            turns.push(Turn {
                instruction,
                instruction_text,
                peers,
                peer_texts,
                activation_norm,
                violation,
                alpha: learners.get(i).map_or(0.0, |l| l.dual.alpha),
            });
        }

        let results: Vec<std::result::Result<AgentResponse, AgentError>> = turns
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                agents[i].respond(&AgentContext {
                    agent: i,
                    round,
                    problem_key: &problem.key,
                    problem_text: &problem.text,
                    instruction_text: &t.instruction_text,
                    peer_texts: &t.peer_texts,
                    problem_embedding: &p,
                    instruction_embedding: &t.instruction,
                    peer_embeddings: &t.peers,
                })
            })
            .collect();
        let mut responses = Vec::with_capacity(cfg.n_agents);
        for (agent, r) in results.into_iter().enumerate() {
            match r {
                Ok(resp) => responses.push(resp),
                Err(source) => {
                    return Err(DiscussionError::Agent {
                        agent,
                        round,
                        source,
                        partial: Box::new(tr),
                    })
                }
            }
        }

        for (i, (t, r)) in turns.iter().zip(&responses).enumerate() {
            tr.records.push(TurnRecord {
                round,
                agent: i,
                instruction: t.instruction_text.clone(),
                response: r.text.clone(),
                answer: extract_answer(&r.text),
                activation_norm: t.activation_norm,
                alpha: t.alpha,
            });
        }
        let xs: Vec<Matrix> = responses.iter().map(|r| r.embedding.clone()).collect();
        let discrepancy = match cfg.metric {
            DiscrepancyMetric::Activation => discrepancy_intensity(pipe.block, &xs, &p)?,
            DiscrepancyMetric::Embedding => max_pairwise_sq(&xs)?,
        };
        let n = cfg.n_agents as f64;
        tr.metrics.push(RoundMetrics {
            round,
            discrepancy,
            alpha_mean: turns.iter().map(|t| t.alpha).sum::<f64>() / n,
            violation_mean: turns.iter().map(|t| t.violation).sum::<f64>() / n,
        });
        tr.discrepancy_series.push(discrepancy);
        debug!(problem = %problem.key, round, discrepancy, "round complete");

        // Round 1 has no previous responses to align with.
        if cfg.training && cfg.mode == InstructionMode::Generated {
            if let Some(prev_xs) = &prev {
                let reports = learners
                    .par_iter_mut()
                    .zip(turns.par_iter())
                    .enumerate()
                    .map(|(i, (l, t))| {
                        let inputs = EvolveInputs {
                            problem: &p,
                            init_instruction: init[i],
                            prev_own_response: &prev_xs[i].embedding,
                            peer_responses: &t.peers,
                        };
                        evolve_step(pipe.block, &mut l.generator, &mut l.dual, &inputs, cfg.lr_theta, cfg.lr_alpha)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tr.evolve_reports.extend(reports);
            }
        }
        prev = Some(responses);
    }

    let last: Vec<String> = tr.records[tr.records.len() - cfg.n_agents..].iter().map(|r| r.answer.clone()).collect();
    tr.final_answer = majority_vote(&last)?;
    Ok(tr)
}

/// Column means of the given responses; handy for inspecting consensus.
pub fn mean_embedding(responses: &[Matrix]) -> Option<Vector> {
    let first = responses.first()?;
    let mut acc = Vector::zeros(first.rows());
    for r in responses {
        acc = acc.add(&r.column_mean()).ok()?;
    }
    Some(acc.scale(1.0 / responses.len() as f64))
}
