use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use m2cl_core::agents::{AgentBackend, ConsensusMock, ConsensusMockSpec, HttpAgent, HttpAgentSpec};
use m2cl_core::attention::suite::{run_bound_suite, BoundRecord, SuiteOptions};
use m2cl_core::attention::AttentionBlock;
use m2cl_core::context::{distill_projector, train_projection, ContextPool, DistilledProjector, ProjectionSample, TrainOptions, TrainStats};
use m2cl_core::embedding::{EmbedderSpec, EmbeddingProvider, HashEmbedder};
use m2cl_core::engine::{canonicalize, run_discussion, DiscussionConfig, DiscussionError, DiscussionTranscript, InstructionMode, Learner, Pipeline};
use m2cl_core::evolution::{DualState, InstructionGenerator};
use m2cl_core::http::ReqwestTransport;
use m2cl_core::synthetic::{self, QaProblem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::{Backend, RunConfig};
use crate::error::CliError;

/// Offset between the run seed and the attention block's seed, so the block
/// and the token hashes never share a random stream.
const BLOCK_SEED_OFFSET: u64 = 0x6d32_636c;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAINING_METRICS: &str = "training_metrics.csv";
pub const TRANSCRIPT_DIR: &str = "transcripts";
pub const METRICS_DIR: &str = "metrics";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Shared pieces rebuilt identically by every command from the config.
pub struct Runtime {
    pub spec: EmbedderSpec,
    pub embedder: Arc<HashEmbedder>,
    pub block: AttentionBlock,
}

impl Runtime {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let spec = EmbedderSpec {
            d_model: cfg.d_model,
            n_tokens: cfg.n_tokens,
            seed: cfg.seed,
        };
        Ok(Runtime {
            spec,
            embedder: Arc::new(HashEmbedder::new(spec)?),
            block: AttentionBlock::seeded(cfg.d_model, cfg.scale_dim, cfg.seed.wrapping_add(BLOCK_SEED_OFFSET)),
        })
    }
}

fn build_backend(cfg: &RunConfig, rt: &Runtime, problems: &[QaProblem]) -> Result<Box<dyn AgentBackend>, CliError> {
    match cfg.backend {
        Backend::Mock => {
            let spec = ConsensusMockSpec {
                gamma: cfg.gamma,
                noise: cfg.noise,
                seed: cfg.seed,
                answer_table: synthetic::answer_table(problems),
            };
            Ok(Box::new(ConsensusMock::new(spec, rt.embedder.as_ref())?))
        }
        Backend::Http => {
            let mut spec = HttpAgentSpec::new(cfg.endpoint.clone().unwrap_or_default(), cfg.model.clone());
            spec.temperature = cfg.temperature;
            spec.timeout_secs = cfg.timeout_secs;
            spec.max_retries = cfg.max_retries;
            let provider: Arc<dyn EmbeddingProvider> = rt.embedder.clone();
            Ok(Box::new(HttpAgent::from_env(spec, Arc::new(ReqwestTransport::new()), provider)?))
        }
    }
}

fn load_inputs(cfg: &RunConfig) -> Result<(ContextPool, Vec<QaProblem>), CliError> {
    let pool = ContextPool::load(cfg.pool_path()?)?;
    let problems = synthetic::load_problems(cfg.problems_path()?)?;
    if pool.len() < cfg.n_agents {
        return Err(CliError::Validation(format!("pool of {} entries cannot seed {} agents", pool.len(), cfg.n_agents)));
    }
    Ok((pool, problems))
}

pub fn cmd_init_pool(size: usize, seed: u64, out: &Path) -> Result<ContextPool, CliError> {
    let pool = synthetic::generate_pool(size, seed).map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(out, &pool.to_canonical_json())?;
    Ok(pool)
}

pub fn cmd_init_problems(count: usize, seed: u64, out: &Path) -> Result<Vec<QaProblem>, CliError> {
    let problems = synthetic::generate_problems(count, seed).map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(out, &synthetic::problems_to_json(&problems))?;
    Ok(problems)
}

pub fn checkpoint_paths(dir: &Path, n_agents: usize) -> (PathBuf, PathBuf, Vec<PathBuf>) {
    (
        dir.join("projection.bin"),
        dir.join("distilled.bin"),
        (0..n_agents).map(|i| dir.join(format!("generator_{i}.bin"))).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub projection: TrainStats,
    pub distillation: TrainStats,
    pub generator_initial: f64,
    pub generator_final: f64,
    pub violation_final: f64,
}

impl TrainOutcome {
    pub fn improved(&self) -> bool {
        self.projection.improved() && self.distillation.improved() && self.generator_final < self.generator_initial
    }

    pub fn diagnostics(&self) -> String {
        format!(
            "projection {:.6} -> {:.6}, distillation {:.6} -> {:.6}, generator alignment {:.6} -> {:.6}, final violation {:.6}",
            self.projection.initial_loss,
            self.projection.final_loss,
            self.distillation.initial_loss,
            self.distillation.final_loss,
            self.generator_initial,
            self.generator_final,
            self.violation_final,
        )
    }
}

struct GeneratorPass {
    alignment: f64,
    loss: f64,
    violation: f64,
}

/// One discussion per training problem. With `training` off the updates run
/// on throwaway copies, so the pass only measures pre-update alignment.
fn generator_pass(
    cfg: &RunConfig,
    pipe: &Pipeline<'_>,
    learners: &mut [Learner],
    backend: &dyn AgentBackend,
    problems: &[QaProblem],
    training: bool,
) -> Result<GeneratorPass, CliError> {
    let dcfg = DiscussionConfig {
        training: true,
        ..discussion_config(cfg, InstructionMode::Generated)
    };
    let agents: Vec<&dyn AgentBackend> = vec![backend; cfg.n_agents];
    let (mut align, mut loss, mut viol, mut n) = (0.0, 0.0, 0.0, 0usize);
    for p in problems {
        let tr = if training {
            run_discussion(&dcfg, pipe, learners, &agents, &p.problem())?
        } else {
            let mut probe = learners.to_vec();
            run_discussion(&dcfg, pipe, &mut probe, &agents, &p.problem())?
        };
        for r in &tr.evolve_reports {
            align += r.alignment_before;
            loss += r.generator_loss;
            viol += r.constraint_violation;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(GeneratorPass {
        alignment: align / n,
        loss: loss / n,
        violation: viol / n,
    })
}

pub fn discussion_config(cfg: &RunConfig, mode: InstructionMode) -> DiscussionConfig {
    DiscussionConfig {
        n_agents: cfg.n_agents,
        max_rounds: cfg.max_rounds,
        beta: cfg.beta,
        seed: cfg.seed,
        training: false,
        mode,
        selection: cfg.selection,
        metric: cfg.discrepancy,
        lr_theta: cfg.lr_context,
        lr_alpha: cfg.lr_alpha,
        decode_k: cfg.decode_k,
    }
}

fn stats_rows(out: &mut String, phase: &str, stats: &TrainStats) {
    let _ = writeln!(out, "{phase},0,{},,", stats.initial_loss);
    for (e, l) in stats.epoch_losses.iter().enumerate() {
        let _ = writeln!(out, "{phase},{},{l},,", e + 1);
    }
}

/// Trains f, F and one generator per agent on the leading fraction of the
/// problems; writes checkpoints and `training_metrics.csv` under `output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let (pool, problems) = load_inputs(cfg)?;
    let rt = Runtime::new(cfg)?;
    let train = &problems[..cfg.train_count(problems.len())];
    let opts = TrainOptions {
        epochs: cfg.training_epochs,
        lr: cfg.lr_context,
        batch_size: cfg.batch,
        seed: cfg.seed,
    };
    info!(problems = train.len(), epochs = cfg.training_epochs, "training projection");

    let e = rt.embedder.as_ref();
    let mut samples = Vec::with_capacity(train.len());
    let mut problem_tokens = Vec::with_capacity(train.len());
    for p in train {
        let tokens = e.embed_tokens(&p.text)?;
        samples.push(ProjectionSample {
            answer: e.embed_tokens(&p.answer)?,
            problem: tokens.clone(),
            target: e.embed_sentence(&p.text)?,
        });
        problem_tokens.push(tokens);
    }
    let (f, f_stats) = train_projection(&samples, &rt.block, &opts)?;
    let pool_emb = pool.embed(e)?;
    info!("distilling projector");
    let (big_f, d_stats) = distill_projector(&pool_emb.tokens, &problem_tokens, &f, &rt.block, &opts)?;

    let backend = build_backend(cfg, &rt, &problems)?;
    let pipe = Pipeline {
        block: &rt.block,
        provider: e,
        pool: &pool,
        pool_embeddings: &pool_emb,
        projector: Some(&big_f),
    };
    let mut learners: Vec<Learner> = (0..cfg.n_agents)
        .map(|i| {
            Ok(Learner {
                generator: InstructionGenerator::new(i, cfg.d_model, cfg.n_tokens),
                dual: DualState {
                    alpha: 0.0,
                    beta: cfg.beta,
                    alpha_max: cfg.alpha_max,
                },
            })
        })
        .collect::<Result<_, CliError>>()?;

    let mut metrics = String::from("phase,epoch,loss,alpha_mean,violation_mean\n");
    stats_rows(&mut metrics, "projection", &f_stats);
    stats_rows(&mut metrics, "distillation", &d_stats);

    info!("training generators");
    let initial = generator_pass(cfg, &pipe, &mut learners, backend.as_ref(), train, false)?;
    let _ = writeln!(metrics, "generator,0,{},0,{}", initial.alignment, initial.violation);
    let mut last_violation = initial.violation;
    for epoch in 1..=cfg.training_epochs {
        let pass = generator_pass(cfg, &pipe, &mut learners, backend.as_ref(), train, true)?;
        let alpha_mean = learners.iter().map(|l| l.dual.alpha).sum::<f64>() / learners.len() as f64;
        let _ = writeln!(metrics, "generator,{epoch},{},{alpha_mean},{}", pass.loss, pass.violation);
        last_violation = pass.violation;
    }
    let fin = generator_pass(cfg, &pipe, &mut learners, backend.as_ref(), train, false)?;

    let dir = cfg.output_dir.join(CHECKPOINT_DIR);
    create_dir(&dir)?;
    let (f_path, big_f_path, gen_paths) = checkpoint_paths(&dir, cfg.n_agents);
    f.save(&f_path, &rt.spec)?;
    big_f.save(&big_f_path, &rt.spec)?;
    for (l, path) in learners.iter().zip(&gen_paths) {
        l.generator.save(path, cfg.seed, l.dual.alpha)?;
    }
    write_file(&cfg.output_dir.join(TRAINING_METRICS), &metrics)?;

    Ok(TrainOutcome {
        projection: f_stats,
        distillation: d_stats,
        generator_initial: initial.alignment,
        generator_final: fin.alignment,
        violation_final: last_violation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemOutcome {
    pub key: String,
    pub final_answer: String,
    pub answer: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub problems: Vec<ProblemOutcome>,
}

/// Runs every problem and writes one transcript and metrics file per problem
/// plus `summary.json`.
pub fn cmd_discuss(cfg: &RunConfig, fixed_context: bool, checkpoints: Option<&Path>) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let (pool, problems) = load_inputs(cfg)?;
    let rt = Runtime::new(cfg)?;
    let e = rt.embedder.as_ref();
    let pool_emb = pool.embed(e)?;
    let backend = build_backend(cfg, &rt, &problems)?;

    let (projector, learners, mode) = if fixed_context {
        (None, Vec::new(), InstructionMode::Fixed)
    } else {
        let dir = checkpoints.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_DIR));
        let (_, big_f_path, gen_paths) = checkpoint_paths(&dir, cfg.n_agents);
        let big_f = DistilledProjector::load(&big_f_path)?;
        let learners = gen_paths
            .iter()
            .map(|p| {
                let (generator, alpha) = InstructionGenerator::load(p)?;
                if generator.d_model() != cfg.d_model || generator.n_tokens() != cfg.n_tokens {
                    return Err(CliError::Validation(format!("checkpoint {} does not match the configured embedding shape", p.display())));
                }
                Ok(Learner {
                    generator,
                    dual: DualState {
                        alpha,
                        beta: cfg.beta,
                        alpha_max: cfg.alpha_max,
                    },
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        (Some(big_f), learners, InstructionMode::Generated)
    };
    let pipe = Pipeline {
        block: &rt.block,
        provider: e,
        pool: &pool,
        pool_embeddings: &pool_emb,
        projector: projector.as_ref(),
    };
    let dcfg = discussion_config(cfg, mode);
    let agents: Vec<&dyn AgentBackend> = vec![backend.as_ref(); cfg.n_agents];

    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<DiscussionTranscript, DiscussionError>> = threads.install(|| {
        problems
            .par_iter()
            .map(|p| {
                let mut own = learners.clone();
                run_discussion(&dcfg, &pipe, &mut own, &agents, &p.problem())
            })
            .collect()
    });

    let out = &cfg.output_dir;
    let mut outcomes = Vec::with_capacity(problems.len());
    for (p, r) in problems.iter().zip(results) {
        match r {
            Ok(tr) => {
                write_file(&out.join(TRANSCRIPT_DIR).join(format!("{}.jsonl", p.key)), &tr.to_jsonl())?;
                write_file(&out.join(METRICS_DIR).join(format!("{}.csv", p.key)), &tr.metrics_csv())?;
                let correct = canonicalize(&tr.final_answer) == canonicalize(&p.answer);
                outcomes.push(ProblemOutcome {
                    key: p.key.clone(),
                    final_answer: tr.final_answer,
                    answer: p.answer.clone(),
                    correct,
                });
            }
            Err(DiscussionError::Agent { agent, round, source, partial }) => {
                let path = out.join(TRANSCRIPT_DIR).join(format!("{}.partial.jsonl", p.key));
                write_file(&path, &partial.to_jsonl())?;
                warn!(problem = %p.key, agent, round, "backend failure; partial transcript at {}", path.display());
                return Err(CliError::Backend(format!("problem {}: agent {agent} failed in round {round}: {source}", p.key)));
            }
            Err(err) => return Err(err.into()),
        }
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let summary = RunSummary {
        mode: if fixed_context { "fixed-context" } else { "m2cl" }.into(),
        correct,
        total: outcomes.len(),
        accuracy: correct as f64 / outcomes.len() as f64,
        problems: outcomes,
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_file(&out.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}

/// Runs the bound suite, writing JSONL to `out` (or returning it for stdout).
pub fn cmd_verify_bounds(seed: u64, samples: usize, adversarial: bool) -> Result<(Vec<BoundRecord>, String), CliError> {
    if samples == 0 {
        return Err(CliError::Validation("samples must be >= 1".into()));
    }
    let records = run_bound_suite(&SuiteOptions {
        seed,
        samples,
        rescale: !adversarial,
        ..SuiteOptions::default()
    })?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    Ok((records, jsonl))
}

pub fn verification_failures(records: &[BoundRecord]) -> Vec<String> {
    let mut failed: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.holds) {
        failed.entry(r.check.as_str()).or_default().push(r.seed);
    }
    failed
        .into_iter()
        .map(|(check, seeds)| {
            let shown: Vec<String> = seeds.iter().take(5).map(u64::to_string).collect();
            format!("{check} failed for {} seed(s): {}", seeds.len(), shown.join(", "))
        })
        .collect()
}

fn read_metrics(path: &Path) -> Result<Vec<(usize, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split(',');
        let parse_err = || CliError::Validation(format!("malformed metrics row {line:?} in {}", path.display()));
        let round = cols.next().and_then(|c| c.parse().ok()).ok_or_else(parse_err)?;
        let disc = cols.next().and_then(|c| c.parse().ok()).ok_or_else(parse_err)?;
        rows.push((round, disc));
    }
    Ok(rows)
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregates run directories into `discrepancy_by_round.csv` and `accuracy.csv`.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<(String, String), CliError> {
    if runs.is_empty() {
        return Err(CliError::Validation("no run directories given".into()));
    }
    let mut disc = String::from("run_id,round,mean_discrepancy,problems\n");
    let mut acc = String::from("run_id,mode,correct,total,accuracy\n");
    for run in runs {
        let run_id = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let files = sorted_entries(&run.join(METRICS_DIR), "csv")?;
        if files.is_empty() {
            return Err(CliError::Validation(format!("run directory {} has no metrics", run.display())));
        }
        let mut by_round: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for f in &files {
            for (round, d) in read_metrics(f)? {
                let e = by_round.entry(round).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        for (round, (sum, n)) in by_round {
            let _ = writeln!(disc, "{run_id},{round},{},{n}", sum / n as f64);
        }
        let summary_path = run.join(SUMMARY_FILE);
        if summary_path.is_file() {
            let text = std::fs::read_to_string(&summary_path).map_err(|e| CliError::io(&summary_path, e))?;
            let s: RunSummary = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", summary_path.display())))?;
            let _ = writeln!(acc, "{run_id},{},{},{},{}", s.mode, s.correct, s.total, s.accuracy);
        }
    }
    write_file(&out.join("discrepancy_by_round.csv"), &disc)?;
    write_file(&out.join("accuracy.csv"), &acc)?;
    Ok((disc, acc))
}
