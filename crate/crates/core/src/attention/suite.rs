//! Seeded randomized sweep over every bound checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bounds::{
    check_decomposition_error, check_decoupling_bound, check_denominator_bound, check_linear_decomposition,
    check_softmax_linear_gap, check_theorem1, estimate_smoothness, rescale_to_bounds, AgentPair, BoundConfig,
    BoundReport,
};
use super::AttentionBlock;
use crate::error::Result;
use crate::numerics::{concat_columns, Matrix, Vector};

/// Inputs are inflated by this factor when rescaling is disabled.
const ADVERSARIAL_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Theorem1,
    LemmaB1,
    LemmaC1,
    LemmaC2,
    LemmaC3,
    LemmaC4,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Theorem1,
        Check::LemmaB1,
        Check::LemmaC1,
        Check::LemmaC2,
        Check::LemmaC3,
        Check::LemmaC4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Theorem1 => "theorem1",
            Check::LemmaB1 => "lemma_b1",
            Check::LemmaC1 => "lemma_c1",
            Check::LemmaC2 => "lemma_c2",
            Check::LemmaC3 => "lemma_c3",
            Check::LemmaC4 => "lemma_c4",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub samples: usize,
    /// Scale inputs into the operator bounds before checking.
    pub rescale: bool,
    pub d_model: usize,
    pub n_tokens: usize,
    pub scale_dim: usize,
    pub n_agents: usize,
    pub smoothness_pairs: usize,
    pub bounds: BoundConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            samples: 200,
            rescale: true,
            d_model: 16,
            n_tokens: 3,
            scale_dim: 8,
            n_agents: 3,
            smoothness_pairs: 1000,
            bounds: BoundConfig::default(),
        }
    }
}

/// One JSONL line of the bound report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub check: String,
    pub seed: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub slack: f64,
}

impl BoundRecord {
    fn new(check: Check, seed: u64, r: BoundReport) -> Self {
        BoundRecord {
            check: check.name().to_string(),
            seed,
            lhs: r.lhs,
            rhs: r.rhs,
            holds: r.holds,
            slack: r.slack,
        }
    }
}

fn unit_columns(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    for c in 0..n {
        let col = m.column(c).normalized().unwrap_or_else(|| Vector::basis(d, 0));
        m.set_column(c, &col);
    }
    m
}

struct Suite<'a> {
    opts: &'a SuiteOptions,
    block: AttentionBlock,
    /// Empirical smoothness constant used by the theorem check.
    l_a: f64,
}

impl Suite<'_> {
    fn rng(&self, check: Check, instance: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        rng.set_stream(check.stream());
        rng
    }

    fn scale_inputs(&self, factor: f64, inputs: &mut [&mut Matrix]) {
        let s = if self.opts.rescale { factor } else { ADVERSARIAL_SCALE };
        for m in inputs.iter_mut() {
            **m = m.scale(s);
        }
    }

    fn theorem1(&self, instance: u64) -> Result<BoundReport> {
        let o = self.opts;
        let mut rng = self.rng(Check::Theorem1, instance);
        let p = unit_columns(o.d_model, o.n_tokens, &mut rng);
        let initial: Vec<Matrix> = (0..o.n_agents).map(|_| unit_columns(o.d_model, o.n_tokens, &mut rng)).collect();
        let responses: Vec<Matrix> = (0..o.n_agents).map(|_| unit_columns(o.d_model, o.n_tokens, &mut rng)).collect();
        let answer = unit_columns(o.d_model, o.n_tokens, &mut rng);

        let mut contexts_t = Vec::with_capacity(o.n_agents);
        let mut contexts_b = Vec::with_capacity(o.n_agents);
        for (i, ib) in initial.iter().enumerate() {
            let mut it = ib.clone();
            it.axpy(0.3, &unit_columns(o.d_model, o.n_tokens, &mut rng))?;
            let mut parts: Vec<&Matrix> = vec![&it];
            parts.extend(responses.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x));
            parts.push(&p);
            contexts_t.push(concat_columns(&parts)?);
            contexts_b.push(concat_columns(&[ib, &p])?);
        }
        let a_c = self.block.activation_of(&answer, &p)?;
        let cfg = BoundConfig {
            l_a: self.l_a,
            ..o.bounds
        };
        check_theorem1(&self.block, &contexts_t, &contexts_b, &p, &a_c, &cfg)
    }

    fn lemma_b1(&self, instance: u64) -> Result<BoundReport> {
        let o = self.opts;
        let mut rng = self.rng(Check::LemmaB1, instance);
        let mut p = unit_columns(o.d_model, o.n_tokens, &mut rng);
        let mut instr: Vec<Matrix> = (0..o.n_agents).map(|_| unit_columns(o.d_model, o.n_tokens, &mut rng)).collect();
        let mut prev: Vec<Matrix> = (0..o.n_agents).map(|_| unit_columns(o.d_model, o.n_tokens, &mut rng)).collect();

        let assemble = |instr: &[Matrix], prev: &[Matrix], p: &Matrix| -> Result<Vec<Matrix>> {
            (0..instr.len())
                .map(|i| {
                    let mut parts: Vec<&Matrix> = vec![&instr[i]];
                    parts.extend(prev.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x));
                    parts.push(p);
                    concat_columns(&parts)
                })
                .collect()
        };

        let mut factor: f64 = 1.0;
        let contexts = assemble(&instr, &prev, &p)?;
        for c in &contexts {
            factor = factor.min(rescale_to_bounds(&self.block, c, &p, o.bounds.l_v, o.bounds.rho)?);
        }
        for seg in instr.iter().chain(&prev) {
            let c = concat_columns(&[seg, &p])?;
            factor = factor.min(rescale_to_bounds(&self.block, &c, &p, o.bounds.l_v, o.bounds.rho)?);
        }
        {
            let mut all: Vec<&mut Matrix> = vec![&mut p];
            all.extend(instr.iter_mut());
            all.extend(prev.iter_mut());
            self.scale_inputs(factor, &mut all);
        }
        let contexts = assemble(&instr, &prev, &p)?;
        let pair = AgentPair {
            context_i: &contexts[0],
            instruction_i: &instr[0],
            prev_response_i: &prev[0],
            context_j: &contexts[1],
            instruction_j: &instr[1],
            prev_response_j: &prev[1],
            problem: &p,
            n_agents: o.n_agents,
        };
        check_decoupling_bound(&self.block, &pair, &o.bounds)
    }

    fn lemma_c1(&self, instance: u64) -> Result<BoundReport> {
        let o = self.opts;
        let mut rng = self.rng(Check::LemmaC1, instance);
        let mut x = unit_columns(o.d_model, o.n_tokens + 1, &mut rng);
        let factor = rescale_to_bounds(&self.block, &x, &x, o.bounds.l_v, o.bounds.rho)?;
        self.scale_inputs(factor, &mut [&mut x]);
        check_softmax_linear_gap(&self.block, &x, &o.bounds)
    }

    fn lemma_c2(&self, instance: u64) -> Result<BoundReport> {
        let o = self.opts;
        let mut rng = self.rng(Check::LemmaC2, instance);
        let n_segments = (instance % 5) as usize + 1;
        let p = unit_columns(o.d_model, o.n_tokens, &mut rng);
        let segments: Vec<Matrix> = (0..n_segments)
            .map(|_| {
                let width = rng.random_range(1..=o.n_tokens + 1);
                unit_columns(o.d_model, width, &mut rng)
            })
            .collect();
        check_linear_decomposition(&self.block, &segments, &p)
    }

    fn lemma_c3(&self, instance: u64) -> Result<BoundReport> {
        let o = self.opts;
        let mut rng = self.rng(Check::LemmaC3, instance);
        let mut p = unit_columns(o.d_model, o.n_tokens, &mut rng);
        let mut segments: Vec<Matrix> = (0..o.n_agents).map(|_| unit_columns(o.d_model, o.n_tokens, &mut rng)).collect();
        let mut parts: Vec<&Matrix> = segments.iter().collect();
        parts.push(&p);
        let whole = concat_columns(&parts)?;
        let factor = rescale_to_bounds(&self.block, &whole, &p, o.bounds.l_v, o.bounds.rho)?;
        {
            let mut all: Vec<&mut Matrix> = vec![&mut p];
            all.extend(segments.iter_mut());
            self.scale_inputs(factor, &mut all);
        }
        check_decomposition_error(&self.block, &segments, &p, &o.bounds)
    }

    fn lemma_c4(&self, instance: u64) -> Result<BoundReport> {
        let o = self.opts;
        let mut rng = self.rng(Check::LemmaC4, instance);
        let n = (instance % 8) as usize + 1;
        let rho = o.bounds.rho;
        let direction = Vector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let direction = direction.normalized().unwrap_or_else(|| Vector::basis(n, 0));
        let radius = rho * rng.random_range(0.0..=1.0);
        check_denominator_bound(&direction.scale(radius), rho)
    }
}

/// Runs every checker on `samples` seeded instances; one record per check and instance.
pub fn run_bound_suite(opts: &SuiteOptions) -> Result<Vec<BoundRecord>> {
    opts.bounds.validate()?;
    let block = AttentionBlock::seeded(opts.d_model, opts.scale_dim, opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0);
    let probe = unit_columns(opts.d_model, opts.n_tokens, &mut rng);
    let widths = [2 * opts.n_tokens, (opts.n_agents + 1) * opts.n_tokens];
    let l_a = estimate_smoothness(&block, &probe, &widths, opts.smoothness_pairs, opts.seed)?;
    let suite = Suite { opts, block, l_a };

    let mut out = Vec::with_capacity(opts.samples * Check::ALL.len());
    for k in 0..opts.samples as u64 {
        let instance = opts.seed.wrapping_add(k);
        for check in Check::ALL {
            let report = match check {
                Check::Theorem1 => suite.theorem1(instance)?,
                Check::LemmaB1 => suite.lemma_b1(instance)?,
                Check::LemmaC1 => suite.lemma_c1(instance)?,
                Check::LemmaC2 => suite.lemma_c2(instance)?,
                Check::LemmaC3 => suite.lemma_c3(instance)?,
                Check::LemmaC4 => suite.lemma_c4(instance)?,
            };
            out.push(BoundRecord::new(check, instance, report));
        }
    }
    Ok(out)
}
