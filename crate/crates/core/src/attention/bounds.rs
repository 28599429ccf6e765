use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttentionBlock;
use crate::error::{Error, Result};
use crate::numerics::{concat_columns, frobenius_norm, solve_least_squares, Matrix, Vector};

/// Slack floor: a bound holds when `lhs <= rhs + BOUND_TOLERANCE`.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Inflation applied to the empirical smoothness estimate.
const SMOOTHNESS_INFLATION: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    /// Smoothness constant of the activation map.
    pub l_a: f64,
    /// Bound on `|W_V X|`.
    pub l_v: f64,
    /// Score bound; score norms are kept below `rho^2`.
    pub rho: f64,
    pub samples: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            l_a: 1.0,
            l_v: 1.0,
            rho: 0.5,
            samples: 200,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.l_a) || !positive(self.l_v) || !positive(self.rho) || self.samples == 0 {
            return Err(Error::invalid(format!("bound config must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub slack: f64,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        BoundReport {
            lhs,
            rhs,
            holds: lhs <= rhs + BOUND_TOLERANCE,
            slack: rhs - lhs,
        }
    }
}

fn dist(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(frobenius_norm(&a.sub(b)?))
}

/// Frobenius distance after right-padding the narrower matrix with zeros.
pub(crate) fn padded_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::dims("padded_distance", a.rows(), b.rows()));
    }
    let width = a.cols().max(b.cols());
    dist(&a.pad_columns(width), &b.pad_columns(width))
}

/// Empirical smoothness constant of `C -> a(C)` with queries from `problem`.
///
/// Half of the pairs are small perturbations of one context, half are
/// independent draws; the largest ratio is inflated by 1.5x.
pub fn estimate_smoothness(block: &AttentionBlock, problem: &Matrix, widths: &[usize], pairs: usize, seed: u64) -> Result<f64> {
    if widths.is_empty() || pairs == 0 {
        return Err(Error::invalid("estimate_smoothness needs widths and at least one pair"));
    }
    let d = block.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for k in 0..pairs {
        let width = widths[k % widths.len()];
        let free = width.saturating_sub(problem.cols()).max(1);
        let mut draw = |scale: f64| Matrix::from_fn(d, free, |_, _| rng.random_range(-1.0..1.0) * scale);
        let base = draw(1.0);
        let other = if k % 2 == 0 {
            let mut m = base.clone();
            m.axpy(1.0, &draw(1e-3))?;
            m
        } else {
            draw(1.0)
        };
        let c1 = concat_columns(&[&base, problem])?;
        let c2 = concat_columns(&[&other, problem])?;
        let denom = dist(&c1, &c2)?;
        if denom > 0.0 {
            let ratio = dist(&block.attend(&c1, problem)?, &block.attend(&c2, problem)?)? / denom;
            best = best.max(ratio);
        }
    }
    Ok(best * SMOOTHNESS_INFLATION)
}

/// Total distance of current activations from the correct activation
/// against the consensus, drift, and initial-reconstruction terms.
///
/// Contexts are fully assembled matrices whose trailing columns are `problem`.
pub fn check_theorem1(
    block: &AttentionBlock,
    contexts_t: &[Matrix],
    contexts_b: &[Matrix],
    problem: &Matrix,
    a_c: &Matrix,
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    let n = contexts_t.len();
    if n == 0 || contexts_b.len() != n {
        return Err(Error::dims("check_theorem1 (context lists)", n, contexts_b.len()));
    }
    let act_t = contexts_t
        .iter()
        .map(|c| block.activation_of_context(c, problem))
        .collect::<Result<Vec<_>>>()?;
    let act_b = contexts_b
        .iter()
        .map(|c| block.activation_of_context(c, problem))
        .collect::<Result<Vec<_>>>()?;

    let mut lhs = 0.0;
    for a in &act_t {
        lhs += dist(a_c, a)?;
    }

    let mut pairwise = 0.0;
    for a in &act_t {
        for b in &act_t {
            pairwise += dist(a, b)?;
        }
    }
    let mut drift = 0.0;
    for (ct, cb) in contexts_t.iter().zip(contexts_b) {
        drift += padded_distance(ct, cb)?;
    }
    let drift = (n as f64 + 1.0) * cfg.l_a * drift;

    let basis = Matrix::from_columns(&act_b.iter().map(Matrix::flatten).collect::<Vec<_>>())?;
    let target = a_c.flatten();
    let omega = solve_least_squares(&basis, &target, 0.0)?;
    let reconstruction = basis.mul_vec(&omega)?.sub(&target)?.norm();

    Ok(BoundReport::new(lhs, pairwise + drift + n as f64 * reconstruction))
}

/// Scale factor `s <= 1` such that `|W_V sC| <= l_v` and `|(W_K sC)^T W_Q sQ| <= rho^2`.
pub fn rescale_to_bounds(block: &AttentionBlock, keys_values: &Matrix, query_source: &Matrix, l_v: f64, rho: f64) -> Result<f64> {
    let value_norm = frobenius_norm(&block.wv().matmul(keys_values)?);
    let scores = block.wk().matmul(keys_values)?.t_matmul(&block.wq().matmul(query_source)?)?;
    let score_norm = frobenius_norm(&scores);
    let mut s: f64 = 1.0;
    if value_norm > l_v {
        s = s.min(l_v / value_norm);
    }
    // Scores are quadratic in the common scale.
    if score_norm > rho * rho {
        s = s.min(rho / score_norm.sqrt());
    }
    Ok(s)
}

/// Gap between softmax self-attention and its linear counterpart on `x`.
/// The caller is responsible for scaling `x` into the operator bounds.
pub fn check_softmax_linear_gap(block: &AttentionBlock, x: &Matrix, cfg: &BoundConfig) -> Result<BoundReport> {
    let gap = dist(&block.attend(x, x)?, &block.linear_attend(x, x)?)?;
    let n = x.cols() as f64;
    Ok(BoundReport::new(gap, 3.0 * cfg.l_v * n * (2.0 * cfg.rho * cfg.rho).exp()))
}

/// Relative error of the linear-attention decomposition
/// `a'([Y_1..Y_N]) = sum a'(Y_i) - (N-1) a'(P)`; holds when within tolerance.
pub fn check_linear_decomposition(block: &AttentionBlock, segments: &[Matrix], problem: &Matrix) -> Result<BoundReport> {
    if segments.is_empty() {
        return Err(Error::invalid("linear decomposition needs at least one segment"));
    }
    let whole = block.linear_activation(segments, problem)?;
    let mut parts = block.linear_activation(&[], problem)?.scale(1.0 - segments.len() as f64);
    for seg in segments {
        parts.axpy(1.0, &block.linear_activation(std::slice::from_ref(seg), problem)?)?;
    }
    let scale = frobenius_norm(&whole).max(f64::MIN_POSITIVE);
    Ok(BoundReport::new(dist(&whole, &parts)? / scale, 0.0))
}

/// Softmax decomposition error `|a(Y) - sum a(Y_i) + (N-1) a(P)|`,
/// checked against `9 L_V n N exp(2 rho^2)`.
pub fn check_decomposition_error(block: &AttentionBlock, segments: &[Matrix], problem: &Matrix, cfg: &BoundConfig) -> Result<BoundReport> {
    if segments.is_empty() {
        return Err(Error::invalid("decomposition needs at least one segment"));
    }
    let mut parts: Vec<&Matrix> = segments.iter().collect();
    parts.push(problem);
    let whole = block.attend(&concat_columns(&parts)?, problem)?;
    let n_seg = segments.len() as f64;
    let mut combined = block.attend(problem, problem)?.scale(1.0 - n_seg);
    for seg in segments {
        combined.axpy(1.0, &block.activation_of(seg, problem)?)?;
    }
    let n = problem.cols() as f64;
    let rhs = 9.0 * cfg.l_v * n * n_seg * (2.0 * cfg.rho * cfg.rho).exp();
    Ok(BoundReport::new(dist(&whole, &combined)?, rhs))
}

/// Inputs for the two-agent decoupling bound.
#[derive(Debug, Clone, Copy)]
pub struct AgentPair<'a> {
    pub context_i: &'a Matrix,
    pub instruction_i: &'a Matrix,
    pub prev_response_i: &'a Matrix,
    pub context_j: &'a Matrix,
    pub instruction_j: &'a Matrix,
    pub prev_response_j: &'a Matrix,
    pub problem: &'a Matrix,
    pub n_agents: usize,
}

/// `|a(C_i) - a(C_j)| <= |a(I_i) - a(X_i)| + |a(I_j) - a(X_j)| + 18 L_V n N exp(2 rho^2)`
/// with the problem-conditioned shorthand `a(Z) = a([Z; P])`.
pub fn check_decoupling_bound(block: &AttentionBlock, pair: &AgentPair<'_>, cfg: &BoundConfig) -> Result<BoundReport> {
    let p = pair.problem;
    let lhs = dist(
        &block.activation_of_context(pair.context_i, p)?,
        &block.activation_of_context(pair.context_j, p)?,
    )?;
    let own_i = dist(&block.activation_of(pair.instruction_i, p)?, &block.activation_of(pair.prev_response_i, p)?)?;
    let own_j = dist(&block.activation_of(pair.instruction_j, p)?, &block.activation_of(pair.prev_response_j, p)?)?;
    let n = p.cols() as f64;
    let constant = 18.0 * cfg.l_v * n * pair.n_agents as f64 * (2.0 * cfg.rho * cfg.rho).exp();
    Ok(BoundReport::new(lhs, own_i + own_j + constant))
}

/// Softmax denominator lower bound `sum exp(s_i) >= exp(-rho)` for `|s| <= rho`.
pub fn check_denominator_bound(scores: &Vector, rho: f64) -> Result<BoundReport> {
    let norm = scores.norm();
    if norm > rho * (1.0 + 1e-12) {
        return Err(Error::invalid(format!("score norm {norm} exceeds rho {rho}")));
    }
    let sum: f64 = scores.as_slice().iter().map(|s| s.exp()).sum();
    Ok(BoundReport::new((-rho).exp(), sum))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn report_invariants() {
        let r = BoundReport::new(1.0, 1.0 - 5e-10);
        assert!(r.holds);
        assert!((r.slack + 5e-10).abs() < 1e-15);
        assert!(!BoundReport::new(1.0, 0.5).holds);
    }

    #[test]
    fn theorem1_fixed_point_equality() {
        let block = AttentionBlock::seeded(6, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random(6, 2, &mut rng);
        let i = random(6, 3, &mut rng);
        let c = concat_columns(&[&i, &p]).unwrap();
        let contexts = vec![c.clone(), c.clone(), c.clone()];
        let a_c = block.attend(&c, &p).unwrap();
        let r = check_theorem1(&block, &contexts, &contexts, &p, &a_c, &BoundConfig::default()).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.rhs.abs() < 1e-9);
        assert!(r.holds);
    }

    #[test]
    fn theorem1_single_agent_degenerate() {
        // a_c = a(C^b) + E with E orthogonal to a(C^b): omega = 1 is optimal.
        let block = AttentionBlock::seeded(5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random(5, 2, &mut rng);
        let c = concat_columns(&[&random(5, 2, &mut rng), &p]).unwrap();
        let a = block.attend(&c, &p).unwrap();
        let e = random(5, 2, &mut rng);
        let proj = a.flatten().dot(&e.flatten()) / a.flatten().dot(&a.flatten());
        let mut ortho = e.clone();
        ortho.axpy(-proj, &a).unwrap();
        let a_c = a.add(&ortho).unwrap();
        let r = check_theorem1(&block, &[c.clone()], &[c], &p, &a_c, &BoundConfig::default()).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.slack.abs() < 1e-7);
    }

    #[test]
    fn theorem1_rejects_mismatched_lists() {
        let block = AttentionBlock::seeded(4, 2, 0);
        let p = Matrix::zeros(4, 1);
        let err = check_theorem1(&block, &[p.clone()], &[], &p, &p, &BoundConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn softmax_linear_gap_zero_input() {
        let block = AttentionBlock::seeded(4, 3, 3);
        let r = check_softmax_linear_gap(&block, &Matrix::zeros(4, 4), &BoundConfig::default()).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn softmax_linear_gap_rescaled_instance() {
        let cfg = BoundConfig {
            rho: 0.5,
            l_v: 1.0,
            ..BoundConfig::default()
        };
        let block = AttentionBlock::seeded(6, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(6, 4, &mut rng);
        let s = rescale_to_bounds(&block, &x, &x, cfg.l_v, cfg.rho).unwrap();
        let x = x.scale(s);
        assert!(frobenius_norm(&block.wv().matmul(&x).unwrap()) <= cfg.l_v + 1e-12);
        let r = check_softmax_linear_gap(&block, &x, &cfg).unwrap();
        assert!(r.holds, "{r:?}");
    }

    #[test]
    fn decoupling_agreement_case() {
        let block = AttentionBlock::seeded(5, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random(5, 2, &mut rng);
        let i = random(5, 2, &mut rng);
        let c = concat_columns(&[&i, &i, &p]).unwrap();
        let pair = AgentPair {
            context_i: &c,
            instruction_i: &i,
            prev_response_i: &i,
            context_j: &c,
            instruction_j: &i,
            prev_response_j: &i,
            problem: &p,
            n_agents: 2,
        };
        let r = check_decoupling_bound(&block, &pair, &BoundConfig::default()).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn denominator_examples() {
        let rho = 0.7;
        let r = check_denominator_bound(&Vector::new(vec![-rho]), rho).unwrap();
        assert!((r.lhs - r.rhs).abs() < 1e-12);
        assert!(r.holds);

        let r = check_denominator_bound(&Vector::zeros(5), rho).unwrap();
        assert_eq!(r.rhs, 5.0);
        assert!(r.holds);

        assert!(check_denominator_bound(&Vector::new(vec![1.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn linear_decomposition_single_segment_is_exact() {
        let block = AttentionBlock::seeded(5, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random(5, 2, &mut rng);
        let y = random(5, 3, &mut rng);
        let r = check_linear_decomposition(&block, &[y], &p).unwrap();
        assert_eq!(r.lhs, 0.0);
    }

    #[test]
    fn linear_decomposition_two_segments() {
        let block = AttentionBlock::seeded(5, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = random(5, 2, &mut rng);
        let y1 = random(5, 2, &mut rng);
        let y2 = random(5, 3, &mut rng);
        // Both sides evaluated directly.
        let whole = block.linear_activation(&[y1.clone(), y2.clone()], &p).unwrap();
        let mut parts = block.linear_activation(std::slice::from_ref(&y1), &p).unwrap();
        parts.axpy(1.0, &block.linear_activation(std::slice::from_ref(&y2), &p).unwrap()).unwrap();
        parts.axpy(-1.0, &block.linear_activation(&[], &p).unwrap()).unwrap();
        let rel = frobenius_norm(&whole.sub(&parts).unwrap()) / frobenius_norm(&whole);
        assert!(rel < 1e-9);
        assert!(check_linear_decomposition(&block, &[y1, y2], &p).unwrap().holds);
    }

    #[test]
    fn smoothness_estimate_is_positive_and_deterministic() {
        let block = AttentionBlock::seeded(6, 4, 8);
        let p = Matrix::from_fn(6, 2, |r, c| ((r + c) as f64).sin());
        let a = estimate_smoothness(&block, &p, &[4, 6], 50, 3).unwrap();
        let b = estimate_smoothness(&block, &p, &[4, 6], 50, 3).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }
}
