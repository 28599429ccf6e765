//! The projection `f` (activation -> sentence space) and its distilled
//! surrogate `F` (raw `[I; P]` embedding -> sentence space).
//!
//! Both are affine maps over column means of their inputs, trained with Adam
//! on the unsquared residual norm.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::checkpoint::{self, Sidecar, CHECKPOINT_VERSION};
use crate::config;
use crate::embedding::EmbedderSpec;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: config::TRAINING_EPOCHS,
            lr: config::LR_CONTEXT,
            batch_size: config::BATCH_SIZE,
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the full training set after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainStats {
    pub fn improved(&self) -> bool {
        self.final_loss < self.initial_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AffineHead {
    w: Matrix,
    b: Vector,
}

impl AffineHead {
    fn apply(&self, x: &[f64]) -> Vector {
        let mut out = self.b.clone().into_vec();
        let cols = self.w.cols();
        for (r, o) in out.iter_mut().enumerate() {
            *o += crate::numerics::dot(&self.w.data()[r * cols..(r + 1) * cols], x);
        }
        Vector::new(out)
    }

    fn n_params(&self) -> usize {
        self.w.data().len() + self.b.dim()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.w.data().to_vec();
        p.extend_from_slice(self.b.as_slice());
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let nw = self.w.data().len();
        self.w.data_mut().copy_from_slice(&p[..nw]);
        self.b = Vector::new(p[nw..].to_vec());
    }

    fn from_params(rows: usize, cols: usize, p: &[f64]) -> Result<Self> {
        if p.len() != rows * cols + rows {
            return Err(Error::dims("affine parameters", rows * cols + rows, p.len()));
        }
        Ok(AffineHead {
            w: Matrix::from_vec(rows, cols, p[..rows * cols].to_vec())?,
            b: Vector::new(p[rows * cols..].to_vec()),
        })
    }

    fn mean_loss(&self, xs: &[Vec<f64>], ys: &[Vector]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| self.apply(x).sub(y).expect("dims checked").norm())
            .sum();
        total / xs.len() as f64
    }

    /// Mini-batch Adam on `mean_k |W x_k + b - y_k|`. Keeps the best
    /// parameters seen (initialization included), so the final loss never
    /// exceeds the initial one.
    fn train(&mut self, xs: &[Vec<f64>], ys: &[Vector], opts: &TrainOptions) -> Result<TrainStats> {
        opts.validate()?;
        if xs.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let (rows, cols) = self.w.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(self.n_params(), opts.lr);
        let initial = self.mean_loss(xs, ys);
        let mut best = (initial, self.params());
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut params = self.params();
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(opts.batch_size) {
                let mut grad = vec![0.0; params.len()];
                let inv = 1.0 / batch.len() as f64;
                for &k in batch {
                    let r = self.apply(&xs[k]).sub(&ys[k])?;
                    let n = r.norm();
                    if n == 0.0 {
                        continue;
                    }
                    for i in 0..rows {
                        let g = r[i] / n * inv;
                        for (j, x) in xs[k].iter().enumerate() {
                            grad[i * cols + j] += g * x;
                        }
                        grad[rows * cols + i] += g;
                    }
                }
                if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteGradient { index });
                }
                adam.step(&mut params, &grad);
                self.set_params(&params);
            }
            let loss = self.mean_loss(xs, ys);
            if !loss.is_finite() {
                return Err(Error::NonFinite("projection training"));
            }
            if loss < best.0 {
                best = (loss, params.clone());
            }
            epoch_losses.push(loss);
        }
        self.set_params(&best.1);
        Ok(TrainStats {
            initial_loss: initial,
            final_loss: best.0,
            epoch_losses,
        })
    }
}

fn save_head(head: &AffineHead, kind: &str, path: &Path, spec: &EmbedderSpec) -> Result<()> {
    let params = head.params();
    let sidecar = Sidecar {
        kind: kind.into(),
        d_model: spec.d_model,
        n_tokens: spec.n_tokens,
        agent_id: None,
        seed: spec.seed,
        version: CHECKPOINT_VERSION,
        n_params: params.len(),
        alpha: None,
    };
    checkpoint::write(path, &params, &sidecar)
}

/// `f(a) = W mean_cols(a) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    head: AffineHead,
}

/// One `(answer, problem)` pair with the problem's sentence vector as target.
#[derive(Debug, Clone)]
pub struct ProjectionSample {
    pub answer: Matrix,
    pub problem: Matrix,
    pub target: Vector,
}

impl ProjectionModel {
    pub const KIND: &'static str = "projection";

    /// `W = I`, `b = 0`.
    pub fn identity(d_model: usize) -> Self {
        ProjectionModel {
            head: AffineHead {
                w: Matrix::identity(d_model),
                b: Vector::zeros(d_model),
            },
        }
    }

    pub fn d_model(&self) -> usize {
        self.head.w.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.head.w
    }

    pub fn bias(&self) -> &Vector {
        &self.head.b
    }

    pub fn apply(&self, activation: &Matrix) -> Result<Vector> {
        if activation.rows() != self.d_model() {
            return Err(Error::dims("projection", self.d_model(), activation.rows()));
        }
        Ok(self.head.apply(activation.column_mean().as_slice()))
    }

    pub fn save(&self, path: &Path, spec: &EmbedderSpec) -> Result<()> {
        save_head(&self.head, Self::KIND, path, spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, sc) = checkpoint::read(path, Self::KIND)?;
        Ok(ProjectionModel {
            head: AffineHead::from_params(sc.d_model, sc.d_model, &p)?,
        })
    }
}

/// Trains `f` to map `a([A; P])` onto the problem's sentence vector.
pub fn train_projection(samples: &[ProjectionSample], block: &AttentionBlock, opts: &TrainOptions) -> Result<(ProjectionModel, TrainStats)> {
    if samples.is_empty() {
        return Err(Error::invalid("projection training needs at least one pair"));
    }
    let d = block.d_model();
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        if s.target.dim() != d {
            return Err(Error::dims("projection target", d, s.target.dim()));
        }
        xs.push(block.activation_of(&s.answer, &s.problem)?.column_mean().into_vec());
        ys.push(s.target.clone());
    }
    let mut model = ProjectionModel::identity(d);
    let stats = model.head.train(&xs, &ys, opts)?;
    Ok((model, stats))
}

/// `F([I; P]) = W_I mean_cols(I) + W_P mean_cols(P) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledProjector {
    head: AffineHead,
}

impl DistilledProjector {
    pub const KIND: &'static str = "distilled";

    /// `W_I = I`, `W_P = 0`, `b = 0`: the image of an instruction is its mean token.
    pub fn identity(d_model: usize) -> Self {
        let w = Matrix::from_fn(d_model, 2 * d_model, |r, c| if r == c { 1.0 } else { 0.0 });
        DistilledProjector {
            head: AffineHead {
                w,
                b: Vector::zeros(d_model),
            },
        }
    }

    pub fn d_model(&self) -> usize {
        self.head.w.rows()
    }

    fn features(&self, instruction: &Matrix, problem: &Matrix) -> Result<Vec<f64>> {
        let d = self.d_model();
        if instruction.rows() != d || problem.rows() != d {
            return Err(Error::dims(
                "distilled projector",
                d,
                format!("{} and {}", instruction.rows(), problem.rows()),
            ));
        }
        let mut x = instruction.column_mean().into_vec();
        x.extend_from_slice(problem.column_mean().as_slice());
        Ok(x)
    }

    pub fn apply(&self, instruction: &Matrix, problem: &Matrix) -> Result<Vector> {
        Ok(self.head.apply(&self.features(instruction, problem)?))
    }

    pub fn save(&self, path: &Path, spec: &EmbedderSpec) -> Result<()> {
        save_head(&self.head, Self::KIND, path, spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, sc) = checkpoint::read(path, Self::KIND)?;
        Ok(DistilledProjector {
            head: AffineHead::from_params(sc.d_model, 2 * sc.d_model, &p)?,
        })
    }
}

/// Fits `F` to `f(a([I; P]))` over every pool instruction and problem.
pub fn distill_projector(
    pool_tokens: &[Matrix],
    problems: &[Matrix],
    f: &ProjectionModel,
    block: &AttentionBlock,
    opts: &TrainOptions,
) -> Result<(DistilledProjector, TrainStats)> {
    if pool_tokens.is_empty() || problems.is_empty() {
        return Err(Error::invalid("distillation needs a non-empty pool and problem set"));
    }
    let mut model = DistilledProjector::identity(block.d_model());
    let mut xs = Vec::with_capacity(pool_tokens.len() * problems.len());
    let mut ys = Vec::with_capacity(xs.capacity());
    for p in problems {
        for i in pool_tokens {
            xs.push(model.features(i, p)?);
            ys.push(f.apply(&block.activation_of(i, p)?)?);
        }
    }
    let stats = model.head.train(&xs, &ys, opts)?;
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingProvider, HashEmbedder};

    fn setup(d: usize) -> (AttentionBlock, HashEmbedder) {
        let spec = EmbedderSpec {
            d_model: d,
            n_tokens: 4,
            seed: 1,
        };
        (AttentionBlock::seeded(d, 8, 5), HashEmbedder::new(spec).unwrap())
    }

    fn sample(e: &HashEmbedder, q: &str, a: &str) -> ProjectionSample {
        ProjectionSample {
            answer: e.embed_tokens(a).unwrap(),
            problem: e.embed_tokens(q).unwrap(),
            target: e.embed_sentence(q).unwrap(),
        }
    }

    fn opts(epochs: usize, lr: f64) -> TrainOptions {
        TrainOptions {
            epochs,
            lr,
            batch_size: 32,
            seed: 3,
        }
    }

    #[test]
    fn single_pair_interpolates() {
        let (block, e) = setup(16);
        let s = [sample(&e, "what is two plus two", "four")];
        let (m, stats) = train_projection(&s, &block, &opts(3000, 1e-2)).unwrap();
        assert!(stats.final_loss <= 1e-3, "{}", stats.final_loss);
        let r = m.apply(&block.activation_of(&s[0].answer, &s[0].problem).unwrap()).unwrap();
        assert!(r.sub(&s[0].target).unwrap().norm() <= 1e-3);
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let (block, e) = setup(16);
        let s = [sample(&e, "alpha beta", "gamma"), sample(&e, "delta", "eps")];
        let (m, stats) = train_projection(&s, &block, &opts(5, 0.0)).unwrap();
        assert_eq!(m, ProjectionModel::identity(16));
        assert_eq!(stats.final_loss, stats.initial_loss);
        assert!(!stats.improved());
        assert!(train_projection(&[], &block, &opts(1, 1e-3)).is_err());
    }

    #[test]
    fn twenty_pairs_halve_loss() {
        let (block, e) = setup(32);
        let s: Vec<_> = (0..20)
            .map(|i| sample(&e, &format!("question {i} about topic{}", i % 5), &format!("answer{i}")))
            .collect();
        let (_, stats) = train_projection(&s, &block, &opts(200, 1e-2)).unwrap();
        assert!(stats.final_loss <= 0.5 * stats.initial_loss, "{stats:?}");
    }

    #[test]
    fn distillation_examples() {
        let (block, e) = setup(16);
        let f = ProjectionModel::identity(16);
        let i = vec![e.embed_tokens("consider edge cases").unwrap()];
        let p = vec![e.embed_tokens("sort the list").unwrap()];
        let (_, stats) = distill_projector(&i, &p, &f, &block, &opts(3000, 1e-2)).unwrap();
        assert!(stats.final_loss <= 1e-3, "{}", stats.final_loss);

        let pool: Vec<Matrix> = (0..10).map(|k| e.embed_tokens(&format!("style{k} check w{}", k % 3)).unwrap()).collect();
        let problems: Vec<Matrix> = (0..5).map(|k| e.embed_tokens(&format!("problem {k} q{}", k * 2)).unwrap()).collect();
        let (big, stats) = distill_projector(&pool, &problems, &f, &block, &opts(500, 1e-2)).unwrap();
        assert!(stats.final_loss <= 0.5 * stats.initial_loss, "{stats:?}");

        let a = big.apply(&pool[0], &problems[1]).unwrap();
        let dup = big.apply(&pool[0].clone(), &problems[1]).unwrap();
        assert_eq!(a, dup);
    }

    #[test]
    fn checkpoints_round_trip() {
        let (block, e) = setup(8);
        let s = [sample(&e, "x y", "z")];
        let (m, _) = train_projection(&s, &block, &opts(10, 1e-2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let spec = e.spec();
        m.save(&dir.path().join("f.bin"), &spec).unwrap();
        assert_eq!(ProjectionModel::load(&dir.path().join("f.bin")).unwrap(), m);
        let fp = DistilledProjector::identity(8);
        fp.save(&dir.path().join("F.bin"), &spec).unwrap();
        assert_eq!(DistilledProjector::load(&dir.path().join("F.bin")).unwrap(), fp);
        assert!(DistilledProjector::load(&dir.path().join("f.bin")).is_err());
    }
}
