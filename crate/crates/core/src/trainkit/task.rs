use alloc::vec::Vec;

use crate::rng::{streams, CounterRng};
use crate::{Error, Matrix, Result};

/// Training targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

/// Fixed random two-layer ReLU teacher with additive Gaussian label noise.
/// Loss is mean squared error over batch and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent {
    w1: Matrix,
    w2: Matrix,
    pub noise: f64,
    seed: u64,
}

impl TeacherStudent {
    pub fn new(input: usize, hidden: usize, output: usize, noise: f64, seed: u64) -> Self {
        let rng = CounterRng::new(seed);
        let mut s1 = rng.stream(streams::INIT, 0);
        let s = libm::sqrt(2.0 / input as f64);
        let w1 = Matrix::from_fn(hidden, input, |_, _| s * s1.next_gaussian());
        let mut s2 = rng.stream(streams::INIT, 1);
        let s = libm::sqrt(1.0 / hidden as f64);
        let w2 = Matrix::from_fn(output, hidden, |_, _| s * s2.next_gaussian());
        Self { w1, w2, noise, seed }
    }

    fn sample(&self, rows: usize, rng: &CounterRng, index: u64) -> (Matrix, Targets) {
        let mut s = rng.stream(streams::DATA, index);
        let x = Matrix::from_fn(rows, self.w1.cols(), |_, _| s.next_gaussian());
        let h = x.matmul_nt(&self.w1).expect("teacher shapes").map(|v| v.max(0.0));
        let mut y = h.matmul_nt(&self.w2).expect("teacher shapes");
        y.as_mut_slice().iter_mut().for_each(|v| *v += self.noise * s.next_gaussian());
        (x, Targets::Regression(y))
    }
}

/// Next-token prediction on a random order-2 Markov chain over `vocab`
/// symbols. The input is the one-hot encoding of the two previous tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTask {
    vocab: usize,
    /// Cumulative transition distribution, row `a * vocab + b`.
    cdf: Vec<f64>,
    seed: u64,
}

impl SequenceTask {
    /// `temperature` controls how peaked the transitions are (lower = more
    /// predictable).
    pub fn new(vocab: usize, temperature: f64, seed: u64) -> Self {
        let mut s = CounterRng::new(seed).stream(streams::INIT, 0);
        let mut cdf = Vec::with_capacity(vocab * vocab * vocab);
        for _ in 0..vocab * vocab {
            let w: Vec<f64> = (0..vocab).map(|_| libm::exp(s.next_gaussian() / temperature)).collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for v in w {
                acc += v / total;
                cdf.push(acc);
            }
        }
        Self { vocab, cdf, seed }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn next_token(&self, a: usize, b: usize, u: f64) -> usize {
        let row = &self.cdf[(a * self.vocab + b) * self.vocab..][..self.vocab];
        row.iter().position(|&c| u < c).unwrap_or(self.vocab - 1)
    }

    fn sample(&self, rows: usize, rng: &CounterRng, index: u64) -> (Matrix, Targets) {
        let mut s = rng.stream(streams::DATA, index);
        let v = self.vocab;
        let mut x = Matrix::zeros(rows, 2 * v);
        let mut classes = Vec::with_capacity(rows);
        for i in 0..rows {
            // Contexts drawn uniformly so every transition row gets coverage.
            let a = (s.next_u32() as usize) % v;
            let b = (s.next_u32() as usize) % v;
            x.set(i, a, 1.0);
            x.set(i, v + b, 1.0);
            classes.push(self.next_token(a, b, s.next_f64()));
        }
        (x, Targets::Classes(classes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    TeacherStudent(TeacherStudent),
    Sequence(SequenceTask),
}

const EVAL_TAG: u64 = u64::MAX;

impl Task {
    /// The task used for the backward-rounding comparison: next-token
    /// prediction with cross-entropy, whose entropy floor plays the role of
    /// a language model's irreducible loss.
    pub fn default_task() -> Self {
        Self::default_sequence()
    }

    /// Layer widths of the student trained on [`Task::default_task`].
    pub fn default_dims() -> [usize; 4] {
        [64, 128, 128, 32]
    }

    pub fn default_sequence() -> Self {
        Task::Sequence(SequenceTask::new(32, 0.5, 2024))
    }

    pub fn default_regression() -> Self {
        Task::TeacherStudent(TeacherStudent::new(64, 64, 32, 0.5, 2024))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Task::TeacherStudent(t) => t.w1.cols(),
            Task::Sequence(t) => 2 * t.vocab,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Task::TeacherStudent(t) => t.w2.rows(),
            Task::Sequence(t) => t.vocab,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Task::TeacherStudent(t) => t.seed,
            Task::Sequence(t) => t.seed,
        }
    }

    /// Training batch number `index` for a run seeded with `data_seed`.
    pub fn batch(&self, rows: usize, data_seed: u64, index: u64) -> (Matrix, Targets) {
        let rng = CounterRng::new(data_seed);
        match self {
            Task::TeacherStudent(t) => t.sample(rows, &rng, index),
            Task::Sequence(t) => t.sample(rows, &rng, index),
        }
    }

    /// Held-out set, fixed by the task alone.
    pub fn eval_set(&self, rows: usize) -> (Matrix, Targets) {
        let rng = CounterRng::new(self.seed()).derive(&[EVAL_TAG]);
        self.batch(rows, rng.seed(), 0)
    }

    /// Mean loss over the batch and its gradient w.r.t. `output`.
    pub fn loss_and_grad(&self, output: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
        match targets {
            Targets::Regression(t) => {
                if t.shape() != output.shape() {
                    return Err(Error::ShapeMismatch("regression targets".into()));
                }
                let n = (output.rows() * output.cols()) as f64;
                let mut grad = Matrix::zeros(output.rows(), output.cols());
                let mut loss = 0.0;
                for ((g, &y), &t) in grad.as_mut_slice().iter_mut().zip(output.as_slice()).zip(t.as_slice()) {
                    let r = y - t;
                    loss += r * r;
                    *g = 2.0 * r / n;
                }
                Ok((loss / n, grad))
            }
            Targets::Classes(c) => {
                if c.len() != output.rows() || c.iter().any(|&k| k >= output.cols()) {
                    return Err(Error::ShapeMismatch("class targets".into()));
                }
                let b = output.rows() as f64;
                let mut grad = Matrix::zeros(output.rows(), output.cols());
                let mut loss = 0.0;
                for (i, &k) in c.iter().enumerate() {
                    let row = output.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
                    loss += libm::log(z) + m - row[k];
                    for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                        let p = libm::exp(row[j] - m) / z;
                        *g = (p - if j == k { 1.0 } else { 0.0 }) / b;
                    }
                }
                Ok((loss / b, grad))
            }
        }
    }
}
