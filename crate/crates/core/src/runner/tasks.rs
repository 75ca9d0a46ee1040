use rand::Rng;

use crate::error::Result;
use crate::linalg::{gaussian_fill, matmul, Mat, RngState};
use crate::model::{LossHead, Targets, TinyModel};

use super::config::{RunConfig, Task};

/// Stream for model initialization.
pub const INIT_STREAM: u64 = 0;
/// First data stream; worker `w` draws from `DATA_STREAM + w`.
pub const DATA_STREAM: u64 = 16;

const EVAL_SAMPLES: usize = 512;
const TEACHER_WIDTH: usize = 32;

/// A synthetic problem: batch sampler plus a deterministic evaluation loss.
#[derive(Debug, Clone)]
pub enum TaskData {
    /// `y = W* x + noise` with a fixed Gaussian teacher.
    Regression {
        teacher: Mat,
        noise: f64,
        eval_x: Mat,
        eval_y: Mat,
    },
    /// Next-symbol prediction for an order-2 Markov chain. The input is the
    /// one-hot pair of previous symbols; contexts are drawn uniformly.
    ToyLm {
        vocab: usize,
        /// `vocab^2` rows of next-symbol probabilities, indexed `a * vocab + b`.
        transitions: Vec<Vec<f64>>,
    },
}

impl TaskData {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = RngState::new(cfg.task_seed);
        Ok(match cfg.task {
            Task::Regression => {
                let teacher = gaussian_fill(cfg.output_dim, cfg.input_dim, 1.0 / cfg.input_dim as f64, &mut rng)?;
                let eval_x = gaussian_fill(EVAL_SAMPLES, cfg.input_dim, 1.0, &mut rng)?;
                let eval_y = matmul(&eval_x, &teacher.transpose())?;
                TaskData::Regression {
                    teacher,
                    noise: cfg.noise,
                    eval_x,
                    eval_y,
                }
            }
            Task::ToyLm => {
                // Transition logits come from a random one-hidden-layer tanh
                // teacher over the one-hot context pair, so the chain has
                // structure a small MLP can learn.
                let v = cfg.vocab;
                let h = TEACHER_WIDTH;
                let w1 = gaussian_fill(h, 2 * v, 1.0, &mut rng)?;
                let w2 = gaussian_fill(v, h, 1.0 / h as f64, &mut rng)?;
                let transitions = (0..v * v)
                    .map(|ctx| {
                        let (a, c) = (ctx / v, ctx % v);
                        let hidden: Vec<f64> = (0..h).map(|k| (w1.get(k, a) + w1.get(k, v + c)).tanh()).collect();
                        let logits: Vec<f64> = (0..v)
                            .map(|j| {
                                let z: f64 = w2.row(j).iter().zip(&hidden).map(|(w, x)| w * x).sum();
                                cfg.temperature * z
                            })
                            .collect();
                        softmax(&logits)
                    })
                    .collect();
                TaskData::ToyLm { vocab: v, transitions }
            }
        })
    }

    pub fn head(&self) -> LossHead {
        match self {
            TaskData::Regression { .. } => LossHead::Mse,
            TaskData::ToyLm { .. } => LossHead::SoftmaxCe,
        }
    }

    /// Draw `b` training examples.
    pub fn sample(&self, rng: &mut RngState, b: usize) -> Result<(Mat, Targets)> {
        match self {
            TaskData::Regression { teacher, noise, .. } => {
                let x = gaussian_fill(b, teacher.cols(), 1.0, rng)?;
                let mut y = matmul(&x, &teacher.transpose())?;
                if *noise > 0.0 {
                    let eps = gaussian_fill(b, teacher.rows(), noise * noise, rng)?;
                    y.axpy(1.0, &eps)?;
                }
                Ok((x, Targets::Values(y)))
            }
            TaskData::ToyLm { vocab, transitions } => {
                let v = *vocab;
                let mut x = Mat::zeros(b, 2 * v);
                let mut labels = Vec::with_capacity(b);
                for i in 0..b {
                    let a = rng.random_range(0..v);
                    let c = rng.random_range(0..v);
                    x.set(i, a, 1.0);
                    x.set(i, v + c, 1.0);
                    labels.push(draw(&transitions[a * v + c], rng.uniform()));
                }
                Ok((x, Targets::Classes(labels)))
            }
        }
    }

    /// Held-out loss for regression; exact population cross-entropy over all
    /// contexts for the toy language model.
    pub fn eval_loss(&self, model: &TinyModel) -> Result<f64> {
        match self {
            TaskData::Regression { eval_x, eval_y, .. } => model.evaluate(eval_x, &Targets::Values(eval_y.clone())),
            TaskData::ToyLm { vocab, transitions } => {
                let v = *vocab;
                let logits = model.predict(&self.all_contexts())?;
                let mut total = 0.0;
                for (ctx, probs) in transitions.iter().enumerate() {
                    let row = logits.row(ctx);
                    let log_z = log_sum_exp(row);
                    total += probs.iter().zip(row).map(|(p, z)| p * (log_z - z)).sum::<f64>();
                }
                Ok(total / (v * v) as f64)
            }
        }
    }

    /// Best achievable evaluation loss: the noise floor or the mean
    /// conditional entropy.
    pub fn loss_floor(&self) -> f64 {
        match self {
            TaskData::Regression { .. } => 0.0,
            TaskData::ToyLm { transitions, .. } => {
                let h: f64 = transitions
                    .iter()
                    .map(|p| -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>())
                    .sum();
                h / transitions.len() as f64
            }
        }
    }

    fn all_contexts(&self) -> Mat {
        match self {
            TaskData::Regression { eval_x, .. } => eval_x.clone(),
            TaskData::ToyLm { vocab, .. } => {
                let v = *vocab;
                Mat::from_fn(v * v, 2 * v, |ctx, j| {
                    let (a, c) = (ctx / v, ctx % v);
                    if j == a || j == v + c {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        }
    }
}

/// Fresh model for `cfg`, initialized from the run seed.
pub fn build_model(cfg: &RunConfig, task: &TaskData) -> Result<TinyModel> {
    let mut rng = RngState::with_stream(cfg.seed, INIT_STREAM);
    let dims = cfg.layer_dims();
    if cfg.method.is_adaptor() {
        TinyModel::lora_mlp(&dims, cfg.r, task.head(), &mut rng)
    } else {
        TinyModel::mlp(&dims, task.head(), &mut rng)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let log_z = log_sum_exp(logits);
    logits.iter().map(|z| (z - log_z).exp()).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}
