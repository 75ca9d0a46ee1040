use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_fill, Mat, RngState};

use super::linear::LinearLayer;
use super::lora::LoRALayer;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    LoRA(LoRALayer),
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Linear(l) => l.out_dim(),
            Layer::LoRA(l) => l.out_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Linear(l) => l.in_dim(),
            Layer::LoRA(l) => l.in_dim(),
        }
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        match self {
            Layer::Linear(l) => l.apply(x),
            Layer::LoRA(l) => l.apply(x),
        }
    }

    pub fn forward(&mut self, x: &Mat) -> Result<Mat> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::LoRA(l) => l.forward(x),
        }
    }

    pub fn cached_input(&self) -> Option<&Mat> {
        match self {
            Layer::Linear(l) => l.cached_input(),
            Layer::LoRA(l) => l.cached_input(),
        }
    }

    /// The weight as seen by the forward pass.
    pub fn effective_weight(&self) -> Mat {
        match self {
            Layer::Linear(l) => l.weight().clone(),
            Layer::LoRA(l) => l.effective_weight(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossHead {
    Mse,
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Mat),
    Classes(Vec<usize>),
}

/// Stack of linear layers with `tanh` between hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    layers: Vec<Layer>,
    head: LossHead,
}

fn init_weight(out: usize, inp: usize, rng: &mut RngState) -> Result<Mat> {
    gaussian_fill(out, inp, 1.0 / inp as f64, rng)
}

impl TinyModel {
    pub fn new(layers: Vec<Layer>, head: LossHead) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "model",
                    format!("layer output {} feeds input {}", pair[0].out_dim(), pair[1].in_dim()),
                ));
            }
        }
        Ok(TinyModel { layers, head })
    }

    /// MLP with widths `dims[0] -> dims[1] -> ... -> dims[last]`.
    pub fn mlp(dims: &[usize], head: LossHead, rng: &mut RngState) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|d| Ok(Layer::Linear(LinearLayer::new(init_weight(d[1], d[0], rng)?))))
            .collect::<Result<Vec<_>>>()?;
        TinyModel::new(layers, head)
    }

    /// Same widths as [`TinyModel::mlp`] but every layer is a rank-`r` adaptor
    /// on a frozen random base (`r` is capped at each layer's smaller side).
    pub fn lora_mlp(dims: &[usize], r: usize, head: LossHead, rng: &mut RngState) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|d| {
                let w0 = init_weight(d[1], d[0], rng)?;
                Ok(Layer::LoRA(LoRALayer::new(w0, r.min(d[0]).min(d[1]), rng)?))
            })
            .collect::<Result<Vec<_>>>()?;
        TinyModel::new(layers, head)
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Linear(l) => l.weight().len(),
                Layer::LoRA(l) => l.bmat().len() + l.amat().len(),
            })
            .sum()
    }

    /// Forward pass without touching caches.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if i < last {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Training forward pass; every layer caches its input.
    pub fn forward(&mut self, x: &Mat) -> Result<Mat> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Mean loss over the batch and its gradient with respect to `out`.
    pub fn loss(&self, out: &Mat, targets: &Targets) -> Result<(f64, Mat)> {
        let b = out.rows() as f64;
        match (self.head, targets) {
            (LossHead::Mse, Targets::Values(t)) => {
                let diff = out.sub(t)?;
                let loss = 0.5 * diff.frob_norm().powi(2) / b;
                Ok((loss, diff.scaled(1.0 / b)))
            }
            (LossHead::SoftmaxCe, Targets::Classes(c)) => {
                if c.len() != out.rows() {
                    return Err(Error::shape(
                        "loss",
                        format!("{} labels for {} rows", c.len(), out.rows()),
                    ));
                }
                let mut grad = Mat::zeros(out.rows(), out.cols());
                let mut loss = 0.0;
                for (i, &label) in c.iter().enumerate() {
                    if label >= out.cols() {
                        return Err(Error::invalid(format!("label {label} out of range {}", out.cols())));
                    }
                    let row = out.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let log_z = max + sum.ln();
                    loss += log_z - row[label];
                    let g = grad.row_mut(i);
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk = (row[k] - log_z).exp() / b;
                    }
                    g[label] -= 1.0 / b;
                }
                Ok((loss / b, grad))
            }
            _ => Err(Error::invalid("targets do not match the loss head")),
        }
    }

    pub fn evaluate(&self, x: &Mat, targets: &Targets) -> Result<f64> {
        Ok(self.loss(&self.predict(x)?, targets)?.0)
    }

    /// Backpropagate `grad_out` layer by layer, last to first.
    ///
    /// `per_layer(i, layer, g)` receives the gradient at layer `i`'s output and
    /// must return the gradient at its input; it is where weight gradients are
    /// formed and updates applied. The `tanh` derivative is taken from the
    /// next layer's cached input, so updates inside the callback are safe.
    pub fn backward_with<F>(&mut self, grad_out: Mat, mut per_layer: F) -> Result<()>
    where
        F: FnMut(usize, &mut Layer, &Mat) -> Result<Mat>,
    {
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &mut self.layers[i];
            let x = layer
                .cached_input()
                .ok_or_else(|| Error::State("backward called before forward".into()))?
                .clone();
            let gin = per_layer(i, layer, &g)?;
            if i == 0 {
                break;
            }
            // x = tanh(pre-activation of layer i - 1)
            g = gin.hadamard(&x.map(|h| 1.0 - h * h))?;
        }
        Ok(())
    }

    /// Full weight gradients of every trainable matrix (for tests and checks).
    pub fn full_gradients(&mut self, x: &Mat, targets: &Targets) -> Result<(f64, Vec<Mat>)> {
        let out = self.forward(x)?;
        let (loss, g) = self.loss(&out, targets)?;
        let mut grads = vec![Mat::zeros(1, 1); self.layers.len()];
        self.backward_with(g, |i, layer, g| match layer {
            Layer::Linear(l) => {
                let (gw, gin) = l.backward_full(g)?;
                grads[i] = gw;
                Ok(gin)
            }
            Layer::LoRA(l) => {
                let lg = l.backward(g)?;
                grads[i] = lg.grad_b;
                Ok(lg.grad_in)
            }
        })?;
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.uniform() * 2.0 - 1.0)
    }

    fn fd_check(model: &TinyModel, x: &Mat, t: &Targets) {
        let mut m = model.clone();
        let (_, grads) = m.full_gradients(x, t).unwrap();
        let h = 1e-5;
        for (li, gw) in grads.iter().enumerate() {
            let Layer::Linear(base) = &model.layers[li] else {
                unreachable!()
            };
            let w = base.weight();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let eval = |d: f64| {
                        let mut mm = model.clone();
                        let Layer::Linear(l) = &mut mm.layers[li] else {
                            unreachable!()
                        };
                        l.weight_mut().set(i, j, w.get(i, j) + d);
                        mm.evaluate(x, t).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = gw.get(i, j);
                    assert!(
                        (fd - an).abs() <= 1e-5 * fd.abs().max(1e-3),
                        "layer {li} ({i},{j}) fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        let mut rng = RngState::new(21);
        let model = TinyModel::mlp(&[3, 4, 2], LossHead::Mse, &mut rng).unwrap();
        let x = random(5, 3, &mut rng);
        fd_check(&model, &x, &Targets::Values(random(5, 2, &mut rng)));
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let mut rng = RngState::new(22);
        let model = TinyModel::mlp(&[4, 3, 5, 3], LossHead::SoftmaxCe, &mut rng).unwrap();
        let x = random(4, 4, &mut rng);
        fd_check(&model, &x, &Targets::Classes(vec![0, 2, 1, 2]));
    }

    #[test]
    fn ce_of_uniform_logits_is_log_vocab() {
        let model = TinyModel::new(
            vec![Layer::Linear(LinearLayer::new(Mat::zeros(4, 2)))],
            LossHead::SoftmaxCe,
        )
        .unwrap();
        let loss = model
            .evaluate(&Mat::zeros(3, 2), &Targets::Classes(vec![0, 1, 3]))
            .unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shapes_consistent_end_to_end() {
        let mut rng = RngState::new(23);
        let mut model = TinyModel::mlp(&[6, 5, 4], LossHead::Mse, &mut rng).unwrap();
        let out = model.forward(&random(7, 6, &mut rng)).unwrap();
        assert_eq!(out.shape(), (7, 4));
        assert!(model.predict(&random(7, 5, &mut rng)).is_err());
        assert!(TinyModel::new(
            vec![
                Layer::Linear(LinearLayer::new(Mat::zeros(3, 2))),
                Layer::Linear(LinearLayer::new(Mat::zeros(2, 4))),
            ],
            LossHead::Mse
        )
        .is_err());
        let loss = model.loss(&out, &Targets::Classes(vec![0; 7]));
        assert!(loss.is_err());
    }

    #[test]
    fn lora_model_starts_at_frozen_function() {
        let mut rng = RngState::new(24);
        let model = TinyModel::lora_mlp(&[3, 4, 2], 2, LossHead::Mse, &mut rng).unwrap();
        let x = random(2, 3, &mut rng);
        let mut h = x.clone();
        for (i, l) in model.layers().iter().enumerate() {
            let Layer::LoRA(l) = l else { unreachable!() };
            h = LinearLayer::new(l.w0().clone()).apply(&h).unwrap();
            if i == 0 {
                h = h.map(f64::tanh);
            }
        }
        assert!(model.predict(&x).unwrap().max_abs_diff(&h).unwrap() < 1e-14);
        assert_eq!(model.num_params(), 4 * 2 + 2 * 3 + 2 * 2 + 2 * 4);
    }
}
