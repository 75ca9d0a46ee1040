use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{col_norms, counter, row_norms, topk_indices, Mat, OpCounts, RngState};
use crate::model::{Layer, Targets, TinyModel};
use crate::projection::{Projection, ProjectionKind};

use super::adam::{adam_init_with, adam_update, AdamState};
use super::meso::{MatrixOptimizer, MesoConfig};

/// RNG stream used for every `compute_P` draw.
pub const PROJECTION_STREAM: u64 = 1;
/// RNG stream used for LoRA re-initialization.
pub const ADAPTOR_STREAM: u64 = 2;

/// Training method: a MeSO projection kind or a low-rank adaptor baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Meso(ProjectionKind),
    LoRA,
    ReLoRA,
}

impl Method {
    pub fn is_adaptor(self) -> bool {
        matches!(self, Method::LoRA | Method::ReLoRA)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Meso(k) => k.name(),
            Method::LoRA => "lora",
            Method::ReLoRA => "relora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::LoRA),
            "relora" => Ok(Method::ReLoRA),
            other => other
                .parse::<ProjectionKind>()
                .map(Method::Meso)
                .map_err(|_| Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Where sparse kinds take their row norms from at a refresh.
#[derive(Debug, Clone, PartialEq)]
pub enum RefreshSource {
    /// Row norms of the full gradient.
    FromGradient,
    /// Row norms of the top-r column sketch of the gradient.
    Sketch,
    /// Like `Sketch`, but with the column set given per refresh and layer.
    SketchColumns(Vec<Vec<Vec<usize>>>),
}

/// Top-`c` columns of `g` by norm: the selected indices and the gathered
/// `m x c` submatrix.
pub fn sketch_columns(g: &Mat, c: usize) -> Result<(Vec<usize>, Mat)> {
    let cols = topk_indices(&col_norms(g), c)?;
    let sketch = g.gather_cols(&cols);
    Ok((cols, sketch))
}

#[derive(Debug, Clone)]
enum LayerOpt {
    Meso(MatrixOptimizer),
    Adaptor { b: AdamState, a: AdamState },
}

enum LayerGrad {
    Full(Mat),
    Compressed(Mat),
    Adaptor(Mat, Mat),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub t: usize,
    pub loss: f64,
    pub lr: f64,
    pub refreshed: bool,
    /// Operations spent on weight gradients, optimizer and updates; excludes
    /// the forward pass and input-gradient propagation.
    pub weight_ops: OpCounts,
}

/// Single-replica MeSO (or adaptor baseline) training loop over a
/// [`TinyModel`].
#[derive(Debug, Clone)]
pub struct Trainer {
    model: TinyModel,
    method: Method,
    cfg: MesoConfig,
    opts: Vec<LayerOpt>,
    proj_rng: RngState,
    adaptor_rng: RngState,
    source: RefreshSource,
    dense_path: bool,
    t: usize,
    refreshes: usize,
    last_refresh: Option<usize>,
}

impl Trainer {
    pub fn new(model: TinyModel, method: Method, cfg: MesoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg;
        if let Method::Meso(kind) = method {
            cfg.kind = kind;
        }
        let mut opts = Vec::new();
        for layer in model.layers() {
            match (method, layer) {
                (Method::Meso(_), Layer::Linear(l)) => {
                    opts.push(LayerOpt::Meso(MatrixOptimizer::new(&cfg, l.out_dim(), l.in_dim())?))
                }
                (Method::LoRA | Method::ReLoRA, Layer::LoRA(l)) => opts.push(LayerOpt::Adaptor {
                    b: adam_init_with(l.bmat().rows(), l.bmat().cols(), cfg.adam),
                    a: adam_init_with(l.amat().rows(), l.amat().cols(), cfg.adam),
                }),
                _ => {
                    return Err(Error::Config(format!(
                        "method {method} does not match the model's layer type"
                    )))
                }
            }
        }
        Ok(Trainer {
            model,
            method,
            cfg,
            opts,
            proj_rng: RngState::with_stream(seed, PROJECTION_STREAM),
            adaptor_rng: RngState::with_stream(seed, ADAPTOR_STREAM),
            source: RefreshSource::FromGradient,
            dense_path: false,
            t: 0,
            refreshes: 0,
            last_refresh: None,
        })
    }

    pub fn with_source(mut self, source: RefreshSource) -> Self {
        self.source = source;
        self
    }

    /// Always form the full gradient and project it, bypassing the fused
    /// kernel. Used to cross-check the fused path.
    pub fn with_dense_path(mut self) -> Self {
        self.dense_path = true;
        self
    }

    pub fn model(&self) -> &TinyModel {
        &self.model
    }

    pub fn into_model(self) -> TinyModel {
        self.model
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &MesoConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    /// Per-layer MeSO optimizers (empty for adaptor methods).
    pub fn optimizers(&self) -> Vec<&MatrixOptimizer> {
        self.opts
            .iter()
            .filter_map(|o| match o {
                LayerOpt::Meso(m) => Some(m),
                LayerOpt::Adaptor { .. } => None,
            })
            .collect()
    }

    fn sketch_norms(&self, layer: usize, g: &Mat, c: usize) -> Result<Vec<f64>> {
        let cols = match &self.source {
            RefreshSource::SketchColumns(all) => all
                .get(self.refreshes)
                .and_then(|per_layer| per_layer.get(layer))
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no column set for refresh {} layer {layer}", self.refreshes)))?,
            _ => topk_indices(&col_norms(g), c)?,
        };
        Ok(row_norms(&g.gather_cols(&cols)))
    }

    fn projection_for(&mut self, layer: usize, g: &Mat) -> Result<Projection> {
        let LayerOpt::Meso(opt) = &self.opts[layer] else {
            unreachable!("adaptor layers never refresh a projection")
        };
        if !opt.kind().is_sparse() || self.source == RefreshSource::FromGradient {
            return opt.compute_projection(g, &mut self.proj_rng);
        }
        let c = opt.rank().min(g.cols());
        let norms = self.sketch_norms(layer, g, c)?;
        let LayerOpt::Meso(opt) = &self.opts[layer] else {
            unreachable!()
        };
        opt.projection_from_norms(&norms, &mut self.proj_rng)
    }

    /// One training step on a batch.
    pub fn step(&mut self, x: &Mat, targets: &Targets) -> Result<StepStats> {
        let t = self.t;
        let relora_merge = self.method == Method::ReLoRA && t > 0 && t.is_multiple_of(self.cfg.k_freq);
        if relora_merge {
            for (layer, opt) in self.model.layers_mut().iter_mut().zip(&mut self.opts) {
                if let (Layer::LoRA(l), LayerOpt::Adaptor { b, a }) = (layer, opt) {
                    l.relora_merge(&mut self.adaptor_rng)?;
                    b.reset();
                    a.reset();
                }
            }
            self.last_refresh = Some(t);
        }

        let out = self.model.forward(x)?;
        let (loss, g) = self.model.loss(&out, targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(t));
        }
        let refresh = self
            .opts
            .iter()
            .any(|o| matches!(o, LayerOpt::Meso(m) if m.is_refresh_step(t)));

        let mut grads: Vec<Option<LayerGrad>> = (0..self.opts.len()).map(|_| None).collect();
        let mut weight_ops = OpCounts::default();
        let opts = &self.opts;
        let dense_path = self.dense_path;
        self.model.backward_with(g, |i, layer, g| match (layer, &opts[i]) {
            (Layer::Linear(l), LayerOpt::Meso(opt)) => {
                let before = counter::snapshot();
                let grad = if dense_path || opt.is_refresh_step(t) || opt.needs_full_gradient() {
                    LayerGrad::Full(l.oriented_weight_grad(opt.side(), g)?)
                } else {
                    LayerGrad::Compressed(opt.regular_compressed_grad(l, g)?)
                };
                add_ops(&mut weight_ops, &counter::snapshot().since(&before));
                grads[i] = Some(grad);
                l.grad_input(g)
            }
            (Layer::LoRA(l), LayerOpt::Adaptor { .. }) => {
                let lg = l.backward(g)?;
                grads[i] = Some(LayerGrad::Adaptor(lg.grad_b, lg.grad_a));
                Ok(lg.grad_in)
            }
            _ => unreachable!("layer and optimizer kinds are matched at construction"),
        })?;

        let before = counter::snapshot();
        for (i, grad) in grads.into_iter().enumerate() {
            let grad = grad.expect("every layer produces a gradient");
            let gc = match grad {
                LayerGrad::Adaptor(gb, ga) => {
                    let lr = self.cfg.schedule.lr_with_refresh(t, self.last_refresh);
                    let (Layer::LoRA(l), LayerOpt::Adaptor { b, a }) =
                        (&mut self.model.layers_mut()[i], &mut self.opts[i])
                    else {
                        unreachable!()
                    };
                    let ub = adam_update(b, &gb, lr)?;
                    let ua = adam_update(a, &ga, lr)?;
                    l.bmat_mut().axpy(1.0, &ub)?;
                    l.amat_mut().axpy(1.0, &ua)?;
                    continue;
                }
                LayerGrad::Full(g) => {
                    let is_refresh = matches!(&self.opts[i], LayerOpt::Meso(m) if m.is_refresh_step(t));
                    if is_refresh {
                        let p = self.projection_for(i, &g)?;
                        let LayerOpt::Meso(opt) = &mut self.opts[i] else {
                            unreachable!()
                        };
                        opt.install(p, t)?;
                        if t > 0 {
                            self.last_refresh = Some(t);
                        }
                    }
                    let LayerOpt::Meso(opt) = &self.opts[i] else {
                        unreachable!()
                    };
                    opt.compress(&g)?
                }
                LayerGrad::Compressed(gc) => gc,
            };
            let lr = self.cfg.schedule.lr_with_refresh(t, self.last_refresh);
            let (Layer::Linear(l), LayerOpt::Meso(opt)) = (&mut self.model.layers_mut()[i], &mut self.opts[i]) else {
                unreachable!()
            };
            opt.apply_update(l, &gc, lr)?;
        }
        add_ops(&mut weight_ops, &counter::snapshot().since(&before));
        if refresh {
            self.refreshes += 1;
        }
        let lr = self.cfg.schedule.lr_with_refresh(t, self.last_refresh);
        self.t += 1;
        Ok(StepStats {
            t,
            loss,
            lr,
            refreshed: refresh || relora_merge,
            weight_ops,
        })
    }
}

fn add_ops(acc: &mut OpCounts, d: &OpCounts) {
    acc.matmul_madds += d.matmul_madds;
    acc.scale_ops += d.scale_ops;
    acc.optimizer_ops += d.optimizer_ops;
    acc.update_ops += d.update_ops;
}
