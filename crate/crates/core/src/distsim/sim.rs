use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{col_norms, row_norms, topk_indices, Mat, RngState};
use crate::model::{Layer, Targets, TinyModel};
use crate::optim::{MatrixOptimizer, MesoConfig, PROJECTION_STREAM};
use crate::projection::{Projection, ProjectionKind, SparseProjection};

use super::comm::{allreduce_mean, CommLog, CommOp, CommRecord};

/// Top-`r` columns of a gradient with their original indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchMessage {
    pub columns: Vec<usize>,
    pub g_sketch: Mat,
}

/// Columns with the `r` largest norms, in descending norm order (ties to
/// the lower index).
pub fn topr_columns(g: &Mat, r: usize) -> Result<SketchMessage> {
    if r == 0 || r > g.cols() {
        return Err(Error::invalid(format!("r = {r} outside [1, {}]", g.cols())));
    }
    let columns = topk_indices(&col_norms(g), r)?;
    let g_sketch = g.gather_cols(&columns);
    Ok(SketchMessage { columns, g_sketch })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    Sequential,
    Threaded,
}

#[derive(Debug, Clone)]
struct Worker {
    model: TinyModel,
    opts: Vec<MatrixOptimizer>,
    rng: RngState,
}

enum LocalGrad {
    Full(Mat),
    Compressed { gc: Mat, full: Option<Mat> },
}

struct LocalResult {
    loss: f64,
    grads: Vec<LocalGrad>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStepStats {
    pub t: usize,
    /// Mean of the workers' batch losses.
    pub loss: f64,
    pub lr: f64,
    pub refreshed: bool,
    /// Floats each worker sent this step.
    pub floats_per_worker: usize,
    /// Aligned sketch columns per layer on refresh steps.
    pub columns: Vec<Vec<usize>>,
}

/// Simulated data-parallel MeSO training: every worker holds a replica and
/// exchanges only what the protocol specifies.
#[derive(Debug, Clone)]
pub struct DistSim {
    workers: Vec<Worker>,
    cfg: MesoConfig,
    mode: ExecMode,
    check_linearity: bool,
    log: CommLog,
    t: usize,
    last_refresh: Option<usize>,
}

fn weight_hash(model: &TinyModel) -> u64 {
    let mut h = DefaultHasher::new();
    for layer in model.layers() {
        for v in layer.effective_weight().data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn protocol(step: usize, detail: impl Into<String>) -> Error {
    Error::Protocol {
        step,
        detail: detail.into(),
    }
}

fn local_pass(worker: &mut Worker, x: &Mat, y: &Targets, t: usize, full_too: bool) -> Result<LocalResult> {
    let out = worker.model.forward(x)?;
    let (loss, g) = worker.model.loss(&out, y)?;
    let mut grads: Vec<Option<LocalGrad>> = (0..worker.opts.len()).map(|_| None).collect();
    let opts = &worker.opts;
    worker.model.backward_with(g, |i, layer, g| {
        let Layer::Linear(l) = layer else {
            return Err(Error::Config("distributed simulation needs linear layers".into()));
        };
        let opt = &opts[i];
        grads[i] = Some(if opt.is_refresh_step(t) || opt.needs_full_gradient() {
            LocalGrad::Full(l.oriented_weight_grad(opt.side(), g)?)
        } else {
            let full = if full_too {
                Some(l.oriented_weight_grad(opt.side(), g)?)
            } else {
                None
            };
            LocalGrad::Compressed {
                gc: opt.regular_compressed_grad(l, g)?,
                full,
            }
        });
        l.grad_input(g)
    })?;
    Ok(LocalResult {
        loss,
        grads: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
    })
}

impl DistSim {
    /// `p` replicas of `model` trained with `cfg`. Only the MeSO projection
    /// kinds are supported.
    pub fn new(model: TinyModel, cfg: MesoConfig, p: usize, seed: u64, mode: ExecMode) -> Result<Self> {
        cfg.validate()?;
        if p == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        let mut opts = Vec::new();
        for layer in model.layers() {
            let Layer::Linear(l) = layer else {
                return Err(Error::Config("distributed simulation needs linear layers".into()));
            };
            opts.push(MatrixOptimizer::new(&cfg, l.out_dim(), l.in_dim())?);
        }
        let worker = Worker {
            model,
            opts,
            rng: RngState::with_stream(seed, PROJECTION_STREAM),
        };
        Ok(DistSim {
            workers: vec![worker; p],
            cfg,
            mode,
            check_linearity: false,
            log: CommLog::new(),
            t: 0,
            last_refresh: None,
        })
    }

    /// Also form full local gradients on regular steps and assert that the
    /// mean of projected gradients equals the projection of the mean.
    pub fn with_linearity_check(mut self) -> Self {
        self.check_linearity = true;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn model(&self) -> &TinyModel {
        &self.workers[0].model
    }

    pub fn log(&self) -> &CommLog {
        &self.log
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn weight_hashes(&self) -> Vec<u64> {
        self.workers.iter().map(|w| weight_hash(&w.model)).collect()
    }

    fn record(&mut self, layer: usize, op: CommOp, payload: &Mat) {
        self.log.push(CommRecord {
            step: self.t,
            layer,
            op,
            rows: payload.rows(),
            cols: payload.cols(),
            floats: payload.len(),
        });
    }

    fn reduce(&mut self, layer: usize, op: CommOp, payloads: &[Mat]) -> Result<Mat> {
        let t = self.t;
        let mean = allreduce_mean(payloads).map_err(|e| match e {
            Error::Protocol { detail, .. } => protocol(t, format!("layer {layer}: {detail}")),
            other => other,
        })?;
        self.record(layer, op, &payloads[0]);
        Ok(mean)
    }

    /// Every worker computes `P` with its own copy of the shared stream;
    /// the results must agree.
    fn agree_on_projection(
        &mut self,
        compute: impl Fn(&MatrixOptimizer, &mut RngState) -> Result<Projection>,
        layer: usize,
    ) -> Result<Projection> {
        let t = self.t;
        let mut first: Option<Projection> = None;
        for w in &mut self.workers {
            let p = compute(&w.opts[layer], &mut w.rng)?;
            match &first {
                None => first = Some(p),
                Some(f) if *f != p => return Err(protocol(t, format!("layer {layer}: workers derived different P"))),
                _ => {}
            }
        }
        Ok(first.expect("at least one worker"))
    }

    fn run_local(&mut self, shards: &[(Mat, Targets)]) -> Result<Vec<LocalResult>> {
        let t = self.t;
        let full_too = self.check_linearity;
        match self.mode {
            ExecMode::Sequential => self
                .workers
                .iter_mut()
                .zip(shards)
                .map(|(w, (x, y))| local_pass(w, x, y, t, full_too))
                .collect(),
            ExecMode::Threaded => std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .iter_mut()
                    .zip(shards)
                    .map(|(w, (x, y))| s.spawn(move || local_pass(w, x, y, t, full_too)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().map_err(|_| protocol(t, "worker thread panicked"))?)
                    .collect()
            }),
        }
    }

    /// One synchronized step; `shards[i]` is worker `i`'s batch.
    pub fn step(&mut self, shards: &[(Mat, Targets)]) -> Result<DistStepStats> {
        let t = self.t;
        if shards.len() != self.workers.len() {
            return Err(protocol(
                t,
                format!("{} shards for {} workers", shards.len(), self.workers.len()),
            ));
        }
        let locals = self.run_local(shards)?;
        let loss = locals.iter().map(|l| l.loss).sum::<f64>() / locals.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(t));
        }
        let floats_before = self.log.total_floats();
        let layers = self.workers[0].opts.len();
        let refresh = self.workers[0].opts.iter().any(|o| o.is_refresh_step(t));
        let mut columns = Vec::new();
        let mut per_layer: Vec<Vec<LocalGrad>> = (0..layers).map(|_| Vec::new()).collect();
        for local in locals {
            for (i, g) in local.grads.into_iter().enumerate() {
                per_layer[i].push(g);
            }
        }

        let mut updates = Vec::with_capacity(layers);
        for (i, grads) in per_layer.into_iter().enumerate() {
            let opt0 = &self.workers[0].opts[i];
            let (kind, refresh_layer) = (opt0.kind(), opt0.is_refresh_step(t));
            let gc = match grads.first() {
                Some(LocalGrad::Full(_)) => {
                    let fulls: Vec<Mat> = grads
                        .into_iter()
                        .map(|g| match g {
                            LocalGrad::Full(g) => g,
                            LocalGrad::Compressed { .. } => unreachable!("same path on every worker"),
                        })
                        .collect();
                    self.full_gradient_layer(i, kind, refresh_layer, &fulls, &mut columns)?
                }
                _ => {
                    let mut gcs = Vec::new();
                    let mut fulls = Vec::new();
                    for g in grads {
                        let LocalGrad::Compressed { gc, full } = g else {
                            unreachable!()
                        };
                        gcs.push(gc);
                        fulls.extend(full);
                    }
                    let mean = self.reduce(i, CommOp::CompressedGrad, &gcs)?;
                    if !fulls.is_empty() {
                        let g_mean = allreduce_mean(&fulls)?;
                        self.check_close(i, &self.workers[0].opts[i].compress(&g_mean)?, &mean)?;
                    }
                    mean
                }
            };
            updates.push(gc);
        }
        if refresh && t > 0 && self.workers[0].opts.iter().any(|o| o.last_refresh() == Some(t)) {
            self.last_refresh = Some(t);
        }
        let lr = self.cfg.schedule.lr_with_refresh(t, self.last_refresh);
        self.apply(&updates, lr)?;

        let hashes = self.weight_hashes();
        if let Some(bad) = hashes.iter().position(|h| *h != hashes[0]) {
            return Err(protocol(t, format!("replica {bad} diverged from replica 0")));
        }
        let floats_per_worker = self.log.total_floats() - floats_before;
        self.t += 1;
        Ok(DistStepStats {
            t,
            loss,
            lr,
            refreshed: refresh,
            floats_per_worker,
            columns,
        })
    }

    fn check_close(&self, layer: usize, want: &Mat, got: &Mat) -> Result<()> {
        let tol = 1e-10 * want.max_abs().max(1.0);
        let dev = want.max_abs_diff(got)?;
        if dev > tol {
            return Err(protocol(
                self.t,
                format!("layer {layer}: projected mean deviates from mean projection by {dev:e}"),
            ));
        }
        Ok(())
    }

    /// Refresh steps and dense kinds: workers hold full local gradients.
    fn full_gradient_layer(
        &mut self,
        i: usize,
        kind: ProjectionKind,
        refresh: bool,
        fulls: &[Mat],
        columns: &mut Vec<Vec<usize>>,
    ) -> Result<Mat> {
        let t = self.t;
        let sparse = kind.is_sparse() && kind != ProjectionKind::FullRank;
        if !sparse {
            let g_mean = self.reduce(i, CommOp::FullGrad, fulls)?;
            if refresh {
                let p = if kind == ProjectionKind::FullRank {
                    Projection::Sparse(SparseProjection::identity(g_mean.rows()))
                } else {
                    self.agree_on_projection(|o, rng| o.compute_projection(&g_mean, rng), i)?
                };
                for w in &mut self.workers {
                    w.opts[i].install(p.clone(), t)?;
                }
            }
            return self.workers[0].opts[i].compress(&g_mean);
        }

        // sparse refresh: align columns, reduce the sketch, agree on P
        let norms: Vec<Mat> = fulls
            .iter()
            .map(|g| Mat::from_vec(1, g.cols(), col_norms(g)))
            .collect::<Result<_>>()?;
        let mean_norms = self.reduce(i, CommOp::ColumnNorms, &norms)?;
        let c = self.workers[0].opts[i].rank().min(fulls[0].cols());
        let cols = topk_indices(mean_norms.row(0), c)?;
        let sketches: Vec<Mat> = fulls.iter().map(|g| g.gather_cols(&cols)).collect();
        let sketch = self.reduce(i, CommOp::Sketch, &sketches)?;
        let est = row_norms(&sketch);
        let p = self.agree_on_projection(|o, rng| o.projection_from_norms(&est, rng), i)?;
        columns.push(cols);
        for w in &mut self.workers {
            w.opts[i].install(p.clone(), t)?;
        }
        let opt = &self.workers[0].opts[i];
        let gcs: Vec<Mat> = fulls.iter().map(|g| opt.compress(g)).collect::<Result<_>>()?;
        let mean = self.reduce(i, CommOp::CompressedGrad, &gcs)?;
        let g_mean = allreduce_mean(fulls)?;
        self.check_close(i, &self.workers[0].opts[i].compress(&g_mean)?, &mean)?;
        Ok(mean)
    }

    fn apply(&mut self, updates: &[Mat], lr: f64) -> Result<()> {
        let apply_one = |w: &mut Worker| -> Result<()> {
            for (i, gc) in updates.iter().enumerate() {
                let Layer::Linear(l) = &mut w.model.layers_mut()[i] else {
                    unreachable!()
                };
                w.opts[i].apply_update(l, gc, lr)?;
            }
            Ok(())
        };
        match self.mode {
            ExecMode::Sequential => self.workers.iter_mut().try_for_each(apply_one),
            ExecMode::Threaded => std::thread::scope(|s| {
                let handles: Vec<_> = self.workers.iter_mut().map(|w| s.spawn(move || apply_one(w))).collect();
                handles
                    .into_iter()
                    .try_for_each(|h| h.join().map_err(|_| protocol(self.t, "worker thread panicked"))?)
            }),
        }
    }

    /// Corrupt one replica's weights (for exercising divergence detection).
    pub fn perturb_replica(&mut self, worker: usize, delta: f64) {
        if let Some(Layer::Linear(l)) = self.workers[worker].model.layers_mut().first_mut() {
            let v = l.weight().get(0, 0);
            l.weight_mut().set(0, 0, v + delta);
        }
    }
}
