use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{row_norms, Mat, RngState};
use crate::model::{LinearLayer, Side};
use crate::projection::{
    compute_p_dense, compute_p_sparse_from_norms, Projection, ProjectionKind, QKind, SparseProjection,
};

use super::adam::{adam_init_with, adam_update, AdamConfig, AdamState};
use super::schedule::Schedule;

/// What happens to the optimizer state when `P` changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatePolicy {
    Reset,
    Keep,
    /// Map the first moment into the new subspace, zero the second moment.
    FloraTransfer,
}

impl StatePolicy {
    pub fn default_for(kind: ProjectionKind) -> StatePolicy {
        match kind {
            ProjectionKind::DenseSVD => StatePolicy::Keep,
            ProjectionKind::DenseGaussian => StatePolicy::FloraTransfer,
            _ => StatePolicy::Reset,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StatePolicy::Reset => "reset",
            StatePolicy::Keep => "keep",
            StatePolicy::FloraTransfer => "flora-transfer",
        }
    }
}

impl std::str::FromStr for StatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset" => Ok(StatePolicy::Reset),
            "keep" => Ok(StatePolicy::Keep),
            "flora-transfer" | "flora" => Ok(StatePolicy::FloraTransfer),
            other => Err(Error::Config(format!("unknown state policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MesoConfig {
    pub r: usize,
    /// Steps between projection refreshes.
    pub k_freq: usize,
    pub alpha: f64,
    pub kind: ProjectionKind,
    pub state_policy: StatePolicy,
    pub schedule: Schedule,
    /// Project the smaller side of each weight gradient.
    pub side_auto: bool,
    pub adam: AdamConfig,
}

impl MesoConfig {
    pub fn new(kind: ProjectionKind, r: usize) -> Self {
        MesoConfig {
            r,
            k_freq: 200,
            alpha: 0.25,
            kind,
            state_policy: StatePolicy::default_for(kind),
            schedule: Schedule::constant(1e-3),
            side_auto: true,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("r must be at least 1".into()));
        }
        if self.k_freq == 0 {
            return Err(Error::Config("k_freq must be at least 1".into()));
        }
        // alpha = 0 is accepted here as a frozen-weights degenerate case
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.schedule.base_lr >= 0.0) || !self.schedule.base_lr.is_finite() {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Apply `policy` to `state` for a switch from `old_p` to `new_p`.
pub fn update_state_policy(
    state: &mut AdamState,
    old_p: Option<&Projection>,
    new_p: &Projection,
    policy: StatePolicy,
) -> Result<()> {
    match policy {
        StatePolicy::Reset => state.reset(),
        StatePolicy::Keep => {}
        StatePolicy::FloraTransfer => {
            let old_p = old_p.ok_or_else(|| Error::State("no previous projection to transfer from".into()))?;
            if old_p.m() != new_p.m() || old_p.rank() != state.m1.rows() || new_p.rank() != old_p.rank() {
                return Err(Error::shape(
                    "update_state_policy",
                    format!(
                        "old P {}x{}, new P {}x{}, state {:?}",
                        old_p.m(),
                        old_p.rank(),
                        new_p.m(),
                        new_p.rank(),
                        state.shape()
                    ),
                ));
            }
            state.m1 = new_p.project(&old_p.reconstruct(&state.m1)?)?;
            state.m2.fill(0.0);
            state.t = 0;
        }
    }
    Ok(())
}

/// Whether `kind` recomputes `P` after the first step.
pub fn refreshes_periodically(kind: ProjectionKind) -> bool {
    !matches!(kind, ProjectionKind::FullRank | ProjectionKind::FrozenTopR)
}

/// Sparse `compute_P` from row norms with fallbacks for degenerate norms.
///
/// An all-zero norm vector samples uniformly. A without-replacement draw with
/// fewer than `r` positive rows takes every positive row and pads with the
/// lowest-index zero rows.
pub fn select_rows(norms: &[f64], kind: ProjectionKind, r: usize, rng: &mut RngState) -> Result<SparseProjection> {
    if let Some((q, replacement)) = kind.sampling() {
        let weight = |v: f64| match q {
            QKind::Norm => v,
            QKind::Norm2 => v * v,
            QKind::Uniform => 1.0,
        };
        let support = norms.iter().filter(|&&v| weight(v) > 0.0).count();
        if support == 0 {
            let uniform = if replacement {
                ProjectionKind::UniformR
            } else {
                ProjectionKind::UniformNR
            };
            return compute_p_sparse_from_norms(norms, uniform, r, rng);
        }
        if !replacement && support < r {
            let drawn = compute_p_sparse_from_norms(norms, kind, support, rng)?;
            let mut sigma = drawn.sigma().to_vec();
            sigma.extend((0..norms.len()).filter(|&i| weight(norms[i]) <= 0.0).take(r - support));
            return SparseProjection::selection(norms.len(), sigma);
        }
    }
    compute_p_sparse_from_norms(norms, kind, r, rng)
}

/// Optimizer for one linear layer: projection, Adam state in the subspace
/// and the refresh bookkeeping of the MeSO loop.
#[derive(Debug, Clone)]
pub struct MatrixOptimizer {
    kind: ProjectionKind,
    side: Side,
    rank: usize,
    alpha: f64,
    k_freq: usize,
    policy: StatePolicy,
    adam: AdamConfig,
    dims: (usize, usize),
    projection: Option<Projection>,
    state: Option<AdamState>,
    last_refresh: Option<usize>,
    selections: Vec<SparseProjection>,
}

impl MatrixOptimizer {
    /// Optimizer for an `m x n` weight.
    pub fn new(cfg: &MesoConfig, m: usize, n: usize) -> Result<Self> {
        cfg.validate()?;
        let side = if cfg.side_auto { Side::smaller(m, n) } else { Side::Rows };
        let dims = match side {
            Side::Rows => (m, n),
            Side::Cols => (n, m),
        };
        let rank = match cfg.kind {
            ProjectionKind::FullRank => dims.0,
            _ => cfg.r.min(dims.0),
        };
        Ok(MatrixOptimizer {
            kind: cfg.kind,
            side,
            rank,
            alpha: cfg.alpha,
            k_freq: cfg.k_freq,
            policy: cfg.state_policy,
            adam: cfg.adam,
            dims,
            projection: None,
            state: None,
            last_refresh: None,
            selections: Vec::new(),
        })
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Shape of the gradient in the projected orientation.
    pub fn oriented_dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn state(&self) -> Option<&AdamState> {
        self.state.as_ref()
    }

    /// Step of the most recent refresh after the first one.
    pub fn last_refresh(&self) -> Option<usize> {
        self.last_refresh
    }

    /// Every sparse projection installed so far, in order.
    pub fn selections(&self) -> &[SparseProjection] {
        &self.selections
    }

    pub fn is_refresh_step(&self, t: usize) -> bool {
        self.projection.is_none() || (refreshes_periodically(self.kind) && t.is_multiple_of(self.k_freq))
    }

    /// Whether the regular step works from the full gradient.
    pub fn needs_full_gradient(&self) -> bool {
        !self.kind.is_sparse() || self.kind == ProjectionKind::FullRank
    }

    /// `compute_P` from the full oriented gradient.
    pub fn compute_projection(&self, g: &Mat, rng: &mut RngState) -> Result<Projection> {
        if g.shape() != self.dims {
            return Err(Error::shape(
                "compute_projection",
                format!("{:?} vs {:?}", g.shape(), self.dims),
            ));
        }
        if self.kind.is_sparse() {
            self.projection_from_norms(&row_norms(g), rng)
        } else {
            compute_p_dense(g, self.kind, self.rank, rng)
        }
    }

    /// Sparse `compute_P` from (possibly estimated) row norms.
    pub fn projection_from_norms(&self, norms: &[f64], rng: &mut RngState) -> Result<Projection> {
        if !self.kind.is_sparse() {
            return Err(Error::invalid(format!("{} needs the full gradient", self.kind)));
        }
        if norms.len() != self.dims.0 {
            return Err(Error::shape(
                "projection_from_norms",
                format!("{} norms for {} rows", norms.len(), self.dims.0),
            ));
        }
        select_rows(norms, self.kind, self.rank, rng).map(Projection::Sparse)
    }

    /// Install a new projection at step `t`, applying the state policy.
    pub fn install(&mut self, p: Projection, t: usize) -> Result<()> {
        if p.m() != self.dims.0 || p.rank() != self.rank {
            return Err(Error::shape(
                "install",
                format!(
                    "projection {}x{} for oriented {:?} rank {}",
                    p.m(),
                    p.rank(),
                    self.dims,
                    self.rank
                ),
            ));
        }
        match &mut self.state {
            None => self.state = Some(adam_init_with(self.rank, self.dims.1, self.adam)),
            Some(state) => {
                update_state_policy(state, self.projection.as_ref(), &p, self.policy)?;
                self.last_refresh = Some(t);
            }
        }
        if let Projection::Sparse(s) = &p {
            self.selections.push(s.clone());
        }
        self.projection = Some(p);
        Ok(())
    }

    fn current(&self) -> Result<&Projection> {
        self.projection
            .as_ref()
            .ok_or_else(|| Error::State("no projection installed".into()))
    }

    /// Compress an oriented full gradient with the current projection.
    pub fn compress(&self, g: &Mat) -> Result<Mat> {
        if self.kind == ProjectionKind::FullRank {
            return Ok(g.clone());
        }
        self.current()?.project(g)
    }

    /// `G_C` on a non-refresh step: the fused kernel for sparse kinds, full
    /// gradient then projection for dense ones.
    pub fn regular_compressed_grad(&self, layer: &LinearLayer, grad_out: &Mat) -> Result<Mat> {
        if self.kind == ProjectionKind::FullRank {
            return layer.oriented_weight_grad(self.side, grad_out);
        }
        match self.current()? {
            Projection::Sparse(p) => layer.oriented_projected_grad(self.side, grad_out, p),
            p => p.project(&layer.oriented_weight_grad(self.side, grad_out)?),
        }
    }

    /// Adam on `G_C`, then the back-projected step scaled by `alpha`.
    pub fn apply_update(&mut self, layer: &mut LinearLayer, gc: &Mat, lr: f64) -> Result<()> {
        let delta = self.subspace_step(gc, lr)?;
        let p = self.current()?;
        match p {
            _ if self.kind == ProjectionKind::FullRank => {
                layer.apply_oriented_dense_update(self.side, &delta, self.alpha)
            }
            Projection::Sparse(p) => layer.apply_oriented_sparse_update(self.side, p, &delta, self.alpha),
            p => layer.apply_oriented_dense_update(self.side, &p.reconstruct(&delta)?, self.alpha),
        }
    }

    /// Adam step in the subspace only; returns `Delta`.
    pub fn subspace_step(&mut self, gc: &Mat, lr: f64) -> Result<Mat> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::State("no projection installed".into()))?;
        adam_update(state, gc, lr)
    }
}
