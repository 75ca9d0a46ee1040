use crate::error::{Error, Result};
use crate::linalg::{Mat, RngState};
use crate::model::Side;
use crate::projection::ProjectionKind;

use super::meso::{MatrixOptimizer, MesoConfig};
use super::trainer::PROJECTION_STREAM;

fn orient(side: Side, w: &Mat) -> Mat {
    match side {
        Side::Rows => w.clone(),
        Side::Cols => w.transpose(),
    }
}

/// MeSO with an explicit `A` matrix: `W = W0 + P A`, with `W0` absorbing
/// `P A` and `A` reset to zero at every refresh.
///
/// `grad_fn(W)` returns the full gradient at `W`. Returns the weights after
/// each step. Projections are drawn from the same RNG stream as
/// [`super::Trainer`], so a single-layer trainer with the same seed follows
/// the same sequence of `P`.
pub fn reference_train_with_a<F>(
    w_init: &Mat,
    mut grad_fn: F,
    cfg: &MesoConfig,
    steps: usize,
    seed: u64,
) -> Result<Vec<Mat>>
where
    F: FnMut(&Mat) -> Result<Mat>,
{
    let mut opt = MatrixOptimizer::new(cfg, w_init.rows(), w_init.cols())?;
    let side = opt.side();
    let mut rng = RngState::with_stream(seed, PROJECTION_STREAM);
    let mut w0 = orient(side, w_init);
    let mut a = Mat::zeros(opt.rank(), w0.cols());
    let mut out = Vec::with_capacity(steps);

    let back_project = |opt: &MatrixOptimizer, a: &Mat| -> Result<Mat> {
        match opt.projection() {
            _ if opt.kind() == ProjectionKind::FullRank => Ok(a.clone()),
            Some(p) => p.reconstruct(a),
            None => Err(Error::State("no projection installed".into())),
        }
    };
    let weights = |w0: &Mat, pa: &Mat| -> Result<Mat> { Ok(orient(side, &w0.add(pa)?)) };

    for t in 0..steps {
        if opt.is_refresh_step(t) {
            if opt.projection().is_some() {
                w0 = w0.add(&back_project(&opt, &a)?)?;
            }
            a.fill(0.0);
            let g = orient(side, &grad_fn(&orient(side, &w0))?);
            let p = opt.compute_projection(&g, &mut rng)?;
            opt.install(p, t)?;
        }
        let lr = cfg.schedule.lr_with_refresh(t, opt.last_refresh());
        let pa = back_project(&opt, &a)?;
        let g = orient(side, &grad_fn(&weights(&w0, &pa)?)?);
        let gc = opt.compress(&g)?;
        let delta = opt.subspace_step(&gc, lr)?;
        a.axpy(cfg.alpha, &delta)?;
        out.push(weights(&w0, &back_project(&opt, &a)?)?);
    }
    Ok(out)
}
