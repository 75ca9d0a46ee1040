use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{counter, matmul, Mat};
use crate::projection::SparseProjection;

/// Which dimension of `G_W` the projection acts on.
///
/// `Rows` projects the `m` output rows of `W` (`P^T G`); `Cols` projects the
/// `n` input columns, i.e. works on the transposed view `G^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Rows,
    Cols,
}

impl Side {
    /// Project the smaller dimension.
    pub fn smaller(m: usize, n: usize) -> Side {
        if m > n {
            Side::Cols
        } else {
            Side::Rows
        }
    }
}

/// Bias-free linear layer `y = x W^T` with `W` of shape `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    w: Mat,
    cached_input: Option<Mat>,
}

/// `rho * (B sel^T) other` without forming `sel^T other`.
///
/// `sel` is `b x M`, `other` is `b x N`; the result is `r x N`. Only an
/// `r x b` gather buffer and the `r x N` output are allocated.
fn fused_projection(sel: &Mat, other: &Mat, p: &SparseProjection) -> Result<Mat> {
    if p.m() != sel.cols() {
        return Err(Error::shape(
            "backward_projected",
            format!("projection m={} vs dimension {}", p.m(), sel.cols()),
        ));
    }
    let b = sel.rows();
    let mut gathered = Mat::zeros(p.rank(), b);
    for (j, &s) in p.sigma().iter().enumerate() {
        let dst = gathered.row_mut(j);
        for (k, d) in dst.iter_mut().enumerate() {
            *d = sel.get(k, s);
        }
    }
    let mut gc = matmul(&gathered, other)?;
    p.scale_rows(&mut gc);
    Ok(gc)
}

impl LinearLayer {
    pub fn new(w: Mat) -> Self {
        LinearLayer { w, cached_input: None }
    }

    pub fn weight(&self) -> &Mat {
        &self.w
    }

    pub fn weight_mut(&mut self) -> &mut Mat {
        &mut self.w
    }

    pub fn set_weight(&mut self, w: Mat) -> Result<()> {
        if w.shape() != self.w.shape() {
            return Err(Error::shape(
                "set_weight",
                format!("{:?} vs {:?}", w.shape(), self.w.shape()),
            ));
        }
        self.w = w;
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn cached_input(&self) -> Option<&Mat> {
        self.cached_input.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }

    /// `x W^T` without caching.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, layer expects {}", x.cols(), self.in_dim()),
            ));
        }
        matmul(x, &self.w.transpose())
    }

    /// `x W^T`, caching `x` for the backward pass.
    pub fn forward(&mut self, x: &Mat) -> Result<Mat> {
        let y = self.apply(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    fn input(&self) -> Result<&Mat> {
        self.cached_input
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))
    }

    fn check_grad_out(&self, grad_out: &Mat) -> Result<()> {
        let x = self.input()?;
        if grad_out.cols() != self.out_dim() || grad_out.rows() != x.rows() {
            return Err(Error::shape(
                "backward",
                format!(
                    "grad_out {:?} for a layer with m={} and batch {}",
                    grad_out.shape(),
                    self.out_dim(),
                    x.rows()
                ),
            ));
        }
        Ok(())
    }

    /// `grad_out W`
    pub fn grad_input(&self, grad_out: &Mat) -> Result<Mat> {
        self.check_grad_out(grad_out)?;
        matmul(grad_out, &self.w)
    }

    /// Full weight gradient `grad_out^T X` (`m x n`).
    pub fn weight_grad(&self, grad_out: &Mat) -> Result<Mat> {
        self.check_grad_out(grad_out)?;
        matmul(&grad_out.transpose(), self.input()?)
    }

    /// `(grad_w, grad_in)` with the full `m x n` weight gradient.
    pub fn backward_full(&self, grad_out: &Mat) -> Result<(Mat, Mat)> {
        Ok((self.weight_grad(grad_out)?, self.grad_input(grad_out)?))
    }

    /// `(gc, grad_in)` where `gc = rho ((B grad_out^T) X)` is the projected
    /// row gradient. Never materializes the `m x n` gradient.
    pub fn backward_projected(&self, grad_out: &Mat, p: &SparseProjection) -> Result<(Mat, Mat)> {
        self.check_grad_out(grad_out)?;
        let gc = fused_projection(grad_out, self.input()?, p)?;
        Ok((gc, self.grad_input(grad_out)?))
    }

    /// Shape of the gradient seen from `side`: `(m, n)` or `(n, m)`.
    pub fn oriented_dims(&self, side: Side) -> (usize, usize) {
        match side {
            Side::Rows => (self.out_dim(), self.in_dim()),
            Side::Cols => (self.in_dim(), self.out_dim()),
        }
    }

    /// `G` for `Rows`, `G^T` for `Cols`.
    pub fn oriented_weight_grad(&self, side: Side, grad_out: &Mat) -> Result<Mat> {
        self.check_grad_out(grad_out)?;
        match side {
            Side::Rows => matmul(&grad_out.transpose(), self.input()?),
            Side::Cols => matmul(&self.input()?.transpose(), grad_out),
        }
    }

    /// Fused projected gradient of the oriented view.
    pub fn oriented_projected_grad(&self, side: Side, grad_out: &Mat, p: &SparseProjection) -> Result<Mat> {
        self.check_grad_out(grad_out)?;
        match side {
            Side::Rows => fused_projection(grad_out, self.input()?, p),
            Side::Cols => fused_projection(self.input()?, grad_out, p),
        }
    }

    /// `W += alpha * P * delta` touching only the selected rows.
    pub fn apply_sparse_update(&mut self, p: &SparseProjection, delta: &Mat, alpha: f64) -> Result<()> {
        self.apply_oriented_sparse_update(Side::Rows, p, delta, alpha)
    }

    /// Sparse update of the oriented view: selected rows of `W` for `Rows`,
    /// selected columns for `Cols`.
    pub fn apply_oriented_sparse_update(
        &mut self,
        side: Side,
        p: &SparseProjection,
        delta: &Mat,
        alpha: f64,
    ) -> Result<()> {
        let (mo, no) = self.oriented_dims(side);
        if p.m() != mo || delta.rows() != p.rank() || delta.cols() != no {
            return Err(Error::shape(
                "apply_sparse_update",
                format!(
                    "projection m={} rank={} delta {:?} for oriented {mo}x{no}",
                    p.m(),
                    p.rank(),
                    delta.shape()
                ),
            ));
        }
        let mut scaled = vec![0.0; no];
        for (j, (&s, &rho)) in p.sigma().iter().zip(p.rho()).enumerate() {
            let factor = alpha * rho;
            for (d, v) in scaled.iter_mut().zip(delta.row(j)) {
                *d = factor * v;
            }
            match side {
                Side::Rows => {
                    for (w, d) in self.w.row_mut(s).iter_mut().zip(&scaled) {
                        *w += d;
                    }
                }
                Side::Cols => {
                    for (i, d) in scaled.iter().enumerate() {
                        let v = self.w.get(i, s) + d;
                        self.w.set(i, s, v);
                    }
                }
            }
        }
        counter::add_update(2 * p.rank() * no);
        Ok(())
    }

    /// `W += alpha * update` where `update` is given in the oriented view.
    pub fn apply_oriented_dense_update(&mut self, side: Side, update: &Mat, alpha: f64) -> Result<()> {
        if update.shape() != self.oriented_dims(side) {
            return Err(Error::shape(
                "apply_dense_update",
                format!("{:?} vs {:?}", update.shape(), self.oriented_dims(side)),
            ));
        }
        match side {
            Side::Rows => self.w.axpy(alpha, update)?,
            Side::Cols => self.w.axpy(alpha, &update.transpose())?,
        }
        counter::add_update(update.len());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{counter::audit_peak_alloc, RngState};
    use crate::projection::{compute_p_sparse, ProjectionKind};

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.uniform() * 2.0 - 1.0)
    }

    #[test]
    fn forward_examples() {
        let mut l = LinearLayer::new(Mat::identity(2));
        let x = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(l.forward(&x).unwrap(), x);
        let mut l = LinearLayer::new(Mat::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap());
        let x = Mat::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(l.forward(&x).unwrap(), Mat::from_rows(&[[1.0, 2.0]]).unwrap());
        assert!(l.forward(&Mat::zeros(3, 2)).unwrap().is_zero());
        assert!(l.forward(&Mat::zeros(3, 5)).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let l = LinearLayer::new(Mat::identity(2));
        assert!(matches!(l.backward_full(&Mat::zeros(1, 2)), Err(Error::State(_))));
    }

    #[test]
    fn backward_full_outer_product() {
        let mut l = LinearLayer::new(Mat::zeros(2, 2));
        l.forward(&Mat::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        let (gw, _) = l.backward_full(&Mat::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(gw, Mat::from_rows(&[[3.0, 4.0], [6.0, 8.0]]).unwrap());
        let (gw, gi) = l.backward_full(&Mat::zeros(1, 2)).unwrap();
        assert!(gw.is_zero() && gi.is_zero());
    }

    #[test]
    fn backward_full_matches_finite_differences() {
        // loss = 0.5 * ||x W^T||^2, so grad_out = y
        let mut rng = RngState::new(4);
        let w = random(4, 3, &mut rng);
        let x = random(5, 3, &mut rng);
        let mut l = LinearLayer::new(w.clone());
        let y = l.forward(&x).unwrap();
        let (gw, gi) = l.backward_full(&y).unwrap();
        let loss = |w: &Mat, x: &Mat| {
            let y = LinearLayer::new(w.clone()).apply(x).unwrap();
            0.5 * y.frob_norm().powi(2)
        };
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp.set(i, j, w.get(i, j) + h);
                wm.set(i, j, w.get(i, j) - h);
                let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h);
                assert!((fd - gw.get(i, j)).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
        for i in 0..5 {
            for j in 0..3 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.set(i, j, x.get(i, j) + h);
                xm.set(i, j, x.get(i, j) - h);
                let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h);
                assert!((fd - gi.get(i, j)).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn projected_full_selection_equals_full() {
        let mut rng = RngState::new(8);
        let mut l = LinearLayer::new(random(3, 4, &mut rng));
        l.forward(&random(2, 4, &mut rng)).unwrap();
        let go = random(2, 3, &mut rng);
        let (gw, gi) = l.backward_full(&go).unwrap();
        let (gc, gi2) = l.backward_projected(&go, &SparseProjection::identity(3)).unwrap();
        assert_eq!(gw, gc);
        assert_eq!(gi, gi2);
    }

    #[test]
    fn projected_matches_dense_oracle_topr() {
        let mut rng = RngState::new(9);
        let mut l = LinearLayer::new(random(3, 2, &mut rng));
        l.forward(&random(2, 2, &mut rng)).unwrap();
        let go = random(2, 3, &mut rng);
        let (gw, _) = l.backward_full(&go).unwrap();
        let p = compute_p_sparse(&gw, ProjectionKind::TopR, 2, &mut rng).unwrap();
        let (gc, _) = l.backward_projected(&go, &p).unwrap();
        assert!(gc.max_abs_diff(&p.project(&gw).unwrap()).unwrap() < 1e-10);
        let (gc0, _) = l.backward_projected(&Mat::zeros(2, 3), &p).unwrap();
        assert!(gc0.is_zero());
    }

    #[test]
    fn projected_counts_and_allocations() {
        let (m, n, b, r) = (64, 48, 4, 3);
        let mut rng = RngState::new(10);
        let mut l = LinearLayer::new(random(m, n, &mut rng));
        l.forward(&random(b, n, &mut rng)).unwrap();
        let go = random(b, m, &mut rng);
        let p = SparseProjection::new(m, vec![5, 9, 5], vec![1.0, 2.0, 0.5]).unwrap();
        let ((gc, ops), peak) =
            audit_peak_alloc(|| counter::measure(|| l.oriented_projected_grad(Side::Rows, &go, &p).unwrap()));
        assert_eq!(gc.shape(), (r, n));
        assert_eq!(ops.matmul_madds as usize, r * b * n);
        assert_eq!(ops.scale_ops as usize, r * n);
        assert_eq!(ops.flops() as usize, 2 * r * b * n + r * n);
        assert!(peak <= (r * b).max(r * n));

        let (_, peak) = audit_peak_alloc(|| l.backward_projected(&go, &p).unwrap());
        assert!(peak <= (r * b).max(r * n).max(b * n));
        assert!(peak < m * n);
    }

    #[test]
    fn column_side_matches_transposed_gradient() {
        let mut rng = RngState::new(12);
        let mut l = LinearLayer::new(random(6, 4, &mut rng));
        l.forward(&random(3, 4, &mut rng)).unwrap();
        let go = random(3, 6, &mut rng);
        let gt = l.weight_grad(&go).unwrap().transpose();
        assert!(
            l.oriented_weight_grad(Side::Cols, &go)
                .unwrap()
                .max_abs_diff(&gt)
                .unwrap()
                < 1e-14
        );
        let p = SparseProjection::new(4, vec![2, 0], vec![1.5, 1.0]).unwrap();
        let gc = l.oriented_projected_grad(Side::Cols, &go, &p).unwrap();
        assert!(gc.max_abs_diff(&p.project(&gt).unwrap()).unwrap() < 1e-12);

        let delta = random(2, 6, &mut rng);
        let mut dense = l.weight().transpose();
        dense.axpy(0.5, &p.reconstruct(&delta).unwrap()).unwrap();
        l.apply_oriented_sparse_update(Side::Cols, &p, &delta, 0.5).unwrap();
        assert!(l.weight().max_abs_diff(&dense.transpose()).unwrap() < 1e-14);
    }

    #[test]
    fn sparse_update_examples() {
        let w = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let mut l = LinearLayer::new(w.clone());
        let p = SparseProjection::selection(3, vec![0, 2]).unwrap();
        l.apply_sparse_update(&p, &Mat::zeros(2, 2), 0.25).unwrap();
        assert_eq!(l.weight(), &w);

        let delta = Mat::from_rows(&[[4.0, 0.0], [0.0, 4.0]]).unwrap();
        let (_, ops) = counter::measure(|| l.apply_sparse_update(&p, &delta, 0.25).unwrap());
        assert_eq!(ops.update_ops, 2 * 2 * 2);
        assert_eq!(l.weight().row(0), &[1.0, 1.0]);
        assert_eq!(l.weight().row(1), w.row(1));
        assert_eq!(l.weight().row(2), &[4.0, 6.0]);
    }

    #[test]
    fn sparse_update_matches_dense_with_duplicates() {
        let mut rng = RngState::new(14);
        let w = random(5, 3, &mut rng);
        let p = SparseProjection::new(5, vec![1, 3, 1], vec![0.7, 1.2, 2.0]).unwrap();
        let delta = random(3, 3, &mut rng);
        let mut l = LinearLayer::new(w.clone());
        l.apply_sparse_update(&p, &delta, 0.3).unwrap();
        let mut want = w.clone();
        want.axpy(0.3, &p.reconstruct(&delta).unwrap()).unwrap();
        assert!(l.weight().max_abs_diff(&want).unwrap() < 1e-12);
        assert_eq!(l.weight().row(0), w.row(0));
    }
}
