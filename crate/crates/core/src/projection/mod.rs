//! Construction and application of the projection `P` (`m x r`).
//!
//! Sparse projections store `P^T = rho * B` as `r` row indices plus `r`
//! scales; applying one is a row gather and never forms an `m x r` matrix.

mod analysis;
mod kind;

pub use analysis::{
    best_subset_residual, coverage_fraction, empirical_total_variance, expected_reconstruction_exhaustive,
    expected_reconstruction_with, gram_deviation, reconstruction_residual, total_variance_analytic,
};
pub use kind::{ProjectionKind, QKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    counter, gaussian_fill, matmul, row_norms, sample_multinomial, topk_indices, topr_svd_left, uniform_index, Mat,
    RngState,
};

/// `P^T = rho * B` with `B` selecting rows `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProjection {
    m: usize,
    sigma: Vec<usize>,
    rho: Vec<f64>,
}

impl SparseProjection {
    pub fn new(m: usize, sigma: Vec<usize>, rho: Vec<f64>) -> Result<Self> {
        if sigma.len() != rho.len() {
            return Err(Error::invalid(format!(
                "{} indices but {} scales",
                sigma.len(),
                rho.len()
            )));
        }
        if sigma.is_empty() {
            return Err(Error::invalid("projection rank must be at least 1"));
        }
        if let Some(&bad) = sigma.iter().find(|&&s| s >= m) {
            return Err(Error::invalid(format!("row index {bad} out of range for m={m}")));
        }
        if rho.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("scales must be positive and finite"));
        }
        Ok(SparseProjection { m, sigma, rho })
    }

    /// Unit-scale selection of `sigma`.
    pub fn selection(m: usize, sigma: Vec<usize>) -> Result<Self> {
        let rho = vec![1.0; sigma.len()];
        SparseProjection::new(m, sigma, rho)
    }

    pub fn identity(m: usize) -> Self {
        SparseProjection {
            m,
            sigma: (0..m).collect(),
            rho: vec![1.0; m],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn has_distinct_indices(&self) -> bool {
        let mut seen = vec![false; self.m];
        self.sigma.iter().all(|&s| !std::mem::replace(&mut seen[s], true))
    }

    /// `rho * (B * g)`: row `j` of the result is `rho[j] * g[sigma[j]]`.
    pub fn project(&self, g: &Mat) -> Result<Mat> {
        if g.rows() != self.m {
            return Err(Error::shape(
                "project",
                format!("projection m={} but gradient has {} rows", self.m, g.rows()),
            ));
        }
        let mut out = g.gather_rows(&self.sigma);
        self.scale_rows(&mut out);
        Ok(out)
    }

    /// Multiply row `j` of `x` by `rho[j]`.
    pub(crate) fn scale_rows(&self, x: &mut Mat) {
        for (j, &s) in self.rho.iter().enumerate() {
            x.row_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        counter::add_scale(x.len());
    }

    /// `P * gc`: scatter-add of scaled rows; duplicate indices accumulate.
    pub fn reconstruct(&self, gc: &Mat) -> Result<Mat> {
        if gc.rows() != self.rank() {
            return Err(Error::shape(
                "reconstruct",
                format!("rank {} but {} rows", self.rank(), gc.rows()),
            ));
        }
        let mut out = Mat::zeros(self.m, gc.cols());
        for (j, (&s, &rho)) in self.sigma.iter().zip(&self.rho).enumerate() {
            let src = gc.row(j).to_vec();
            for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                *o += rho * v;
            }
        }
        Ok(out)
    }

    /// Materialize `P` as an `m x r` matrix.
    pub fn to_dense(&self) -> Mat {
        let mut p = Mat::zeros(self.m, self.rank());
        for (j, (&s, &rho)) in self.sigma.iter().zip(&self.rho).enumerate() {
            p.set(s, j, rho);
        }
        p
    }
}

/// Dense `m x r` projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseProjection {
    pub p: Mat,
}

impl DenseProjection {
    pub fn new(p: Mat) -> Result<Self> {
        if !p.is_finite() {
            return Err(Error::invalid("dense projection has non-finite entries"));
        }
        Ok(DenseProjection { p })
    }

    pub fn project(&self, g: &Mat) -> Result<Mat> {
        if g.rows() != self.p.rows() {
            return Err(Error::shape(
                "project",
                format!("P is {:?}, gradient {:?}", self.p.shape(), g.shape()),
            ));
        }
        matmul(&self.p.transpose(), g)
    }

    pub fn reconstruct(&self, gc: &Mat) -> Result<Mat> {
        matmul(&self.p, gc)
    }
}

/// CountSketch: `P^T` has one `+-1` per column, in row `bucket[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSketchProjection {
    r: usize,
    bucket: Vec<usize>,
    sign: Vec<f64>,
}

impl CountSketchProjection {
    pub fn new(r: usize, bucket: Vec<usize>, sign: Vec<f64>) -> Result<Self> {
        if bucket.len() != sign.len() {
            return Err(Error::invalid("bucket and sign lengths differ"));
        }
        if r == 0 || bucket.iter().any(|&b| b >= r) {
            return Err(Error::invalid("bucket index out of range"));
        }
        if sign.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::invalid("signs must be +1 or -1"));
        }
        Ok(CountSketchProjection { r, bucket, sign })
    }

    pub fn random(m: usize, r: usize, rng: &mut RngState) -> Result<Self> {
        let mut bucket = Vec::with_capacity(m);
        let mut sign = Vec::with_capacity(m);
        for _ in 0..m {
            bucket.push(uniform_index(r, rng));
            sign.push(if uniform_index(2, rng) == 0 { 1.0 } else { -1.0 });
        }
        CountSketchProjection::new(r, bucket, sign)
    }

    pub fn bucket(&self) -> &[usize] {
        &self.bucket
    }

    pub fn sign(&self) -> &[f64] {
        &self.sign
    }

    pub fn project(&self, g: &Mat) -> Result<Mat> {
        if g.rows() != self.bucket.len() {
            return Err(Error::shape("project", "CountSketch m differs from gradient rows"));
        }
        let mut out = Mat::zeros(self.r, g.cols());
        for k in 0..g.rows() {
            let (b, s) = (self.bucket[k], self.sign[k]);
            let src = g.row(k);
            for (o, v) in out.row_mut(b).iter_mut().zip(src) {
                *o += s * v;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, gc: &Mat) -> Result<Mat> {
        if gc.rows() != self.r {
            return Err(Error::shape("reconstruct", "CountSketch rank differs"));
        }
        let mut out = Mat::zeros(self.bucket.len(), gc.cols());
        for k in 0..self.bucket.len() {
            let (b, s) = (self.bucket[k], self.sign[k]);
            let src = gc.row(b).to_vec();
            for (o, v) in out.row_mut(k).iter_mut().zip(src) {
                *o = s * v;
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Mat {
        let mut p = Mat::zeros(self.bucket.len(), self.r);
        for (k, (&b, &s)) in self.bucket.iter().zip(&self.sign).enumerate() {
            p.set(k, b, s);
        }
        p
    }
}

/// Any projection `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Sparse(SparseProjection),
    Dense(DenseProjection),
    CountSketch(CountSketchProjection),
}

impl Projection {
    pub fn m(&self) -> usize {
        match self {
            Projection::Sparse(p) => p.m(),
            Projection::Dense(p) => p.p.rows(),
            Projection::CountSketch(p) => p.bucket.len(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Projection::Sparse(p) => p.rank(),
            Projection::Dense(p) => p.p.cols(),
            Projection::CountSketch(p) => p.r,
        }
    }

    /// `P^T g`
    pub fn project(&self, g: &Mat) -> Result<Mat> {
        match self {
            Projection::Sparse(p) => p.project(g),
            Projection::Dense(p) => p.project(g),
            Projection::CountSketch(p) => p.project(g),
        }
    }

    /// `P gc`
    pub fn reconstruct(&self, gc: &Mat) -> Result<Mat> {
        match self {
            Projection::Sparse(p) => p.reconstruct(gc),
            Projection::Dense(p) => p.reconstruct(gc),
            Projection::CountSketch(p) => p.reconstruct(gc),
        }
    }

    pub fn to_dense(&self) -> Mat {
        match self {
            Projection::Sparse(p) => p.to_dense(),
            Projection::Dense(p) => p.p.clone(),
            Projection::CountSketch(p) => p.to_dense(),
        }
    }

    pub fn as_sparse(&self) -> Option<&SparseProjection> {
        match self {
            Projection::Sparse(p) => Some(p),
            _ => None,
        }
    }
}

/// Sampling distribution over rows from their norms.
pub fn compute_q(norms: &[f64], kind: QKind) -> Result<Vec<f64>> {
    let m = norms.len();
    if m == 0 {
        return Err(Error::invalid("no rows"));
    }
    if norms.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("row norms must be finite and nonnegative"));
    }
    let weights: Vec<f64> = match kind {
        QKind::Uniform => return Ok(vec![1.0 / m as f64; m]),
        QKind::Norm => norms.to_vec(),
        QKind::Norm2 => norms.iter().map(|v| v * v).collect(),
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("all row norms are zero"));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Scale that makes with-replacement sampling unbiased: `1 / sqrt(r q)`.
pub fn unbiased_rho(q_k: f64, r: usize) -> f64 {
    1.0 / (r as f64 * q_k).sqrt()
}

/// Build a sparse projection from precomputed row norms.
///
/// `FullRank` ignores `r` and returns the identity selection.
pub fn compute_p_sparse_from_norms(
    norms: &[f64],
    kind: ProjectionKind,
    r: usize,
    rng: &mut RngState,
) -> Result<SparseProjection> {
    let m = norms.len();
    match kind {
        ProjectionKind::FullRank => Ok(SparseProjection::identity(m)),
        ProjectionKind::TopR | ProjectionKind::FrozenTopR => {
            if r == 0 || r > m {
                return Err(Error::invalid(format!("rank {r} outside [1, {m}]")));
            }
            SparseProjection::selection(m, topk_indices(norms, r)?)
        }
        _ => {
            let (qkind, replacement) = kind
                .sampling()
                .ok_or_else(|| Error::invalid(format!("{kind} is not a sparse projection")))?;
            if r == 0 || (!replacement && r > m) {
                return Err(Error::invalid(format!("rank {r} outside [1, {m}]")));
            }
            let q = compute_q(norms, qkind)?;
            let sigma = sample_multinomial(&q, r, replacement, rng)?;
            if replacement {
                let rho = sigma.iter().map(|&s| unbiased_rho(q[s], r)).collect();
                SparseProjection::new(m, sigma, rho)
            } else {
                SparseProjection::selection(m, sigma)
            }
        }
    }
}

/// `compute_P` for the row-selection kinds, driven by the row norms of `g`.
pub fn compute_p_sparse(g: &Mat, kind: ProjectionKind, r: usize, rng: &mut RngState) -> Result<SparseProjection> {
    compute_p_sparse_from_norms(&row_norms(g), kind, r, rng)
}

/// `compute_P` for the dense baselines.
pub fn compute_p_dense(g: &Mat, kind: ProjectionKind, r: usize, rng: &mut RngState) -> Result<Projection> {
    let m = g.rows();
    if r == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    match kind {
        ProjectionKind::DenseGaussian => Ok(Projection::Dense(DenseProjection::new(gaussian_fill(
            m,
            r,
            1.0 / r as f64,
            rng,
        )?)?)),
        ProjectionKind::DenseSVD => Ok(Projection::Dense(DenseProjection::new(topr_svd_left(g, r)?)?)),
        ProjectionKind::CountSketch => Ok(Projection::CountSketch(CountSketchProjection::random(m, r, rng)?)),
        other => Err(Error::invalid(format!("{other} is not a dense projection"))),
    }
}

/// `compute_P` for any kind.
pub fn compute_p(g: &Mat, kind: ProjectionKind, r: usize, rng: &mut RngState) -> Result<Projection> {
    if kind.is_sparse() {
        compute_p_sparse(g, kind, r, rng).map(Projection::Sparse)
    } else {
        compute_p_dense(g, kind, r, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Mat {
        Mat::from_rows(&[[3.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn q_examples() {
        let norms = [3.0, 1.0, 2.828];
        let exact_norms = [3.0, 1.0, 8f64.sqrt()];
        let q = compute_q(&exact_norms, QKind::Norm).unwrap();
        assert!(close(&q, &[0.43934, 0.14645, 0.41421], 1e-5));
        let q2 = compute_q(&norms, QKind::Norm2).unwrap();
        // 2.828^2 = 7.997584, so compare against the exact squares
        let s = 9.0 + 1.0 + 2.828f64.powi(2);
        assert!(close(&q2, &[9.0 / s, 1.0 / s, 2.828f64.powi(2) / s], 1e-12));
        let exact = compute_q(&[3.0, 1.0, 8f64.sqrt()], QKind::Norm2).unwrap();
        assert!(close(&exact, &[0.5, 0.05556, 0.44444], 1e-5));
        assert_eq!(compute_q(&norms, QKind::Uniform).unwrap(), vec![1.0 / 3.0; 3]);
        for kind in [QKind::Norm, QKind::Norm2] {
            assert!((compute_q(&norms, kind).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(compute_q(&[0.0, 0.0], kind).is_err());
        }
    }

    #[test]
    fn topr_on_example() {
        let p = compute_p_sparse(&example(), ProjectionKind::TopR, 2, &mut RngState::new(0)).unwrap();
        let mut s = p.sigma().to_vec();
        s.sort();
        assert_eq!(s, vec![0, 2]);
        assert_eq!(p.rho(), &[1.0, 1.0]);
    }

    #[test]
    fn multnorm_rho_on_fair_pair() {
        let g = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        for seed in 0..10 {
            let p = compute_p_sparse(&g, ProjectionKind::MultNormR, 1, &mut RngState::new(seed)).unwrap();
            assert!((p.rho()[0] - 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_nr_full_rank_is_permutation() {
        let g = example();
        let p = compute_p_sparse(&g, ProjectionKind::UniformNR, 3, &mut RngState::new(4)).unwrap();
        let mut s = p.sigma().to_vec();
        s.sort();
        assert_eq!(s, vec![0, 1, 2]);
        assert!(p.rho().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nr_variants_have_distinct_indices() {
        let mut rng = RngState::new(12);
        let g = Mat::from_fn(10, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        for kind in [
            ProjectionKind::UniformNR,
            ProjectionKind::MultNormNR,
            ProjectionKind::MultNorm2NR,
            ProjectionKind::TopR,
        ] {
            for _ in 0..20 {
                assert!(compute_p_sparse(&g, kind, 6, &mut rng).unwrap().has_distinct_indices());
            }
        }
    }

    #[test]
    fn project_examples() {
        let p = SparseProjection::selection(3, vec![0, 2]).unwrap();
        assert_eq!(
            p.project(&example()).unwrap(),
            Mat::from_rows(&[[3.0, 0.0], [2.0, 2.0]]).unwrap()
        );
        let p = SparseProjection::new(2, vec![1], vec![2.0]).unwrap();
        let g = Mat::from_rows(&[[1.0, 1.0], [3.0, 4.0]]).unwrap();
        assert_eq!(p.project(&g).unwrap(), Mat::from_rows(&[[6.0, 8.0]]).unwrap());
        let id = DenseProjection::new(Mat::identity(3)).unwrap();
        assert_eq!(id.project(&example()).unwrap(), example());
        assert!(p.project(&example()).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let p = SparseProjection::selection(3, vec![0, 2]).unwrap();
        let gc = Mat::from_rows(&[[3.0, 0.0], [2.0, 2.0]]).unwrap();
        assert_eq!(
            p.reconstruct(&gc).unwrap(),
            Mat::from_rows(&[[3.0, 0.0], [0.0, 0.0], [2.0, 2.0]]).unwrap()
        );
        let dup = SparseProjection::selection(2, vec![0, 0]).unwrap();
        let gc = Mat::from_rows(&[[1.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(
            dup.reconstruct(&gc).unwrap(),
            Mat::from_rows(&[[3.0, 0.0], [0.0, 0.0]]).unwrap()
        );
        assert!(p.reconstruct(&Mat::zeros(2, 4)).unwrap().is_zero());
        assert!(p.reconstruct(&Mat::zeros(3, 4)).is_err());
    }

    #[test]
    fn sparse_matches_dense_materialization() {
        let mut rng = RngState::new(31);
        let g = Mat::from_fn(7, 5, |i, j| ((i * 5 + j) as f64).sin());
        for kind in [
            ProjectionKind::MultNormR,
            ProjectionKind::MultNorm2NR,
            ProjectionKind::TopR,
        ] {
            let p = compute_p_sparse(&g, kind, 4, &mut rng).unwrap();
            let dense = DenseProjection::new(p.to_dense()).unwrap();
            assert!(
                p.project(&g)
                    .unwrap()
                    .max_abs_diff(&dense.project(&g).unwrap())
                    .unwrap()
                    < 1e-14
            );
            let gc = p.project(&g).unwrap();
            assert!(
                p.reconstruct(&gc)
                    .unwrap()
                    .max_abs_diff(&dense.reconstruct(&gc).unwrap())
                    .unwrap()
                    < 1e-14
            );
        }
    }

    #[test]
    fn selection_is_idempotent_on_selected_rows() {
        let p = SparseProjection::selection(5, vec![3, 1]).unwrap();
        let ppt = matmul(&p.to_dense(), &p.to_dense().transpose()).unwrap();
        for &s in p.sigma() {
            assert_eq!(ppt.get(s, s), 1.0);
        }
        assert_eq!(ppt.data().iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn dense_kinds() {
        let g = Mat::diag(&[3.0, 2.0, 1.0]);
        let mut rng = RngState::new(2);
        let p = compute_p_dense(&g, ProjectionKind::DenseSVD, 1, &mut rng)
            .unwrap()
            .to_dense();
        assert!((p.get(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!(p.get(1, 0).abs() < 1e-12 && p.get(2, 0).abs() < 1e-12);

        let big = Mat::zeros(2000, 3);
        let p = compute_p_dense(&big, ProjectionKind::DenseGaussian, 16, &mut rng)
            .unwrap()
            .to_dense();
        for j in 0..16 {
            let col = p.col(j);
            let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
            assert!((var - 1.0 / 16.0).abs() < 0.1 / 16.0, "{var}");
        }

        let cs = compute_p_dense(&Mat::zeros(4, 3), ProjectionKind::CountSketch, 2, &mut rng).unwrap();
        let d = cs.to_dense();
        for k in 0..4 {
            let nz: Vec<f64> = d.row(k).iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(nz[0].abs(), 1.0);
        }
    }

    #[test]
    fn countsketch_matches_dense() {
        let mut rng = RngState::new(5);
        let cs = CountSketchProjection::random(6, 3, &mut rng).unwrap();
        let proj = Projection::CountSketch(cs);
        let g = Mat::from_fn(6, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let dense = proj.to_dense();
        let want = matmul(&dense.transpose(), &g).unwrap();
        assert!(proj.project(&g).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
        let back = matmul(&dense, &want).unwrap();
        assert!(proj.reconstruct(&want).unwrap().max_abs_diff(&back).unwrap() < 1e-14);
    }

    #[test]
    fn invalid_sparse_projection_rejected() {
        assert!(SparseProjection::new(3, vec![3], vec![1.0]).is_err());
        assert!(SparseProjection::new(3, vec![0], vec![0.0]).is_err());
        assert!(SparseProjection::new(3, vec![0, 1], vec![1.0]).is_err());
    }
}
