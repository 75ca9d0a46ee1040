//! Statistical checks on projections: exhaustive expectation, total
//! variance, coverage and subspace preservation.

use super::{unbiased_rho, SparseProjection};
use crate::error::{Error, Result};
use crate::linalg::{
    matmul, row_norms, sample_multinomial, symmetric_spectral_norm, validate_probabilities, Mat, RngState,
};

const MAX_ENUMERATION: usize = 100_000;

/// `E[P P^T]` over every `sigma` tuple drawn with replacement from `q`, using
/// the unbiased scale `1/sqrt(r q)`.
pub fn expected_reconstruction_exhaustive(q: &[f64], r: usize, m: usize) -> Result<Mat> {
    expected_reconstruction_with(q, r, m, unbiased_rho)
}

/// As [`expected_reconstruction_exhaustive`] with a caller-supplied scale
/// rule `rho(q_k, r)`.
pub fn expected_reconstruction_with(q: &[f64], r: usize, m: usize, rho: impl Fn(f64, usize) -> f64) -> Result<Mat> {
    if q.len() != m {
        return Err(Error::invalid(format!("q has {} entries for m={m}", q.len())));
    }
    validate_probabilities(q)?;
    if q.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("q has a zero entry; 1/sqrt(r q) diverges"));
    }
    if r == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let outcomes = (m as u128).checked_pow(r as u32).unwrap_or(u128::MAX);
    if outcomes > MAX_ENUMERATION as u128 {
        return Err(Error::invalid(format!("{m}^{r} outcomes exceeds enumeration limit")));
    }
    let identity = Mat::identity(m);
    let mut acc = Mat::zeros(m, m);
    let mut tuple = vec![0usize; r];
    loop {
        let weight: f64 = tuple.iter().map(|&k| q[k]).product();
        let scales = tuple.iter().map(|&k| rho(q[k], r)).collect();
        let p = SparseProjection::new(m, tuple.clone(), scales)?;
        let ppt = p.reconstruct(&p.project(&identity)?)?;
        acc.axpy(weight, &ppt)?;
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == r {
                return Ok(acc);
            }
            tuple[pos] += 1;
            if tuple[pos] < m {
                break;
            }
            tuple[pos] = 0;
            pos += 1;
        }
    }
}

/// Closed-form total variance of `P P^T G` under with-replacement sampling:
/// `(1/r) (sum_k ||G_k||^2 / q_k - sum_k ||G_k||^2)`.
pub fn total_variance_analytic(g: &Mat, q: &[f64], r: usize) -> Result<f64> {
    if q.len() != g.rows() {
        return Err(Error::invalid("q length differs from row count"));
    }
    if q.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("q must be strictly positive"));
    }
    if r == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let sq: Vec<f64> = row_norms(g).iter().map(|v| v * v).collect();
    let weighted: f64 = sq.iter().zip(q).map(|(s, qk)| s / qk).sum();
    let plain: f64 = sq.iter().sum();
    Ok((weighted - plain) / r as f64)
}

/// Monte Carlo total variance `sum_ij Var[(P P^T G)_ij]` using the sample
/// mean, independent of the closed form.
pub fn empirical_total_variance(g: &Mat, q: &[f64], r: usize, samples: usize, rng: &mut RngState) -> Result<f64> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let (m, n) = g.shape();
    let mut sum = vec![0.0; m * n];
    let mut sum_sq = vec![0.0; m * n];
    for _ in 0..samples {
        let sigma = sample_multinomial(q, r, true, rng)?;
        let rho = sigma.iter().map(|&k| unbiased_rho(q[k], r)).collect();
        let p = SparseProjection::new(m, sigma, rho)?;
        let est = p.reconstruct(&p.project(g)?)?;
        for (k, v) in est.data().iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let s = samples as f64;
    Ok(sum.iter().zip(&sum_sq).map(|(a, b)| (b - a * a / s) / (s - 1.0)).sum())
}

/// Fraction of the `m` rows selected by at least one projection in `history`.
pub fn coverage_fraction(history: &[SparseProjection], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let mut seen = vec![false; m];
    for p in history {
        for &s in p.sigma() {
            if s < m {
                seen[s] = true;
            }
        }
    }
    seen.iter().filter(|&&b| b).count() as f64 / m as f64
}

/// `||P P^T G - G||_F^2`
pub fn reconstruction_residual(g: &Mat, p: &SparseProjection) -> Result<f64> {
    let rec = p.reconstruct(&p.project(g)?)?;
    Ok(rec.sub(g)?.frob_norm().powi(2))
}

/// Brute-force minimum of `||P P^T G - G||_F^2` over all unit-scale
/// selections of `r` distinct rows, with the minimizing subset.
pub fn best_subset_residual(g: &Mat, r: usize) -> Result<(f64, Vec<usize>)> {
    let m = g.rows();
    if r == 0 || r > m {
        return Err(Error::invalid(format!("rank {r} outside [1, {m}]")));
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut subset: Vec<usize> = (0..r).collect();
    loop {
        let p = SparseProjection::selection(m, subset.clone())?;
        let res = reconstruction_residual(g, &p)?;
        if res < best.0 {
            best = (res, subset.clone());
        }
        // next combination in lexicographic order
        let mut i = r;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            if subset[i] < m - r + i {
                subset[i] += 1;
                for j in i + 1..r {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Spectral-norm error of the sketched Gram matrix,
/// `||G^T G - (P^T G)^T (P^T G)||_2`.
pub fn gram_deviation(g: &Mat, p: &SparseProjection) -> Result<f64> {
    let gtg = matmul(&g.transpose(), g)?;
    let s = p.project(g)?;
    let sts = matmul(&s.transpose(), &s)?;
    symmetric_spectral_norm(&gtg.sub(&sts)?)
}
