use super::{matmul, Mat};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as the columns of the returned matrix.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("symmetric_eigen", format!("{:?}", a.shape())));
    }
    let mut s = a.clone();
    let mut v = Mat::identity(n);
    let scale = a.frob_norm();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = s.get(p, p);
                let aqq = s.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, q);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(q, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.get(j, j).total_cmp(&s.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| s.get(i, i)).collect();
    let vectors = v.gather_cols(&order);
    Ok((values, vectors))
}

/// Largest absolute eigenvalue of a symmetric matrix (its spectral norm).
pub fn symmetric_spectral_norm(a: &Mat) -> Result<f64> {
    let (vals, _) = symmetric_eigen(a)?;
    Ok(vals.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

/// Modified Gram-Schmidt, applied twice, on the columns of `u`. Columns that
/// collapse are replaced by the first standard basis vector that extends the
/// orthonormal set.
fn orthonormalize_columns(u: &mut Mat) {
    let (m, r) = u.shape();
    let mut basis_cursor = 0;
    for j in 0..r {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..m).map(|i| u.get(i, j) * u.get(i, k)).sum();
                for i in 0..m {
                    u.set(i, j, u.get(i, j) - dot * u.get(i, k));
                }
            }
        }
        let mut norm = (0..m).map(|i| u.get(i, j).powi(2)).sum::<f64>().sqrt();
        while norm < 1e-10 {
            // degenerate direction: try the next standard basis vector
            for i in 0..m {
                u.set(i, j, if i == basis_cursor { 1.0 } else { 0.0 });
            }
            basis_cursor += 1;
            for _pass in 0..2 {
                for k in 0..j {
                    let dot: f64 = (0..m).map(|i| u.get(i, j) * u.get(i, k)).sum();
                    for i in 0..m {
                        u.set(i, j, u.get(i, j) - dot * u.get(i, k));
                    }
                }
            }
            norm = (0..m).map(|i| u.get(i, j).powi(2)).sum::<f64>().sqrt();
        }
        for i in 0..m {
            u.set(i, j, u.get(i, j) / norm);
        }
    }
}

/// Top-`r` left singular vectors (`m x r`, orthonormal columns) together with
/// the top-`r` singular values.
///
/// Works on the Gram matrix of the smaller dimension: `G G^T` when `m <= n`,
/// otherwise `G^T G` followed by `U = G V / sigma`.
pub fn top_singular(g: &Mat, r: usize) -> Result<(Mat, Vec<f64>)> {
    let (m, n) = g.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::invalid(format!(
            "rank {r} outside [1, {}] for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    if m <= n {
        let gram = matmul(g, &g.transpose())?;
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let idx: Vec<usize> = (0..r).collect();
        let sigmas = vals[..r].iter().map(|v| v.max(0.0).sqrt()).collect();
        Ok((vecs.gather_cols(&idx), sigmas))
    } else {
        let gram = matmul(&g.transpose(), g)?;
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let idx: Vec<usize> = (0..r).collect();
        let v = vecs.gather_cols(&idx);
        let sigmas: Vec<f64> = vals[..r].iter().map(|v| v.max(0.0).sqrt()).collect();
        let mut u = matmul(g, &v)?;
        let tiny = 1e-300_f64.max(sigmas[0] * 1e-14);
        for (j, &s) in sigmas.iter().enumerate() {
            for i in 0..m {
                let val = if s > tiny { u.get(i, j) / s } else { 0.0 };
                u.set(i, j, val);
            }
        }
        orthonormalize_columns(&mut u);
        Ok((u, sigmas))
    }
}

/// Top-`r` left singular vectors of `g`.
pub fn topr_svd_left(g: &Mat, r: usize) -> Result<Mat> {
    top_singular(g, r).map(|(u, _)| u)
}
