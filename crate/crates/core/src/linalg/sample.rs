use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Mat, RngState};
use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-9;

/// Check that `q` is a probability vector.
pub fn validate_probabilities(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("probability vector has a negative or non-finite entry"));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// One categorical draw by linear scan of the cumulative mass.
fn draw_one(weights: &[f64], total: f64, rng: &mut RngState) -> usize {
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = k;
        if u < acc {
            return k;
        }
    }
    // rounding left `u` past the final partial sum
    last_positive
}

/// Draw `r` indices from the categorical distribution `q`.
///
/// With replacement the draws are i.i.d. Without replacement each drawn index
/// has its mass removed and the remainder renormalized before the next draw.
pub fn sample_multinomial(q: &[f64], r: usize, replacement: bool, rng: &mut RngState) -> Result<Vec<usize>> {
    validate_probabilities(q)?;
    if replacement {
        return Ok((0..r).map(|_| draw_one(q, 1.0, rng)).collect());
    }
    let support = q.iter().filter(|&&v| v > 0.0).count();
    if r > support {
        return Err(Error::invalid(format!(
            "cannot draw {r} distinct indices from a support of {support}"
        )));
    }
    let mut w = q.to_vec();
    let mut out = Vec::with_capacity(r);
    for _ in 0..r {
        let total: f64 = w.iter().sum();
        let k = draw_one(&w, total, rng);
        w[k] = 0.0;
        out.push(k);
    }
    Ok(out)
}

/// `rows x cols` matrix of i.i.d. `N(0, variance)` entries.
pub fn gaussian_fill(rows: usize, cols: usize, variance: f64, rng: &mut RngState) -> Result<Mat> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("gaussian variance {variance}")));
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Uniform index in `[0, n)`.
pub fn uniform_index(n: usize, rng: &mut RngState) -> usize {
    rng.random_range(0..n)
}
