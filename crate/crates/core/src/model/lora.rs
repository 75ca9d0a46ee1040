use crate::error::{Error, Result};
use crate::linalg::{gaussian_fill, matmul, Mat, RngState};

/// Low-rank adaptor layer: `y = x (W0 + B A)^T` with `W0` frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRALayer {
    w0: Mat,
    bmat: Mat,
    amat: Mat,
    cached_input: Option<Mat>,
    cached_xa: Option<Mat>,
}

/// Gradients of a LoRA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub grad_b: Mat,
    pub grad_a: Mat,
    pub grad_in: Mat,
}

impl LoRALayer {
    /// `B` Gaussian with variance `1/r`, `A` zero, so the layer starts at `W0`.
    pub fn new(w0: Mat, r: usize, rng: &mut RngState) -> Result<Self> {
        if r == 0 || r > w0.rows().min(w0.cols()) {
            return Err(Error::invalid(format!(
                "LoRA rank {r} must be in 1..={}",
                w0.rows().min(w0.cols())
            )));
        }
        let bmat = gaussian_fill(w0.rows(), r, 1.0 / r as f64, rng)?;
        let amat = Mat::zeros(r, w0.cols());
        Ok(LoRALayer {
            w0,
            bmat,
            amat,
            cached_input: None,
            cached_xa: None,
        })
    }

    pub fn from_parts(w0: Mat, bmat: Mat, amat: Mat) -> Result<Self> {
        if bmat.rows() != w0.rows() || amat.cols() != w0.cols() || bmat.cols() != amat.rows() {
            return Err(Error::shape(
                "lora",
                format!("w0 {:?}, B {:?}, A {:?}", w0.shape(), bmat.shape(), amat.shape()),
            ));
        }
        Ok(LoRALayer {
            w0,
            bmat,
            amat,
            cached_input: None,
            cached_xa: None,
        })
    }

    pub fn w0(&self) -> &Mat {
        &self.w0
    }

    pub fn bmat(&self) -> &Mat {
        &self.bmat
    }

    pub fn amat(&self) -> &Mat {
        &self.amat
    }

    pub fn bmat_mut(&mut self) -> &mut Mat {
        &mut self.bmat
    }

    pub fn amat_mut(&mut self) -> &mut Mat {
        &mut self.amat
    }

    pub fn rank(&self) -> usize {
        self.amat.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn effective_weight(&self) -> Mat {
        let mut w = self.w0.clone();
        w.axpy(1.0, &matmul(&self.bmat, &self.amat).expect("consistent shapes"))
            .expect("consistent shapes");
        w
    }

    fn parts(&self, x: &Mat) -> Result<(Mat, Mat)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "lora_forward",
                format!("input has {} columns, layer expects {}", x.cols(), self.in_dim()),
            ));
        }
        let xa = matmul(x, &self.amat.transpose())?;
        let mut y = matmul(x, &self.w0.transpose())?;
        y.axpy(1.0, &matmul(&xa, &self.bmat.transpose())?)?;
        Ok((y, xa))
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        Ok(self.parts(x)?.0)
    }

    pub fn forward(&mut self, x: &Mat) -> Result<Mat> {
        let (y, xa) = self.parts(x)?;
        self.cached_input = Some(x.clone());
        self.cached_xa = Some(xa);
        Ok(y)
    }

    pub fn cached_input(&self) -> Option<&Mat> {
        self.cached_input.as_ref()
    }

    pub fn backward(&self, grad_out: &Mat) -> Result<LoraGrads> {
        let (x, xa) = match (&self.cached_input, &self.cached_xa) {
            (Some(x), Some(xa)) => (x, xa),
            _ => return Err(Error::State("backward called before forward".into())),
        };
        if grad_out.cols() != self.out_dim() || grad_out.rows() != x.rows() {
            return Err(Error::shape(
                "lora_backward",
                format!(
                    "grad_out {:?} for m={} batch {}",
                    grad_out.shape(),
                    self.out_dim(),
                    x.rows()
                ),
            ));
        }
        let grad_b = matmul(&grad_out.transpose(), xa)?;
        let gb = matmul(grad_out, &self.bmat)?;
        let grad_a = matmul(&gb.transpose(), x)?;
        let mut grad_in = matmul(grad_out, &self.w0)?;
        grad_in.axpy(1.0, &matmul(&gb, &self.amat)?)?;
        Ok(LoraGrads {
            grad_b,
            grad_a,
            grad_in,
        })
    }

    /// `W0 += B A`, then `B` is redrawn and `A` zeroed.
    pub fn relora_merge(&mut self, rng: &mut RngState) -> Result<()> {
        self.w0.axpy(1.0, &matmul(&self.bmat, &self.amat)?)?;
        let r = self.rank();
        self.bmat = gaussian_fill(self.out_dim(), r, 1.0 / r as f64, rng)?;
        self.amat.fill(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.uniform() * 2.0 - 1.0)
    }

    fn half_sq(layer: &LoRALayer, x: &Mat) -> f64 {
        0.5 * layer.apply(x).unwrap().frob_norm().powi(2)
    }

    fn check_fd(layer: &LoRALayer, x: &Mat, tol: f64) {
        let mut l = layer.clone();
        let y = l.forward(x).unwrap();
        let g = l.backward(&y).unwrap();
        let h = 1e-5;
        let close = |fd: f64, an: f64| (fd - an).abs() <= tol * fd.abs().max(1.0);
        for i in 0..layer.bmat.rows() {
            for j in 0..layer.bmat.cols() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.bmat.set(i, j, layer.bmat.get(i, j) + h);
                m.bmat.set(i, j, layer.bmat.get(i, j) - h);
                let fd = (half_sq(&p, x) - half_sq(&m, x)) / (2.0 * h);
                assert!(close(fd, g.grad_b.get(i, j)), "dB {fd} vs {}", g.grad_b.get(i, j));
            }
        }
        for i in 0..layer.amat.rows() {
            for j in 0..layer.amat.cols() {
                let (mut p, mut m) = (layer.clone(), layer.clone());
                p.amat.set(i, j, layer.amat.get(i, j) + h);
                m.amat.set(i, j, layer.amat.get(i, j) - h);
                let fd = (half_sq(&p, x) - half_sq(&m, x)) / (2.0 * h);
                assert!(close(fd, g.grad_a.get(i, j)), "dA {fd} vs {}", g.grad_a.get(i, j));
            }
        }
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.set(i, j, x.get(i, j) + h);
                xm.set(i, j, x.get(i, j) - h);
                let fd = (half_sq(layer, &xp) - half_sq(layer, &xm)) / (2.0 * h);
                assert!(close(fd, g.grad_in.get(i, j)));
            }
        }
    }

    #[test]
    fn zero_adaptor_matches_frozen_path() {
        let mut rng = RngState::new(1);
        let w0 = random(4, 3, &mut rng);
        let x = random(2, 3, &mut rng);
        let l = LoRALayer::new(w0.clone(), 2, &mut rng).unwrap();
        let frozen = matmul(&x, &w0.transpose()).unwrap();
        assert_eq!(l.apply(&x).unwrap(), frozen);
        let l = LoRALayer::from_parts(w0, Mat::zeros(4, 2), random(2, 3, &mut rng)).unwrap();
        assert_eq!(l.apply(&x).unwrap(), frozen);
    }

    #[test]
    fn rank_one_hand_instance() {
        // w0 = 0, B = [[b]], A = [[a]], x = [[x]]: y = b a x, L = (b a x)^2 / 2
        let l = LoRALayer::from_parts(
            Mat::zeros(1, 1),
            Mat::from_rows(&[[2.0]]).unwrap(),
            Mat::from_rows(&[[3.0]]).unwrap(),
        )
        .unwrap();
        let mut l2 = l.clone();
        let y = l2.forward(&Mat::from_rows(&[[0.5]]).unwrap()).unwrap();
        assert_eq!(y.get(0, 0), 3.0);
        let g = l2.backward(&y).unwrap();
        // dL/db = y * a x = 3 * 1.5, dL/da = y * b x = 3 * 1
        assert_eq!(g.grad_b.get(0, 0), 4.5);
        assert_eq!(g.grad_a.get(0, 0), 3.0);
        check_fd(&l, &Mat::from_rows(&[[0.5]]).unwrap(), 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngState::new(2);
        let l = LoRALayer::from_parts(random(4, 3, &mut rng), random(4, 2, &mut rng), random(2, 3, &mut rng)).unwrap();
        let x = random(5, 3, &mut rng);
        check_fd(&l, &x, 1e-6);
    }

    #[test]
    fn merge_preserves_function() {
        let mut rng = RngState::new(3);
        let w0 = random(4, 3, &mut rng);
        let b = random(4, 2, &mut rng);
        let a = random(2, 3, &mut rng);
        let mut l = LoRALayer::from_parts(w0.clone(), b.clone(), a.clone()).unwrap();
        let x = random(3, 3, &mut rng);
        let before = l.apply(&x).unwrap();
        l.relora_merge(&mut rng).unwrap();
        assert!(l.apply(&x).unwrap().max_abs_diff(&before).unwrap() < 1e-12);
        assert!(l.amat().is_zero());
        let mut want = w0;
        want.axpy(1.0, &matmul(&b, &a).unwrap()).unwrap();
        assert!(l.w0().max_abs_diff(&want).unwrap() < 1e-12);
        let merged = l.w0().clone();
        l.relora_merge(&mut rng).unwrap();
        assert_eq!(l.w0(), &merged);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = RngState::new(4);
        assert!(LoRALayer::new(Mat::zeros(3, 2), 3, &mut rng).is_err());
        let mut l = LoRALayer::new(Mat::zeros(3, 2), 1, &mut rng).unwrap();
        assert!(l.forward(&Mat::zeros(1, 3)).is_err());
        assert!(matches!(l.backward(&Mat::zeros(1, 3)), Err(Error::State(_))));
    }
}
