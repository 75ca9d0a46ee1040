use grass::linalg::{matmul, Mat, RngState};
use grass::model::{LinearLayer, Side};
use grass::projection::{
    compute_p_sparse, compute_p_sparse_from_norms, compute_q, coverage_fraction, reconstruction_residual,
    ProjectionKind, QKind, SparseProjection,
};
use proptest::prelude::*;

fn random(rows: usize, cols: usize, rng: &mut RngState) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.uniform() * 2.0 - 1.0)
}

const SPARSE: [ProjectionKind; 8] = [
    ProjectionKind::TopR,
    ProjectionKind::FrozenTopR,
    ProjectionKind::UniformR,
    ProjectionKind::UniformNR,
    ProjectionKind::MultNormR,
    ProjectionKind::MultNormNR,
    ProjectionKind::MultNorm2R,
    ProjectionKind::MultNorm2NR,
];

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..12, 1usize..8, any::<u64>()).prop_flat_map(|(m, n, seed)| (Just(m), Just(n), 1..=m, Just(seed)))
}

proptest! {
    #[test]
    fn sparse_ops_match_dense_matrix((m, n, r, seed) in shape(), which in 0usize..8) {
        let mut rng = RngState::new(seed);
        let g = random(m, n, &mut rng);
        let p = compute_p_sparse(&g, SPARSE[which], r, &mut rng).unwrap();
        let dense = p.to_dense();
        prop_assert_eq!(dense.shape(), (m, r));
        let gc = p.project(&g).unwrap();
        prop_assert!(gc.max_abs_diff(&matmul(&dense.transpose(), &g).unwrap()).unwrap() < 1e-12);
        let back = p.reconstruct(&gc).unwrap();
        prop_assert!(back.max_abs_diff(&matmul(&dense, &gc).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn without_replacement_kinds_select_distinct_unit_rows((m, n, r, seed) in shape(), which in 0usize..4) {
        let kind = [ProjectionKind::TopR, ProjectionKind::UniformNR, ProjectionKind::MultNormNR, ProjectionKind::MultNorm2NR][which];
        let mut rng = RngState::new(seed);
        let g = random(m, n, &mut rng);
        let p = compute_p_sparse(&g, kind, r, &mut rng).unwrap();
        prop_assert!(p.has_distinct_indices());
        prop_assert!(p.rho().iter().all(|&v| v == 1.0));
        // P P^T is then a diagonal 0/1 mask, so reconstruction is idempotent
        let once = p.reconstruct(&p.project(&g).unwrap()).unwrap();
        let twice = p.reconstruct(&p.project(&once).unwrap()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn topr_residual_never_above_sampled_selection((m, n, r, seed) in shape(), which in 0usize..3) {
        let kind = [ProjectionKind::UniformNR, ProjectionKind::MultNormNR, ProjectionKind::MultNorm2NR][which];
        let mut rng = RngState::new(seed);
        let g = random(m, n, &mut rng);
        let best = reconstruction_residual(&g, &compute_p_sparse(&g, ProjectionKind::TopR, r, &mut rng).unwrap()).unwrap();
        let other = reconstruction_residual(&g, &compute_p_sparse(&g, kind, r, &mut rng).unwrap()).unwrap();
        prop_assert!(best <= other + 1e-12);
    }

    #[test]
    fn q_is_a_distribution(norms in prop::collection::vec(0.0f64..10.0, 1..20), which in 0usize..3) {
        prop_assume!(norms.iter().any(|&v| v > 0.0));
        let q = compute_q(&norms, [QKind::Norm, QKind::Norm2, QKind::Uniform][which]).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn with_replacement_scale_matches_sampling_probability(
        norms in prop::collection::vec(0.1f64..10.0, 1..12),
        r in 1usize..6,
        seed in any::<u64>(),
    ) {
        let total: f64 = norms.iter().sum();
        let mut rng = RngState::new(seed);
        let p = compute_p_sparse_from_norms(&norms, ProjectionKind::MultNormR, r, &mut rng).unwrap();
        for (&k, &rho) in p.sigma().iter().zip(p.rho()) {
            let q = norms[k] / total;
            prop_assert!((rho * rho * r as f64 * q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_grows_with_history(m in 2usize..40, r in 1usize..10, refreshes in 1usize..10, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let norms = vec![1.0; m];
        let history: Vec<SparseProjection> = (0..refreshes)
            .map(|_| compute_p_sparse_from_norms(&norms, ProjectionKind::UniformR, r, &mut rng).unwrap())
            .collect();
        let mut last = 0.0;
        for k in 1..=refreshes {
            let c = coverage_fraction(&history[..k], m);
            prop_assert!(c >= last && c <= 1.0);
            last = c;
        }
    }

    #[test]
    fn fused_gradient_equals_projected_full_gradient(
        (m, n, r, seed) in shape(),
        b in 1usize..6,
        cols in any::<bool>(),
    ) {
        let mut rng = RngState::new(seed);
        let mut layer = LinearLayer::new(random(m, n, &mut rng));
        layer.forward(&random(b, n, &mut rng)).unwrap();
        let go = random(b, m, &mut rng);
        let side = if cols { Side::Cols } else { Side::Rows };
        let rows = layer.oriented_dims(side).0;
        let g = layer.oriented_weight_grad(side, &go).unwrap();
        let p = compute_p_sparse(&g, ProjectionKind::MultNormR, r.min(rows), &mut rng).unwrap();
        let fused = layer.oriented_projected_grad(side, &go, &p).unwrap();
        prop_assert!(fused.max_abs_diff(&p.project(&g).unwrap()).unwrap() < 1e-12);
    }
}

#[test]
fn rejects_out_of_range_rank() {
    let mut rng = RngState::new(0);
    let g = random(4, 3, &mut rng);
    assert!(compute_p_sparse(&g, ProjectionKind::TopR, 5, &mut rng).is_err());
    assert!(compute_p_sparse(&g, ProjectionKind::UniformNR, 0, &mut rng).is_err());
    // with replacement may draw more indices than rows
    assert_eq!(
        compute_p_sparse(&g, ProjectionKind::UniformR, 6, &mut rng)
            .unwrap()
            .rank(),
        6
    );
}

#[test]
fn zero_gradient_cannot_drive_norm_sampling() {
    let mut rng = RngState::new(0);
    assert!(compute_p_sparse(&Mat::zeros(4, 3), ProjectionKind::MultNormR, 2, &mut rng).is_err());
}
