use std::fmt;
use std::str::FromStr;

use crate::cost::{
    analytic_cost, estimate_llama_memory, reconcile_flops, CostMethod, CostQuery, LlamaConfig, MemoryBreakdown,
};
use crate::distsim::{DistSim, ExecMode};
use crate::error::{Error, Result};
use crate::linalg::counter::{self, audit_peak_alloc};
use crate::linalg::{matmul, row_norms, Mat, RngState};
use crate::model::{Layer, LinearLayer, LossHead, Side, Targets, TinyModel};
use crate::optim::{reference_train_with_a, MesoConfig, Method, RefreshSource, Schedule, Trainer};
use crate::projection::{
    best_subset_residual, compute_p_sparse, compute_q, empirical_total_variance, expected_reconstruction_with,
    reconstruction_residual, total_variance_analytic, unbiased_rho, ProjectionKind, QKind, SparseProjection,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Unbiasedness,
    Variance,
    TopR,
    AlgEquivalence,
    Fused,
    Cost,
    Dist,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Unbiasedness,
        Suite::Variance,
        Suite::TopR,
        Suite::AlgEquivalence,
        Suite::Fused,
        Suite::Cost,
        Suite::Dist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Unbiasedness => "unbiasedness",
            Suite::Variance => "variance",
            Suite::TopR => "topr",
            Suite::AlgEquivalence => "alg-equivalence",
            Suite::Fused => "fused",
            Suite::Cost => "cost",
            Suite::Dist => "dist",
        }
    }

    /// `all` expands to every suite.
    pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            Ok(Suite::ALL.to_vec())
        } else {
            Ok(vec![s.parse()?])
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// measured < bound
    Below,
    /// measured == bound
    Equal,
}

/// One property with its measured value and the bound it must meet.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub property: String,
    pub measured: f64,
    pub bound: f64,
    pub relation: Relation,
}

impl Check {
    fn below(suite: Suite, property: &str, measured: f64, bound: f64) -> Self {
        Check {
            suite: suite.name(),
            property: property.into(),
            measured,
            bound,
            relation: Relation::Below,
        }
    }

    fn equal(suite: Suite, property: &str, measured: f64, expected: f64) -> Self {
        Check {
            suite: suite.name(),
            property: property.into(),
            measured,
            bound: expected,
            relation: Relation::Equal,
        }
    }

    pub fn pass(&self) -> bool {
        match self.relation {
            Relation::Below => self.measured < self.bound,
            Relation::Equal => self.measured == self.bound,
        }
    }
}

fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.3e}")
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match (self.relation, self.pass()) {
            (Relation::Below, true) => "<",
            (Relation::Below, false) => ">=",
            (Relation::Equal, true) => "==",
            (Relation::Equal, false) => "!=",
        };
        write!(
            f,
            "{}: {} {} {} {}: {}",
            self.suite,
            self.property,
            num(self.measured),
            op,
            num(self.bound),
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

/// Knobs for negative controls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Use `1/(r q)` instead of `1/sqrt(r q)` as the with-replacement scale.
    pub corrupt_rho: bool,
}

pub fn run_suite(suite: Suite, opts: VerifyOptions) -> Result<Vec<Check>> {
    match suite {
        Suite::Unbiasedness => unbiasedness(opts),
        Suite::Variance => variance(),
        Suite::TopR => topr(),
        Suite::AlgEquivalence => alg_equivalence(),
        Suite::Fused => fused(),
        Suite::Cost => cost(),
        Suite::Dist => dist(),
    }
}

fn random(rows: usize, cols: usize, rng: &mut RngState) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.uniform() * 2.0 - 1.0)
}

fn range(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + (rng.uniform() * (hi - lo + 1) as f64) as usize
}

fn single_layer(w: &Mat) -> TinyModel {
    TinyModel::new(vec![Layer::Linear(LinearLayer::new(w.clone()))], LossHead::Mse)
        .expect("one linear layer is a valid model")
}

fn weights(model: &TinyModel) -> Vec<Mat> {
    model.layers().iter().map(|l| l.effective_weight()).collect()
}

fn unbiasedness(opts: VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = RngState::new(101);
    let mut worst: f64 = 0.0;
    for m in 1..=4 {
        for r in 1..=3 {
            for _ in 0..20 {
                let raw: Vec<f64> = (0..m).map(|_| 0.05 + rng.uniform()).collect();
                let total: f64 = raw.iter().sum();
                let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let e = if opts.corrupt_rho {
                    expected_reconstruction_with(&q, r, m, |qk, r| 1.0 / (r as f64 * qk))?
                } else {
                    expected_reconstruction_with(&q, r, m, unbiased_rho)?
                };
                worst = worst.max(e.max_abs_diff(&Mat::identity(m))?);
            }
        }
    }
    Ok(vec![Check::below(
        Suite::Unbiasedness,
        "max deviation from identity",
        worst,
        1e-10,
    )])
}

fn simplex_point(m: usize, rng: &mut RngState) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.uniform()).ln() + 1e-12).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn variance() -> Result<Vec<Check>> {
    let mut rng = RngState::new(202);
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    let mut worst_mc: f64 = 0.0;
    for _ in 0..50 {
        let m = range(&mut rng, 2, 6);
        let n = range(&mut rng, 1, 4);
        let r = range(&mut rng, 1, 3);
        let g = random(m, n, &mut rng);
        let q_opt = compute_q(&row_norms(&g), QKind::Norm)?;
        let best = total_variance_analytic(&g, &q_opt, r)?;
        for _ in 0..1000 {
            let q = simplex_point(m, &mut rng);
            let v = total_variance_analytic(&g, &q, r)?;
            worst_gap = worst_gap.max((best - v) / best.max(1e-300));
        }
        let mc = empirical_total_variance(&g, &q_opt, r, 200_000, &mut rng)?;
        worst_mc = worst_mc.max((mc - best).abs() / best);
    }
    Ok(vec![
        Check::below(
            Suite::Variance,
            "max relative excess of norm-proportional variance over random q",
            worst_gap,
            1e-12,
        ),
        Check::below(Suite::Variance, "max relative Monte Carlo error", worst_mc, 0.02),
    ])
}

fn topr() -> Result<Vec<Check>> {
    let mut rng = RngState::new(303);
    let mut worst: f64 = 0.0;
    for m in 1..=8 {
        for r in 1..=m.min(4) {
            for _ in 0..50 {
                let g = random(m, 3, &mut rng);
                let p = compute_p_sparse(&g, ProjectionKind::TopR, r, &mut rng)?;
                let got = reconstruction_residual(&g, &p)?;
                let (best, _) = best_subset_residual(&g, r)?;
                worst = worst.max(got - best);
            }
        }
    }
    Ok(vec![Check::below(
        Suite::TopR,
        "max excess of top-r residual over brute-force minimum",
        worst,
        1e-12,
    )])
}

fn explicit_a_deviation(kind: ProjectionKind, m: usize, n: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = RngState::new(seed);
    let w = random(m, n, &mut rng);
    let x = random(5, n, &mut rng);
    let y = Targets::Values(random(5, m, &mut rng));
    let mut cfg = MesoConfig::new(kind, 2);
    cfg.k_freq = 4;
    cfg.schedule = Schedule::cosine(0.05, 2, 20, 2);
    let steps = 16;
    let grad = |w: &Mat| -> Result<Mat> {
        let mut model = single_layer(w);
        let (_, grads) = model.full_gradients(&x, &y)?;
        Ok(grads.into_iter().next().expect("one layer"))
    };
    let reference = reference_train_with_a(&w, grad, &cfg, steps, seed)?;
    let mut trainer = Trainer::new(single_layer(&w), Method::Meso(kind), cfg, seed)?;
    let mut worst: f64 = 0.0;
    let mut refreshes = 0;
    for want in &reference {
        refreshes += trainer.step(&x, &y)?.refreshed as usize;
        worst = worst.max(trainer.model().layers()[0].effective_weight().max_abs_diff(want)?);
    }
    Ok((worst, refreshes))
}

fn alg_equivalence() -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    let mut min_refreshes = usize::MAX;
    for kind in ProjectionKind::ALL {
        for (m, n) in [(4, 6), (6, 4)] {
            let (dev, refreshes) = explicit_a_deviation(kind, m, n, 31)?;
            worst = worst.max(dev);
            if kind != ProjectionKind::FullRank && kind != ProjectionKind::FrozenTopR {
                min_refreshes = min_refreshes.min(refreshes);
            }
        }
    }
    Ok(vec![
        Check::below(
            Suite::AlgEquivalence,
            "max weight deviation between implicit and explicit A",
            worst,
            1e-8,
        ),
        Check::below(
            Suite::AlgEquivalence,
            "refresh shortfall below three",
            3f64 - min_refreshes.min(3) as f64,
            0.5,
        ),
    ])
}

fn fused() -> Result<Vec<Check>> {
    let mut rng = RngState::new(404);
    let mut worst: f64 = 0.0;
    let mut count_mismatch = 0usize;
    let mut wide_buffers = 0usize;
    for _ in 0..500 {
        let m = range(&mut rng, 1, 40);
        let n = range(&mut rng, 1, 40);
        let b = range(&mut rng, 1, 8);
        let r = range(&mut rng, 1, m);
        let sigma: Vec<usize> = (0..r).map(|_| range(&mut rng, 0, m - 1)).collect();
        let rho: Vec<f64> = (0..r).map(|_| 0.1 + rng.uniform()).collect();
        let p = SparseProjection::new(m, sigma, rho)?;
        let mut layer = LinearLayer::new(random(m, n, &mut rng));
        layer.forward(&random(b, n, &mut rng))?;
        let go = random(b, m, &mut rng);
        let ((gc, ops), peak) =
            audit_peak_alloc(|| counter::measure(|| layer.oriented_projected_grad(Side::Rows, &go, &p)));
        let gc = gc?;
        let dense = matmul(&p.to_dense().transpose(), &layer.weight_grad(&go)?)?;
        worst = worst.max(gc.max_abs_diff(&dense)?);
        if ops.matmul_madds as usize != r * b * n || ops.scale_ops as usize != r * n {
            count_mismatch += 1;
        }
        if peak > (r * b).max(r * n) {
            wide_buffers += 1;
        }
    }
    Ok(vec![
        Check::below(Suite::Fused, "max deviation from dense-path oracle", worst, 1e-10),
        Check::equal(Suite::Fused, "shapes with counter mismatch", count_mismatch as f64, 0.0),
        Check::equal(
            Suite::Fused,
            "shapes allocating beyond r x max(b, n)",
            wide_buffers as f64,
            0.0,
        ),
    ])
}

fn cost() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut failures = 0usize;
    for (kind, method) in [
        (ProjectionKind::TopR, CostMethod::Grass),
        (ProjectionKind::DenseGaussian, CostMethod::Flora),
        (ProjectionKind::DenseSVD, CostMethod::GaLore),
        (ProjectionKind::FullRank, CostMethod::Full),
    ] {
        for (m, n, r, b) in [(6, 5, 2, 4), (12, 20, 3, 7), (20, 12, 5, 3)] {
            let mut rng = RngState::new(7);
            let w = random(m, n, &mut rng);
            let x = random(b, n, &mut rng);
            let y = Targets::Values(random(b, m, &mut rng));
            let mut cfg = MesoConfig::new(kind, r);
            cfg.side_auto = false;
            cfg.k_freq = 100;
            let mut t = Trainer::new(single_layer(&w), Method::Meso(kind), cfg, 1)?;
            t.step(&x, &y)?;
            let s = t.step(&x, &y)?;
            let r_eff = if method == CostMethod::Full { m as u64 } else { r as u64 };
            let q = CostQuery::new(method, m as u64, n as u64, r_eff.min(m.min(n) as u64), b as u64);
            if reconcile_flops(&s.weight_ops, &q).is_err() {
                failures += 1;
            }
        }
    }
    checks.push(Check::equal(
        Suite::Cost,
        "measured-vs-table reconciliation failures",
        failures as f64,
        0.0,
    ));
    let grass = analytic_cost(&CostQuery::new(CostMethod::Grass, 512, 512, 128, 1))?;
    let full = analytic_cost(&CostQuery::new(CostMethod::Full, 512, 512, 128, 1))?;
    for (name, got, want) in [
        ("grass optimizer floats at 512x512 r=128", grass.opt_mem, 131_328),
        ("grass gradient floats", grass.grad_mem, 65_536),
        ("grass comm floats", grass.comm, 65_536),
        ("full optimizer floats", full.opt_mem, 524_288),
        ("full gradient floats", full.grad_mem, 262_144),
        ("full comm floats", full.comm, 262_144),
    ] {
        checks.push(Check::equal(Suite::Cost, name, got as f64, want as f64));
    }
    let est = estimate_llama_memory(&LlamaConfig::preset("13b")?, CostMethod::Grass)?;
    for (name, bytes, want) in [
        ("13b activation MB relative error", est.activation, 1936.25),
        ("13b parameter MB relative error", est.parameter, 24825.79),
        ("13b optimizer MB relative error", est.optimizer, 2461.72),
        ("13b extra MB relative error", est.extra, 312.50),
        ("13b total MB relative error", est.total(), 30767.05),
    ] {
        let rel = (MemoryBreakdown::mb(bytes) - want).abs() / want;
        checks.push(Check::below(Suite::Cost, name, rel, 0.02));
    }
    Ok(checks)
}

fn vstack(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.rows() + b.rows(), a.cols(), |i, j| {
        if i < a.rows() {
            a.get(i, j)
        } else {
            b.get(i - a.rows(), j)
        }
    })
}

fn values(t: &Targets) -> &Mat {
    match t {
        Targets::Values(v) => v,
        Targets::Classes(_) => unreachable!("regression shards"),
    }
}

fn dist() -> Result<Vec<Check>> {
    let steps = 200;
    let mut rng = RngState::new(505);
    let model = TinyModel::mlp(&[8, 12, 6], LossHead::Mse, &mut rng)?;
    let mut cfg = MesoConfig::new(ProjectionKind::MultNormR, 3);
    cfg.k_freq = 10;
    cfg.schedule = Schedule::cosine(0.01, 5, steps, 3);
    let shards: Vec<Vec<(Mat, Targets)>> = (0..steps)
        .map(|_| {
            (0..2)
                .map(|_| (random(4, 8, &mut rng), Targets::Values(random(4, 6, &mut rng))))
                .collect()
        })
        .collect();
    let mut sim = DistSim::new(model.clone(), cfg.clone(), 2, 9, ExecMode::Sequential)?.with_linearity_check();
    let mut per_refresh = Vec::new();
    let mut trajectory = Vec::new();
    let mut hash_mismatch = 0usize;
    for batch in &shards {
        let st = sim.step(batch)?;
        if st.refreshed {
            per_refresh.push(st.columns.clone());
        }
        trajectory.push(weights(sim.model()));
        let h = sim.weight_hashes();
        hash_mismatch += h.iter().filter(|x| **x != h[0]).count();
    }
    let mut tr =
        Trainer::new(model, Method::Meso(cfg.kind), cfg, 9)?.with_source(RefreshSource::SketchColumns(per_refresh));
    let mut worst: f64 = 0.0;
    for (batch, want) in shards.iter().zip(&trajectory) {
        let x = vstack(&batch[0].0, &batch[1].0);
        let y = Targets::Values(vstack(values(&batch[0].1), values(&batch[1].1)));
        tr.step(&x, &y)?;
        for (a, b) in weights(tr.model()).iter().zip(want) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
    }

    let (m, n, r, p) = (512usize, 512usize, 128usize, 4usize);
    let mut rng = RngState::new(506);
    let one = single_layer(&random(m, n, &mut rng));
    let shards: Vec<(Mat, Targets)> = (0..p)
        .map(|_| (random(2, n, &mut rng), Targets::Values(random(2, m, &mut rng))))
        .collect();
    let mut volumes = Vec::new();
    for kind in [ProjectionKind::TopR, ProjectionKind::FullRank] {
        let mut c = MesoConfig::new(kind, r);
        c.k_freq = 100;
        let mut sim = DistSim::new(one.clone(), c, p, 1, ExecMode::Sequential)?;
        sim.step(&shards)?;
        volumes.push(sim.step(&shards)?.floats_per_worker as f64);
    }
    Ok(vec![
        Check::below(
            Suite::Dist,
            "max weight deviation from full-batch training over 200 steps",
            worst,
            1e-10,
        ),
        Check::equal(Suite::Dist, "replica hash mismatches", hash_mismatch as f64, 0.0),
        Check::equal(
            Suite::Dist,
            "regular-step floats per worker",
            volumes[0],
            (r * n) as f64,
        ),
        Check::equal(
            Suite::Dist,
            "full over grass volume ratio",
            volumes[1] / volumes[0],
            (m / r) as f64,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert_eq!(Suite::parse_selector("all").unwrap().len(), 7);
        assert_eq!(Suite::parse_selector("topr").unwrap(), vec![Suite::TopR]);
        assert!(matches!(Suite::parse_selector("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn line_format() {
        let c = Check::below(Suite::Unbiasedness, "max deviation from identity", 3.2e-12, 1e-10);
        assert_eq!(
            c.to_string(),
            "unbiasedness: max deviation from identity 3.200e-12 < 1.000e-10: PASS"
        );
        let c = Check::equal(Suite::Cost, "x", 3.0, 4.0);
        assert_eq!(c.to_string(), "cost: x 3 != 4: FAIL");
    }

    #[test]
    fn corrupted_rho_fails_and_clean_passes() {
        let clean = run_suite(Suite::Unbiasedness, VerifyOptions::default()).unwrap();
        assert!(clean.iter().all(Check::pass));
        let bad = run_suite(Suite::Unbiasedness, VerifyOptions { corrupt_rho: true }).unwrap();
        assert!(!bad[0].pass());
        assert!(bad[0].to_string().ends_with("FAIL"));
    }
}
