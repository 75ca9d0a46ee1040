//! Closed-form compute, memory and communication costs per weight matrix,
//! reconciliation against the instrumented counters, and a memory estimate
//! for LLaMA-style models.

mod llama;

pub use llama::{estimate_llama_memory, LlamaConfig, MemoryBreakdown, Partition, BYTES_PER_MB};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::OpCounts;
use crate::optim::ADAM_OPS_PER_ELEMENT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostMethod {
    Full,
    LoRA,
    ReLoRA,
    Flora,
    GaLore,
    EfficientGaLore,
    Grass,
}

impl CostMethod {
    pub const ALL: [CostMethod; 7] = [
        CostMethod::Full,
        CostMethod::LoRA,
        CostMethod::ReLoRA,
        CostMethod::Flora,
        CostMethod::GaLore,
        CostMethod::EfficientGaLore,
        CostMethod::Grass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::Full => "full",
            CostMethod::LoRA => "lora",
            CostMethod::ReLoRA => "relora",
            CostMethod::Flora => "flora",
            CostMethod::GaLore => "galore",
            CostMethod::EfficientGaLore => "efficient-galore",
            CostMethod::Grass => "grass",
        }
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown cost method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub method: CostMethod,
    pub m: u64,
    pub n: u64,
    pub r: u64,
    pub b: u64,
    /// Optimizer operations per state element (`C`).
    pub c_opt: u64,
}

impl CostQuery {
    pub fn new(method: CostMethod, m: u64, n: u64, r: u64, b: u64) -> Self {
        CostQuery {
            method,
            m,
            n,
            r,
            b,
            c_opt: ADAM_OPS_PER_ELEMENT as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.r == 0 || self.b == 0 {
            return Err(Error::invalid("m, n, r and b must be positive"));
        }
        if self.r > self.m.min(self.n) {
            return Err(Error::invalid(format!(
                "r = {} exceeds min(m, n) = {}",
                self.r,
                self.m.min(self.n)
            )));
        }
        Ok(())
    }
}

/// One named term of a regular-step FLOP count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTerm {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: CostMethod,
    pub weights_mem: u64,
    pub opt_mem: u64,
    pub grad_mem: u64,
    pub flops_regular: u64,
    /// Cost of recomputing the projection (or merging, for ReLoRA).
    pub flops_update: u64,
    pub comm: u64,
    pub terms: Vec<CostTerm>,
}

fn term(name: &str, flops: u64) -> CostTerm {
    CostTerm {
        name: name.to_string(),
        flops,
    }
}

/// Closed-form costs of one `m x n` weight matrix under `q.method`.
pub fn analytic_cost(q: &CostQuery) -> Result<CostReport> {
    q.validate()?;
    let CostQuery {
        m, n, r, b, c_opt: c, ..
    } = *q;
    let mn = m * n;
    let (weights_mem, opt_mem, grad_mem, comm, flops_update, terms) = match q.method {
        CostMethod::Full => (
            mn,
            2 * mn,
            mn,
            mn,
            0,
            vec![
                term("gradient", m * b * n),
                term("optimizer", c * mn),
                term("weight update", mn),
            ],
        ),
        CostMethod::LoRA | CostMethod::ReLoRA => (
            mn + m * r + n * r,
            2 * m * r + 2 * n * r,
            m * r + n * r,
            m * r + n * r,
            if q.method == CostMethod::ReLoRA {
                m * n * r + mn
            } else {
                0
            },
            vec![
                term("gradient", m * b * n),
                term("adaptor gradients", 2 * r * mn),
                term("optimizer", c * (r * m + r * n)),
                term("weight update", r * n + r * m),
            ],
        ),
        CostMethod::Flora | CostMethod::GaLore => (
            mn,
            m * r + 2 * n * r,
            mn,
            mn,
            if q.method == CostMethod::GaLore {
                mn * m.min(n)
            } else {
                m * r
            },
            vec![
                term("gradient", m * b * n),
                term("projection", r * mn),
                term("optimizer", c * r * n),
                term("back-projection", r * mn),
                term("weight update", mn),
            ],
        ),
        CostMethod::EfficientGaLore => (
            mn,
            m * r + 2 * n * r,
            n * r,
            n * r,
            mn * m.min(n),
            vec![
                term("projected output gradient", r * m * b),
                term("projected gradient", r * b * n),
                term("optimizer", c * r * n),
                term("back-projection", r * mn),
                term("weight update", mn),
            ],
        ),
        CostMethod::Grass => (
            mn,
            2 * r + 2 * n * r,
            n * r,
            n * r,
            mn + m + r,
            vec![
                term("row gather", 0),
                term("projected gradient", r * b * n),
                term("row scaling", r * n),
                term("optimizer", c * r * n),
                term("back-projection", r * n),
                term("weight update", r * n),
            ],
        ),
    };
    let flops_regular = terms.iter().map(|t| t.flops).sum();
    Ok(CostReport {
        method: q.method,
        weights_mem,
        opt_mem,
        grad_mem,
        flops_regular,
        flops_update,
        comm,
        terms,
    })
}

/// Expected counter values of one regular step, by counter category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub matmul_madds: u64,
    pub scale_ops: u64,
    pub optimizer_ops: u64,
    pub update_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub method: CostMethod,
    pub expected: ExpectedCounts,
    pub measured: OpCounts,
    pub table_flops: u64,
}

/// Map the table terms of `q` onto counter categories.
pub fn expected_counts(q: &CostQuery) -> Result<ExpectedCounts> {
    q.validate()?;
    let CostQuery {
        m, n, r, b, c_opt: c, ..
    } = *q;
    Ok(match q.method {
        CostMethod::Full => ExpectedCounts {
            matmul_madds: m * b * n,
            scale_ops: 0,
            optimizer_ops: c * m * n,
            update_ops: m * n,
        },
        CostMethod::Flora | CostMethod::GaLore => ExpectedCounts {
            matmul_madds: m * b * n + 2 * r * m * n,
            scale_ops: 0,
            optimizer_ops: c * r * n,
            update_ops: m * n,
        },
        CostMethod::Grass => ExpectedCounts {
            matmul_madds: r * b * n,
            scale_ops: r * n,
            optimizer_ops: c * r * n,
            update_ops: 2 * r * n,
        },
        other => {
            return Err(Error::Reconciliation(format!(
                "no instrumented training path for {other}"
            )))
        }
    })
}

/// Compare measured counters of one regular step of one `m x n` layer with
/// the table. Every category must match exactly.
pub fn reconcile_flops(measured: &OpCounts, q: &CostQuery) -> Result<Reconciliation> {
    let e = expected_counts(q)?;
    let rows = [
        ("matmul multiply-adds", e.matmul_madds, measured.matmul_madds),
        ("scaling", e.scale_ops, measured.scale_ops),
        ("optimizer", e.optimizer_ops, measured.optimizer_ops),
        ("update", e.update_ops, measured.update_ops),
    ];
    let bad: Vec<String> = rows
        .iter()
        .filter(|(_, want, got)| want != got)
        .map(|(name, want, got)| format!("{name}: table {want}, measured {got}"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Reconciliation(format!("{}: {}", q.method, bad.join("; "))));
    }
    let table_flops = analytic_cost(q)?.flops_regular;
    if measured.table_flops() != table_flops {
        return Err(Error::Reconciliation(format!(
            "{}: table total {table_flops}, measured {}",
            q.method,
            measured.table_flops()
        )));
    }
    Ok(Reconciliation {
        method: q.method,
        expected: e,
        measured: *measured,
        table_flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grass_and_full_examples() {
        let g = analytic_cost(&CostQuery::new(CostMethod::Grass, 512, 512, 128, 256)).unwrap();
        assert_eq!(g.opt_mem, 131_328);
        assert_eq!(g.grad_mem, 65_536);
        assert_eq!(g.comm, 65_536);
        let c = ADAM_OPS_PER_ELEMENT as u64;
        assert_eq!(g.flops_regular, 128 * 256 * 512 + 3 * 128 * 512 + c * 128 * 512);
        let f = analytic_cost(&CostQuery::new(CostMethod::Full, 512, 512, 128, 256)).unwrap();
        assert_eq!(f.opt_mem, 524_288);
        assert_eq!(f.grad_mem, 262_144);
        assert_eq!(f.comm, 262_144);
        assert_eq!(f.comm / g.comm, 4);
    }

    #[test]
    fn efficient_galore_gap() {
        let (m, n, r, b) = (64, 96, 8, 32);
        let e = analytic_cost(&CostQuery::new(CostMethod::EfficientGaLore, m, n, r, b)).unwrap();
        let g = analytic_cost(&CostQuery::new(CostMethod::Grass, m, n, r, b)).unwrap();
        assert_eq!(e.comm, g.comm);
        assert_eq!(
            e.flops_regular - g.flops_regular,
            r * m * b + r * m * n + m * n - 3 * r * n
        );
    }

    #[test]
    fn rejects_bad_queries() {
        assert!(analytic_cost(&CostQuery::new(CostMethod::Grass, 4, 4, 5, 1)).is_err());
        assert!(analytic_cost(&CostQuery::new(CostMethod::Grass, 4, 4, 2, 0)).is_err());
        assert!("nope".parse::<CostMethod>().is_err());
        assert_eq!(
            "efficient-galore".parse::<CostMethod>().unwrap(),
            CostMethod::EfficientGaLore
        );
    }

    #[test]
    fn reconciliation_reports_mismatch() {
        let q = CostQuery::new(CostMethod::Grass, 6, 5, 2, 4);
        let good = OpCounts {
            matmul_madds: 40,
            scale_ops: 10,
            optimizer_ops: 13 * 10,
            update_ops: 20,
        };
        assert!(reconcile_flops(&good, &q).is_ok());
        let bad = OpCounts {
            matmul_madds: 41,
            ..good
        };
        let err = reconcile_flops(&bad, &q).unwrap_err().to_string();
        assert!(err.contains("matmul"));
    }
}
