use std::fmt::Write as _;

use crate::cost::{
    analytic_cost, estimate_llama_memory, CostMethod, CostQuery, CostReport, LlamaConfig, MemoryBreakdown,
};
use crate::error::{Error, Result};

fn reports(dims: &CostQuery, methods: &[CostMethod]) -> Result<Vec<CostReport>> {
    methods
        .iter()
        .map(|&method| analytic_cost(&CostQuery { method, ..*dims }))
        .collect()
}

/// Aligned per-matrix cost table, one row per method.
pub fn cost_table(dims: &CostQuery, methods: &[CostMethod]) -> Result<String> {
    let mut s = format!(
        "m={} n={} r={} b={} c={}\n{:<17} {:>14} {:>14} {:>14} {:>16} {:>16} {:>14}\n",
        dims.m,
        dims.n,
        dims.r,
        dims.b,
        dims.c_opt,
        "method",
        "weights",
        "optimizer",
        "gradient",
        "flops/step",
        "flops/refresh",
        "comm"
    );
    for r in reports(dims, methods)? {
        writeln!(
            s,
            "{:<17} {:>14} {:>14} {:>14} {:>16} {:>16} {:>14}",
            r.method.name(),
            r.weights_mem,
            r.opt_mem,
            r.grad_mem,
            r.flops_regular,
            r.flops_update,
            r.comm
        )
        .unwrap();
    }
    Ok(s)
}

/// One JSON object per method.
pub fn cost_json_lines(dims: &CostQuery, methods: &[CostMethod]) -> Result<String> {
    let mut s = String::new();
    for r in reports(dims, methods)? {
        s.push_str(&serde_json::to_string(&r).map_err(|e| Error::Io(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

fn breakdowns(cfg: &LlamaConfig, methods: &[CostMethod]) -> Result<Vec<(CostMethod, MemoryBreakdown)>> {
    methods
        .iter()
        .map(|&m| estimate_llama_memory(cfg, m).map(|b| (m, b)))
        .collect()
}

/// Aligned memory table in MB, one row per method.
pub fn memory_table(cfg: &LlamaConfig, methods: &[CostMethod]) -> Result<String> {
    let mut s = format!(
        "{:<17} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "method", "activation", "parameter", "gradient", "optimizer", "extra", "total"
    );
    for (m, b) in breakdowns(cfg, methods)? {
        let mb = MemoryBreakdown::mb;
        writeln!(
            s,
            "{:<17} {:>12.2} {:>12.2} {:>12.2} {:>12.2} {:>12.2} {:>12.2}",
            m.name(),
            mb(b.activation),
            mb(b.parameter),
            mb(b.gradient),
            mb(b.optimizer),
            mb(b.extra),
            mb(b.total())
        )
        .unwrap();
    }
    Ok(s)
}

/// One JSON object per method with MB values.
pub fn memory_json(cfg: &LlamaConfig, methods: &[CostMethod]) -> Result<String> {
    let mut s = String::new();
    for (m, b) in breakdowns(cfg, methods)? {
        let mb = MemoryBreakdown::mb;
        let v = serde_json::json!({
            "method": m.name(),
            "activation_mb": mb(b.activation),
            "parameter_mb": mb(b.parameter),
            "gradient_mb": mb(b.gradient),
            "optimizer_mb": mb(b.optimizer),
            "extra_mb": mb(b.extra),
            "total_mb": mb(b.total()),
        });
        s.push_str(&v.to_string());
        s.push('\n');
    }
    Ok(s)
}
