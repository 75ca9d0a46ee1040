//! Per-thread operation counters and the allocation audit.
//!
//! Counts follow the cost-table convention: one multiply-add is one table
//! FLOP. [`OpCounts::flops`] converts to the conventional two-FLOPs-per-madd
//! figure.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Multiply-adds spent inside dense contractions.
    pub matmul_madds: u64,
    /// Per-element scaling of a projected gradient (the `rho` multiply).
    pub scale_ops: u64,
    /// Elementwise optimizer arithmetic.
    pub optimizer_ops: u64,
    /// Elementwise work forming and applying weight updates.
    pub update_ops: u64,
}

impl OpCounts {
    /// Table FLOPs: each counted operation is one unit.
    pub fn table_flops(&self) -> u64 {
        self.matmul_madds + self.scale_ops + self.optimizer_ops + self.update_ops
    }

    /// Conventional FLOPs: a multiply-add counts twice.
    pub fn flops(&self) -> u64 {
        2 * self.matmul_madds + self.scale_ops + self.optimizer_ops + self.update_ops
    }

    pub fn since(&self, earlier: &OpCounts) -> OpCounts {
        OpCounts {
            matmul_madds: self.matmul_madds - earlier.matmul_madds,
            scale_ops: self.scale_ops - earlier.scale_ops,
            optimizer_ops: self.optimizer_ops - earlier.optimizer_ops,
            update_ops: self.update_ops - earlier.update_ops,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts {
        matmul_madds: 0,
        scale_ops: 0,
        optimizer_ops: 0,
        update_ops: 0,
    }) };
    static AUDIT_DEPTH: Cell<u32> = const { Cell::new(0) };
    static AUDIT_PEAK: Cell<usize> = const { Cell::new(0) };
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// Run `f` and return its result with the operations it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot().since(&before))
}

fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn add_madds(n: usize) {
    bump(|c| c.matmul_madds += n as u64);
}

pub(crate) fn add_scale(n: usize) {
    bump(|c| c.scale_ops += n as u64);
}

pub(crate) fn add_optimizer(n: usize) {
    bump(|c| c.optimizer_ops += n as u64);
}

pub(crate) fn add_update(n: usize) {
    bump(|c| c.update_ops += n as u64);
}

/// Record a matrix buffer of `len` entries being allocated.
pub(crate) fn note_alloc(len: usize) {
    if AUDIT_DEPTH.with(|d| d.get()) > 0 {
        AUDIT_PEAK.with(|p| p.set(p.get().max(len)));
    }
}

/// Run `f` and report the largest matrix buffer (in entries) it allocated.
pub fn audit_peak_alloc<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let outer_peak = AUDIT_PEAK.with(|p| p.replace(0));
    AUDIT_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    AUDIT_DEPTH.with(|d| d.set(d.get() - 1));
    let peak = AUDIT_PEAK.with(|p| p.get());
    AUDIT_PEAK.with(|p| p.set(outer_peak.max(peak)));
    (out, peak)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_isolates_region() {
        add_madds(5);
        let ((), c) = measure(|| {
            add_madds(3);
            add_update(2);
        });
        assert_eq!(c.matmul_madds, 3);
        assert_eq!(c.update_ops, 2);
        assert_eq!(c.flops(), 8);
        assert_eq!(c.table_flops(), 5);
    }

    #[test]
    fn audit_nests() {
        let ((), outer) = audit_peak_alloc(|| {
            note_alloc(10);
            let ((), inner) = audit_peak_alloc(|| note_alloc(4));
            assert_eq!(inner, 4);
        });
        assert_eq!(outer, 10);
    }
}
