use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommOp {
    /// Per-worker column-norm vectors used to align sketch columns.
    ColumnNorms,
    /// The aligned `m x r` column sketch.
    Sketch,
    /// The `r x n` compressed gradient.
    CompressedGrad,
    /// A full `m x n` gradient (dense baselines).
    FullGrad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub step: usize,
    pub layer: usize,
    pub op: CommOp,
    pub rows: usize,
    pub cols: usize,
    /// Floats sent per worker.
    pub floats: usize,
}

/// Append-only record of every all-reduce.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLog {
    records: Vec<CommRecord>,
}

impl CommLog {
    pub fn new() -> Self {
        CommLog::default()
    }

    pub fn push(&mut self, record: CommRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    pub fn total_floats(&self) -> usize {
        self.records.iter().map(|r| r.floats).sum()
    }

    pub fn floats_at(&self, step: usize) -> usize {
        self.records.iter().filter(|r| r.step == step).map(|r| r.floats).sum()
    }

    /// Floats at `step`, excluding the column-norm exchange.
    pub fn floats_at_excluding_norms(&self, step: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.step == step && r.op != CommOp::ColumnNorms)
            .map(|r| r.floats)
            .sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(format!("comm log: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(CommLog { records })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Elementwise mean of one payload per worker, reduced by a fixed pairwise
/// tree: `(0,1) (2,3) ...` then the partial sums the same way, with an odd
/// trailing element carried up unchanged.
pub fn allreduce_mean(payloads: &[Mat]) -> Result<Mat> {
    let first = payloads.first().ok_or_else(|| Error::Protocol {
        step: 0,
        detail: "all-reduce with no workers".into(),
    })?;
    if let Some(bad) = payloads.iter().position(|p| p.shape() != first.shape()) {
        return Err(Error::Protocol {
            step: 0,
            detail: format!(
                "worker {bad} sent {:?}, worker 0 sent {:?}",
                payloads[bad].shape(),
                first.shape()
            ),
        });
    }
    let mut level: Vec<Mat> = payloads.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.add(&b)?),
                None => next.push(a),
            }
        }
        level = next;
    }
    let sum = level.pop().expect("nonempty");
    Ok(sum.scaled(1.0 / payloads.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_payloads_cancel() {
        let a = Mat::from_rows(&[[1.0, -2.0], [3.5, 0.25]]).unwrap();
        assert!(allreduce_mean(&[a.clone(), a.scaled(-1.0)]).unwrap().is_zero());
    }

    #[test]
    fn constants_average() {
        let p: Vec<Mat> = (1..=4).map(|c| Mat::from_fn(2, 3, |_, _| c as f64)).collect();
        let m = allreduce_mean(&p).unwrap();
        assert!(m.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn tree_matches_flat_mean() {
        let p: Vec<Mat> = (0..5)
            .map(|k| Mat::from_fn(3, 2, |i, j| (k * 7 + i * 3 + j) as f64 * 0.37 - 1.1))
            .collect();
        let tree = allreduce_mean(&p).unwrap();
        let flat = Mat::from_fn(3, 2, |i, j| p.iter().map(|m| m.get(i, j)).sum::<f64>() / 5.0);
        assert!(tree.max_abs_diff(&flat).unwrap() < 1e-12);
        let single = allreduce_mean(&p[..1]).unwrap();
        assert_eq!(single, p[0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let r = allreduce_mean(&[Mat::zeros(2, 2), Mat::zeros(2, 3)]);
        assert!(matches!(r, Err(Error::Protocol { .. })));
        assert!(allreduce_mean(&[]).is_err());
    }

    #[test]
    fn log_round_trip() {
        let mut log = CommLog::new();
        log.push(CommRecord {
            step: 0,
            layer: 1,
            op: CommOp::Sketch,
            rows: 4,
            cols: 2,
            floats: 8,
        });
        log.push(CommRecord {
            step: 1,
            layer: 1,
            op: CommOp::CompressedGrad,
            rows: 2,
            cols: 5,
            floats: 10,
        });
        let text = log.to_jsonl();
        assert!(text.contains("\"op\":\"compressed-grad\""));
        assert_eq!(CommLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.total_floats(), 18);
        assert_eq!(log.floats_at(1), 10);
    }
}
