//! Plain-text checkpoint of named matrices.
//!
//! ```text
//! grass-checkpoint v1
//! <name> <rows> <cols>
//! <rows lines of space-separated values>
//! ...
//! ```
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

use super::tiny::{Layer, TinyModel};

pub const CHECKPOINT_HEADER: &str = "grass-checkpoint v1";

pub fn encode_checkpoint(entries: &[(String, Mat)]) -> String {
    let mut s = String::new();
    s.push_str(CHECKPOINT_HEADER);
    s.push('\n');
    for (name, m) in entries {
        writeln!(s, "{name} {} {}", m.rows(), m.cols()).unwrap();
        for i in 0..m.rows() {
            let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn decode_checkpoint(text: &str) -> Result<Vec<(String, Mat)>> {
    let bad = |msg: String| Error::Io(format!("checkpoint: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut out = Vec::new();
    while let Some(head) = lines.next() {
        if head.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(bad(format!("bad matrix header {head:?}")));
        };
        let rows: usize = rows.parse().map_err(|_| bad(format!("bad rows in {head:?}")))?;
        let cols: usize = cols.parse().map_err(|_| bad(format!("bad cols in {head:?}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| bad(format!("{name}: truncated")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| bad(format!("{name}: bad value {tok:?}")))?,
                );
            }
            if data.len() - before != cols {
                return Err(bad(format!(
                    "{name}: row has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        out.push((name.to_string(), Mat::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Mat)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(entries))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Mat)>> {
    decode_checkpoint(&std::fs::read_to_string(path)?)
}

/// Named trainable and frozen matrices of a model.
pub fn model_entries(model: &TinyModel) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Linear(l) => out.push((format!("layer{i}.w"), l.weight().clone())),
            Layer::LoRA(l) => {
                out.push((format!("layer{i}.w0"), l.w0().clone()));
                out.push((format!("layer{i}.b"), l.bmat().clone()));
                out.push((format!("layer{i}.a"), l.amat().clone()));
            }
        }
    }
    out
}

/// Overwrite a model's matrices from checkpoint entries with matching names.
pub fn restore_model(model: &mut TinyModel, entries: &[(String, Mat)]) -> Result<()> {
    let find = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| Error::Io(format!("checkpoint: missing {name}")))
    };
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        match layer {
            Layer::Linear(l) => l.set_weight(find(&format!("layer{i}.w"))?)?,
            Layer::LoRA(l) => {
                let fresh = super::LoRALayer::from_parts(
                    find(&format!("layer{i}.w0"))?,
                    find(&format!("layer{i}.b"))?,
                    find(&format!("layer{i}.a"))?,
                )?;
                if fresh.w0().shape() != l.w0().shape() || fresh.rank() != l.rank() {
                    return Err(Error::shape("restore", format!("layer{i} shape changed")));
                }
                *l = fresh;
            }
        }
    }
    Ok(())
}
