//! Per-epoch metrics as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::EpochRecord;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,clean_acc,pgd_acc,grad_norm_mean,grad_norm_cv,weight_dist";

/// Renders the CSV text. Floats use the shortest representation that
/// parses back to the same value.
pub fn format_metrics(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(Error::InvalidInput("no epochs to write".into()));
    }
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.clean_acc, r.pgd_acc, r.grad_norm_mean, r.grad_norm_cv, r.weight_dist
        )
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn write_metrics(history: &[EpochRecord], path: &Path) -> Result<()> {
    let text = format_metrics(history)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidInput("metrics file has an unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::InvalidInput(format!("metrics row {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", f[j])));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                lr: num(1)?,
                train_loss: num(2)?,
                clean_acc: num(3)?,
                pgd_acc: num(4)?,
                grad_norm_mean: num(5)?,
                grad_norm_cv: num(6)?,
                weight_dist: num(7)?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}
