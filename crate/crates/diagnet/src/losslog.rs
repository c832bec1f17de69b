use std::fmt::Write as _;
use std::path::Path;

use diagnet_core::trainer::{EpochLoss, LossLog};

use crate::error::{CliError, Result};

pub const HEADER: &str = "epoch,diag_loss,det_loss";

pub fn to_csv(log: &LossLog) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in &log.rows {
        let _ = writeln!(out, "{},{:?},{:?}", r.epoch, r.diag_loss, r.det_loss);
    }
    out
}

pub fn from_csv(text: &str, origin: &Path) -> Result<LossLog> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(CliError::format(
            origin,
            format!("loss log must start with {HEADER:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || CliError::format(origin, format!("line {}: malformed row {line:?}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(EpochLoss {
            epoch: f[0].parse().map_err(|_| bad())?,
            diag_loss: f[1].parse().map_err(|_| bad())?,
            det_loss: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(LossLog { rows })
}

pub fn write(path: &Path, log: &LossLog) -> Result<()> {
    std::fs::write(path, to_csv(log)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<LossLog> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    from_csv(&text, path)
}
