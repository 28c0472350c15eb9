use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Val => "val",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "val" => Ok(Phase::Val),
            other => Err(Error::InvalidConfig(format!("unknown phase {other:?}"))),
        }
    }
}

/// One (epoch, phase) line of the training log. Values are kept at full
/// precision; rounding is a rendering concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
}

impl EpochLogRow {
    pub const CSV_HEADER: &'static str = "epoch,phase,loss,accuracy,precision_macro,recall_macro,f1_macro";

    pub fn write_csv<W: Write>(rows: &[EpochLogRow], mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.phase, r.loss, r.accuracy, r.precision_macro, r.recall_macro, r.f1_macro
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<EpochLogRow>> {
        let bad = |msg: String| Error::InvalidConfig(format!("epoch log: {msg}"));
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| bad(e.to_string()))?
            .ok_or_else(|| bad("missing header".into()))?;
        if header.trim_end() != Self::CSV_HEADER {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let cells: Vec<&str> = line.trim_end().split(',').collect();
            if cells.len() != 7 {
                return Err(bad(format!("row {} has {} cells", i + 1, cells.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
            rows.push(EpochLogRow {
                epoch: cells[0].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?,
                phase: cells[1].parse()?,
                loss: num(cells[2])?,
                accuracy: num(cells[3])?,
                precision_macro: num(cells[4])?,
                recall_macro: num(cells[5])?,
                f1_macro: num(cells[6])?,
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_keeps_full_precision() {
        let rows = vec![
            EpochLogRow {
                epoch: 1,
                phase: Phase::Train,
                loss: 0.123456789012345,
                accuracy: 0.75,
                precision_macro: 2.0 / 3.0,
                recall_macro: 0.5,
                f1_macro: 0.571428571,
            },
            EpochLogRow {
                epoch: 1,
                phase: Phase::Val,
                loss: 1.5,
                accuracy: 1.0,
                precision_macro: 1.0,
                recall_macro: 1.0,
                f1_macro: 1.0,
            },
        ];
        let mut buf = Vec::new();
        EpochLogRow::write_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("epoch,phase,loss,accuracy,precision_macro,recall_macro,f1_macro\n1,train,"));
        assert_eq!(EpochLogRow::read_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(EpochLogRow::read_csv(&b"epoch,loss\n"[..]).is_err());
    }
}
