//! `metrics.csv` writer and reader.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "step,mean_reward,eval_reward,loss,clip_frac,grad_norm,tokens";

/// One metrics row. Training rows leave `eval_reward` empty; evaluation rows
/// fill only `step` and `eval_reward`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: Option<f64>,
    pub eval_reward: Option<f64>,
    pub loss: Option<f64>,
    pub clip_frac: Option<f64>,
    pub grad_norm: Option<f64>,
    pub tokens: Option<usize>,
}

impl MetricsRow {
    pub fn eval(step: usize, reward: f64) -> Self {
        MetricsRow {
            step,
            eval_reward: Some(reward),
            ..MetricsRow::default()
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(format_sig9).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            f(self.mean_reward),
            f(self.eval_reward),
            f(self.loss),
            f(self.clip_frac),
            f(self.grad_norm),
            self.tokens.map(|t| t.to_string()).unwrap_or_default()
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return None;
        }
        let f = |s: &str| -> Option<Option<f64>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        };
        Some(MetricsRow {
            step: cols[0].parse().ok()?,
            mean_reward: f(cols[1])?,
            eval_reward: f(cols[2])?,
            loss: f(cols[3])?,
            clip_frac: f(cols[4])?,
            grad_norm: f(cols[5])?,
            tokens: if cols[6].is_empty() {
                None
            } else {
                Some(cols[6].parse().ok()?)
            },
        })
    }
}

/// Plain decimal with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    // rounding can carry into the next decade, so take the exponent from
    // the rounded scientific form
    let sci = format!("{v:.8e}");
    let exp: i32 = sci.split_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    let decimals = (8 - exp).max(0) as usize;
    let rounded: f64 = sci.parse().unwrap_or(v);
    format!("{rounded:.decimals$}")
}

/// Row sink that flushes after every row. Rows are also kept in memory.
pub struct MetricsWriter {
    out: Option<(PathBuf, File)>,
    rows: Vec<MetricsRow>,
}

impl MetricsWriter {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: Some((path.to_path_buf(), file)),
            rows: Vec::new(),
        })
    }

    pub fn in_memory() -> Self {
        MetricsWriter {
            out: None,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some((path, file)) = &mut self.out {
            writeln!(file, "{}", row.to_csv()).map_err(|e| Error::io(&*path, e))?;
            file.flush().map_err(|e| Error::io(&*path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != HEADER {
                return Err(Error::parse(path, 1, "unexpected metrics header"));
            }
            continue;
        }
        rows.push(MetricsRow::parse(&line).ok_or_else(|| Error::parse(path, i + 1, "malformed metrics row"))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_examples() {
        assert_eq!(format_sig9(0.5), "0.500000000");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(-0.000123456789123), "-0.000123456789");
        assert_eq!(format_sig9(9.999999999), "10.0000000");
        assert_eq!(format_sig9(0.0), "0");
    }

    #[test]
    fn header_only_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        MetricsWriter::create(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{HEADER}\n"));
        let mut w = MetricsWriter::create(&p).unwrap();
        for s in 0..3 {
            w.push(MetricsRow::eval(s, 0.25)).unwrap();
        }
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
        assert_eq!(read_metrics(&p).unwrap(), w.rows());
    }
}
