use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{ensure_arg, Error, Result};

pub const METRICS_HEADER: &str = "step,l_base,l_h,l_dc,l_total,stage_fraction_dff,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub l_base: f64,
    pub l_h: f64,
    pub l_dc: f64,
    pub l_total: f64,
    pub stage_fraction_dff: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_base, self.l_h, self.l_dc, self.l_total, self.stage_fraction_dff, self.wall_ms
        )
    }

    fn parse(line: &str, path: &Path) -> Result<Self> {
        let bad = || Error::Corrupt {
            path: path.into(),
            reason: format!("bad metrics row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            l_base: num(1)?,
            l_h: num(2)?,
            l_dc: num(3)?,
            l_total: num(4)?,
            stage_fraction_dff: num(5)?,
            wall_ms: num(6)?,
        })
    }
}

/// An append-only CSV of metrics rows with strictly increasing steps.
pub struct MetricsLog {
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// Reads every row of a metrics file.
    pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        match lines.next() {
            Some(Ok(h)) if h == METRICS_HEADER => {}
            _ => {
                return Err(Error::Corrupt {
                    path: path.into(),
                    reason: "missing metrics header".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.is_empty() {
                rows.push(MetricsRow::parse(&line, path)?);
            }
        }
        Ok(rows)
    }

    /// Opens `path` for appending, keeping only rows up to `upto_step`; a
    /// missing file starts a new log.
    pub fn open(path: &Path, upto_step: u64) -> Result<Self> {
        let rows = if path.exists() {
            let mut rows = Self::read(path)?;
            rows.retain(|r| r.step <= upto_step);
            rows
        } else {
            Vec::new()
        };
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.into(), rows })
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn append(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            ensure_arg!(row.step > last.step, "metrics step {} does not follow {}", row.step, last.step);
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))?;
        self.rows.push(row);
        Ok(())
    }
}
