use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;

/// One scored (model, test split) pair, or an aggregate over several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub ppl: f64,
    pub nats: f64,
    pub tokens: usize,
    pub flops: u64,
    /// Adapter ids that were averaged (or ensembled); empty for the bare base.
    pub members: Vec<String>,
    pub split: String,
    pub corpus_hash: String,
}

impl Cell {
    pub fn consistent(&self) -> bool {
        self.ppl == self.nats.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// One entry per report domain; `None` marks an absent cell.
    pub cells: Vec<Option<Cell>>,
    pub note: Option<String>,
}

impl ReportRow {
    /// Unweighted mean over domains; absent when any cell is.
    pub fn average(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.cells.iter().map(|c| c.as_ref().map(|c| c.ppl)).collect();
        let vals = vals?;
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Methods × domains perplexity matrix plus run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub metadata: serde_json::Value,
}

pub type Matrix = (Vec<String>, Vec<(String, Vec<Option<f64>>)>);

impl EvalReport {
    pub fn new(title: &str, domains: Vec<String>) -> Self {
        Self {
            title: title.to_string(),
            domains,
            rows: Vec::new(),
            metadata: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn push_row(&mut self, method: &str, cells: Vec<Option<Cell>>, note: Option<String>) -> Result<()> {
        if cells.len() != self.domains.len() {
            return Err(crate::error::dim(format!(
                "row {method} has {} cells for {} domains",
                cells.len(),
                self.domains.len()
            )));
        }
        if let Some(c) = cells.iter().flatten().find(|c| !c.consistent()) {
            return Err(Error::Numeric(format!("row {method}: ppl {} is not exp({})", c.ppl, c.nats)));
        }
        self.rows.push(ReportRow {
            method: method.to_string(),
            cells,
            note,
        });
        Ok(())
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn cell(&self, method: &str, domain: &str) -> Option<&Cell> {
        let j = self.domains.iter().position(|d| d == domain)?;
        self.row(method)?.cells[j].as_ref()
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(m) = &mut self.metadata {
            m.insert(key.to_string(), value);
        }
    }

    /// Header (domains then `Avg`) and per-method perplexities.
    pub fn matrix(&self) -> Matrix {
        let mut header = self.domains.clone();
        header.push("Avg".into());
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut v: Vec<Option<f64>> = r.cells.iter().map(|c| c.as_ref().map(|c| c.ppl)).collect();
                v.push(r.average());
                (r.method.clone(), v)
            })
            .collect();
        (header, rows)
    }

    pub fn any_absent(&self) -> bool {
        self.rows.iter().any(|r| r.cells.iter().any(Option::is_none))
    }

    /// Fixed-width console table, one decimal.
    pub fn render(&self) -> String {
        let (header, rows) = self.matrix();
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let widths: Vec<usize> = header.iter().map(|h| h.len().max(7)).collect();
        let mut s = format!("{}\n{:w0$}", self.title, "");
        for (h, w) in header.iter().zip(&widths) {
            let _ = write!(s, "  {h:>w$}");
        }
        s.push('\n');
        for (m, vals) in rows {
            let _ = write!(s, "{m:w0$}");
            for (v, w) in vals.iter().zip(&widths) {
                match v {
                    Some(v) => {
                        let _ = write!(s, "  {v:>w$.1}");
                    }
                    None => {
                        let _ = write!(s, "  {:>w$}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// Method × domain matrix with an `Avg` column.
    Csv,
    Json,
    /// One `method,domain,ppl,nats,tokens` line per cell.
    LongCsv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::LongCsv];
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub long_csv: Option<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(f: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w).expect("in-memory csv");
    w.into_inner().expect("in-memory csv")
}

/// Writes `<stem>.csv`, `<stem>.json` and `<stem>_long.csv` under `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = ReportFiles::default();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                let (header, rows) = report.matrix();
                let bytes = csv_bytes(|w| {
                    w.write_record(std::iter::once("method".to_string()).chain(header.iter().cloned()))?;
                    for (m, vals) in &rows {
                        w.write_record(std::iter::once(m.clone()).chain(vals.iter().map(|v| fmt_opt(*v))))?;
                    }
                    Ok(())
                });
                let p = dir.join(format!("{stem}.csv"));
                write_atomic(&p, &bytes)?;
                files.csv = Some(p);
            }
            ReportFormat::Json => {
                let p = dir.join(format!("{stem}.json"));
                write_atomic(&p, report.to_json().as_bytes())?;
                files.json = Some(p);
            }
            ReportFormat::LongCsv => {
                let bytes = csv_bytes(|w| {
                    w.write_record(["method", "domain", "ppl", "nats", "tokens"])?;
                    for r in &report.rows {
                        for (d, c) in report.domains.iter().zip(&r.cells) {
                            w.write_record([
                                r.method.clone(),
                                d.clone(),
                                fmt_opt(c.as_ref().map(|c| c.ppl)),
                                fmt_opt(c.as_ref().map(|c| c.nats)),
                                c.as_ref().map(|c| c.tokens.to_string()).unwrap_or_default(),
                            ])?;
                        }
                    }
                    Ok(())
                });
                let p = dir.join(format!("{stem}_long.csv"));
                write_atomic(&p, &bytes)?;
                files.long_csv = Some(p);
            }
        }
    }
    Ok(files)
}

/// Parses a matrix CSV written by [`emit_report`].
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("method") {
        return Err(bad("first column must be `method`".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                if v.is_empty() {
                    Ok(None)
                } else {
                    v.parse::<f64>().map(Some).map_err(|e| bad(format!("{v}: {e}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].to_string(), vals));
    }
    Ok((header[1..].to_vec(), rows))
}
