use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::train::GenerationLog;

use super::write_atomic;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no generation logs to report")]
    Empty,
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("logs disagree on the layer set: generation {generation} lists {found:?}")]
    LayerSet { generation: usize, found: Vec<String> },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV row {row}: {msg}")]
    Parse { row: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    /// One JSON object per line, one line per generation.
    Structured,
}

/// One CSV summary row. Absent values stay `None` and render as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub generation: usize,
    pub dense_metric: f64,
    pub slim_metric: Option<f64>,
    pub sparsity: f64,
    /// `(layer, mean |w| over the fit-hypothesis, mean |w| over the reset-hypothesis)`.
    pub layers: Vec<(String, f64, Option<f64>)>,
    pub s_h2d: Option<f64>,
    pub c_h2d: Option<f64>,
}

impl From<&GenerationLog> for ReportRow {
    fn from(log: &GenerationLog) -> Self {
        Self {
            generation: log.generation,
            dense_metric: log.dense.primary(),
            slim_metric: log.slim.as_ref().map(|m| m.primary()),
            sparsity: log.sparsity,
            layers: log
                .hypothesis
                .iter()
                .map(|h| (h.node.clone(), h.mean_abs_fit, h.mean_abs_reset))
                .collect(),
            s_h2d: log.s_h2d,
            c_h2d: log.c_h2d,
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(logs: &[GenerationLog]) -> Result<String, ReportError> {
    let first = logs.first().ok_or(ReportError::Empty)?;
    let layers: Vec<&str> = first.hypothesis.iter().map(|h| h.node.as_str()).collect();
    let mut header = vec![
        "generation".to_string(),
        "dense_metric".into(),
        "slim_metric".into(),
        "sparsity".into(),
    ];
    header.extend(layers.iter().map(|l| format!("mean_abs_fit_{l}")));
    header.extend(layers.iter().map(|l| format!("mean_abs_reset_{l}")));
    header.extend(["s_h2d".to_string(), "c_h2d".into()]);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for log in logs {
        let row = ReportRow::from(log);
        if row.layers.len() != layers.len() || row.layers.iter().zip(&layers).any(|(a, b)| a.0 != *b) {
            return Err(ReportError::LayerSet {
                generation: row.generation,
                found: row.layers.into_iter().map(|l| l.0).collect(),
            });
        }
        let mut rec = vec![
            row.generation.to_string(),
            row.dense_metric.to_string(),
            cell(row.slim_metric),
            row.sparsity.to_string(),
        ];
        rec.extend(row.layers.iter().map(|l| l.1.to_string()));
        rec.extend(row.layers.iter().map(|l| cell(l.2)));
        rec.extend([cell(row.s_h2d), cell(row.c_h2d)]);
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn render_jsonl(logs: &[GenerationLog]) -> Result<String, ReportError> {
    if logs.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).expect("log serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Reads a CSV produced by [`render_csv`] back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n = header.len();
    if n < 6 || !(n - 6).is_multiple_of(2) || header[..4] != ["generation", "dense_metric", "slim_metric", "sparsity"] {
        return Err(ReportError::Parse {
            row: 0,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let nl = (n - 6) / 2;
    let layers: Vec<String> = header[4..4 + nl]
        .iter()
        .map(|h| h.strip_prefix("mean_abs_fit_").unwrap_or(h).to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let num = |j: usize| -> Result<Option<f64>, ReportError> {
            let s = &rec[j];
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| ReportError::Parse {
                row,
                msg: format!("column `{}`: `{s}` is not a number", header[j]),
            })
        };
        let req = |j: usize| {
            num(j)?.ok_or_else(|| ReportError::Parse {
                row,
                msg: format!("column `{}` is empty", header[j]),
            })
        };
        rows.push(ReportRow {
            generation: rec[0].parse().map_err(|_| ReportError::Parse {
                row,
                msg: format!("bad generation `{}`", &rec[0]),
            })?,
            dense_metric: req(1)?,
            slim_metric: num(2)?,
            sparsity: req(3)?,
            layers: (0..nl)
                .map(|l| Ok((layers[l].clone(), req(4 + l)?, num(4 + nl + l)?)))
                .collect::<Result<_, ReportError>>()?,
            s_h2d: num(n - 2)?,
            c_h2d: num(n - 1)?,
        });
    }
    Ok(rows)
}

/// Writes `summary.csv` and/or `logs.jsonl` under `dir`; returns the paths written.
pub fn emit_report(logs: &[GenerationLog], dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    for format in formats {
        let (name, text) = match format {
            ReportFormat::Csv => ("summary.csv", render_csv(logs)?),
            ReportFormat::Structured => ("logs.jsonl", render_jsonl(logs)?),
        };
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes()).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
