//! Metrics CSV: fixed column order, floats in `{:.8e}` (nine significant digits).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::thread::JoinHandle;

use super::flip::FlipStats;
use super::record::MetricsRecord;
use crate::error::{LabError, Result};
use crate::training::Stage;

pub fn csv_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "lm_loss", "reg_loss", "lambda", "lr", "S_overall"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..layers).map(|l| format!("S_layer_{l}")));
    h.extend(
        ["mean_active", "stage", "flip_rate", "flip_count"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn format_row(r: &MetricsRecord) -> Vec<String> {
    let mut row = vec![r.step.to_string()];
    row.extend([r.lm_loss, r.reg_loss, r.lambda, r.lr, r.s_overall].map(num));
    row.extend(r.s_per_layer.iter().map(|&s| num(s)));
    row.push(num(r.mean_active));
    row.push(r.stage.label().to_string());
    match r.flip {
        Some(f) => row.extend([num(f.flip_rate), num(f.flip_count)]),
        None => row.extend([String::new(), String::new()]),
    }
    row
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes all records at once; zero records yields a header-only file.
pub fn write_csv(path: &Path, layers: usize, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(csv_header(layers)).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record(format_row(r)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Reads a metrics CSV back. The per-expert matrix is not stored and
/// comes back empty.
pub fn parse_csv(path: &Path, text: &str) -> Result<Vec<MetricsRecord>> {
    let bad = |reason: String| LabError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    let layers = header.iter().filter(|h| h.starts_with("S_layer_")).count();
    if header.iter().collect::<Vec<_>>() != csv_header(layers) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let f = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|e| {
                bad(format!(
                    "row {}: column {}: {e}",
                    line + 1,
                    header.get(i).unwrap_or("?")
                ))
            })
        };
        let step = field(0)
            .parse::<usize>()
            .map_err(|e| bad(format!("row {}: step: {e}", line + 1)))?;
        let s_per_layer = (0..layers).map(|l| f(6 + l)).collect::<Result<Vec<_>>>()?;
        let base = 6 + layers;
        let stage = Stage::from_label(field(base + 1))
            .ok_or_else(|| bad(format!("row {}: stage {:?}", line + 1, field(base + 1))))?;
        let flip = if field(base + 2).is_empty() {
            None
        } else {
            Some(FlipStats {
                flip_rate: f(base + 2)?,
                flip_count: f(base + 3)?,
                calibration_id: 0,
            })
        };
        out.push(MetricsRecord {
            step,
            lm_loss: f(1)?,
            reg_loss: f(2)?,
            lambda: f(3)?,
            lr: f(4)?,
            s_overall: f(5)?,
            s_per_layer,
            f_matrix: Vec::new(),
            mean_active: f(base)?,
            stage,
            flip,
        });
    }
    Ok(out)
}

/// Background writer: records arrive over a channel and each row is
/// flushed as soon as it is written, so an interrupted run leaves a
/// parsable prefix.
pub struct CsvAppender {
    tx: Option<Sender<MetricsRecord>>,
    handle: Option<JoinHandle<Result<usize>>>,
    path: PathBuf,
}

impl CsvAppender {
    pub fn create(path: &Path, layers: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(csv_header(layers)).map_err(|e| csv_err(path, e))?;
        w.flush().map_err(|e| LabError::io(path, e))?;
        let (tx, rx) = channel::<MetricsRecord>();
        let owned = path.to_path_buf();
        let handle = std::thread::spawn(move || -> Result<usize> {
            let mut n = 0;
            for r in rx {
                w.write_record(format_row(&r)).map_err(|e| csv_err(&owned, e))?;
                w.flush().map_err(|e| LabError::io(&owned, e))?;
                n += 1;
            }
            w.into_inner()
                .map_err(|e| LabError::io(&owned, e.into_error()))?
                .flush()
                .map_err(|e| LabError::io(&owned, e))?;
            Ok(n)
        });
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
            path: path.to_path_buf(),
        })
    }

    pub fn send(&self, record: MetricsRecord) -> Result<()> {
        let tx = self.tx.as_ref().expect("appender open");
        tx.send(record)
            .map_err(|_| LabError::Invariant(format!("{}: metrics writer stopped", self.path.display())))
    }

    /// Closes the channel and returns the number of rows written.
    pub fn finish(mut self) -> Result<usize> {
        self.close()
    }

    fn close(&mut self) -> Result<usize> {
        self.tx.take();
        match self.handle.take() {
            Some(h) => h
                .join()
                .map_err(|_| LabError::Invariant("metrics writer panicked".into()))?,
            None => Ok(0),
        }
    }
}

impl Drop for CsvAppender {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
