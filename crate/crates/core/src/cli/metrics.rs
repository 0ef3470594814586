//! CSV metrics log, flushed after every row.

use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};

pub struct MetricsWriter {
    writer: csv::Writer<File>,
    width: usize,
}

impl MetricsWriter {
    /// Create (truncating) a log and write its header.
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = csv::Writer::from_writer(File::create(path)?);
        writer.write_record(columns)?;
        writer.flush()?;
        Ok(Self { writer, width: columns.len() })
    }

    /// Continue an existing log with the same header, or start a new one.
    pub fn append(path: &Path, columns: &[&str]) -> Result<Self> {
        if !path.exists() || std::fs::metadata(path)?.len() == 0 {
            return Self::create(path, columns);
        }
        let (header, _) = read_metrics(path)?;
        if header != columns {
            return Err(Error::Data(format!("{} has columns {header:?}, expected {columns:?}", path.display())));
        }
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { writer: csv::WriterBuilder::new().has_headers(false).from_writer(file), width: columns.len() })
    }

    pub fn write_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::Shape(format!("metrics row has {} values, header has {}", row.len(), self.width)));
        }
        // `Display` for f64 prints the shortest string that parses back to
        // the same value.
        self.writer.write_record(row.iter().map(|v| v.to_string()))?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn write_metrics(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = MetricsWriter::create(path, columns)?;
    for r in rows {
        w.write_row(r)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse { line: i + 2, message: e.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
