//! Versioned metrics CSV.

use std::io::{BufRead, BufReader, Read, Write};

use thiserror::Error;

use crate::metrics::{MetricsRow, METRICS_COLUMNS};

pub const METRICS_MAGIC: &str = "# srt-metrics v1";

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("metrics file does not start with `{METRICS_MAGIC}` (found `{0}`)")]
    Schema(String),
    #[error("unexpected metrics columns: {0}")]
    Columns(String),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decimal rendering with 12 significant digits.
pub fn fmt_value(x: f64) -> String {
    format!("{x:.11e}")
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<(), CsvError> {
    writeln!(out, "{METRICS_MAGIC}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for row in rows {
        let mut rec = vec![row.step.to_string()];
        rec.extend(row.values().iter().map(|&v| fmt_value(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>, CsvError> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != METRICS_MAGIC {
        return Err(CsvError::Schema(first.trim_end().to_string()));
    }
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(CsvError::Columns(headers.iter().collect::<Vec<_>>().join(",")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| CsvError::Row { row: i + 1, reason };
        let step = rec[0].parse::<u64>().map_err(|e| bad(format!("step: {e}")))?;
        let mut values = [0.0; 12];
        for (j, v) in values.iter_mut().enumerate() {
            *v = rec[j + 1]
                .parse()
                .map_err(|e| bad(format!("{}: {e}", METRICS_COLUMNS[j + 1])))?;
        }
        rows.push(MetricsRow::from_values(step, values));
    }
    Ok(rows)
}

/// Joins per-run tables into one, prefixing each row with its run label.
pub fn combined_csv(runs: &[(String, Vec<MetricsRow>)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run"];
    header.extend(METRICS_COLUMNS);
    w.write_record(&header).expect("in-memory write");
    for (label, rows) in runs {
        for row in rows {
            let mut rec = vec![label.clone(), row.step.to_string()];
            rec.extend(row.values().iter().map(|&v| fmt_value(v)));
            w.write_record(&rec).expect("in-memory write");
        }
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("ascii");
    format!("{METRICS_MAGIC}\n{body}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, x: f64) -> MetricsRow {
        MetricsRow::from_values(step, [x, x / 3.0, x, x / 3.0, 0.0, 0.25, 1e-7, 1.5, 1.0, 0.125, 0.2, 0.0])
    }

    #[test]
    fn round_trip_is_stable() {
        let rows = vec![row(0, 0.3), row(20, 0.7)];
        let text = metrics_csv_string(&rows);
        let back = read_metrics_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.step, b.step);
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-11 * x.abs().max(1e-300));
            }
        }
        assert_eq!(metrics_csv_string(&back), text);
        assert_eq!(read_metrics_csv(metrics_csv_string(&back).as_bytes()).unwrap(), back);
    }

    #[test]
    fn empty_history_is_header_only() {
        let text = metrics_csv_string(&[]);
        assert_eq!(text.lines().count(), 2);
        assert!(read_metrics_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn schema_mismatch_rejected() {
        assert!(matches!(
            read_metrics_csv("# srt-metrics v0\nstep\n".as_bytes()),
            Err(CsvError::Schema(_))
        ));
        let wrong = format!("{METRICS_MAGIC}\nstep,avg_at_k\n0,1\n");
        assert!(matches!(read_metrics_csv(wrong.as_bytes()), Err(CsvError::Columns(_))));
    }
}
