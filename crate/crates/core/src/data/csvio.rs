use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::Dataset;
use crate::error::{Result, UfoError};
use crate::tensorops::DenseArray;

const NAIVE_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

/// Parses epoch seconds or an ISO-8601 timestamp (naive times are UTC).
fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for f in NAIVE_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

/// `YYYY-MM-DD HH:MM:SS` in UTC, the format [`write_csv`] emits.
pub fn format_timestamp(t: i64) -> String {
    DateTime::from_timestamp(t, 0)
        .map(|dt| dt.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| t.to_string())
}

/// Reads `date,<ch1>,...` CSV. Empty cells are missing.
pub fn read_csv(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |line: usize, message: String| UfoError::Parse { line, message };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(parse_err(1, "header needs a timestamp column and at least one channel".into()));
    }
    let channels: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let ts = rec.get(0).unwrap_or("");
        let t = parse_timestamp(ts).ok_or_else(|| parse_err(line, format!("unparseable timestamp '{ts}'")))?;
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(parse_err(line, format!("timestamp '{ts}' is not after the previous row")));
            }
        }
        timestamps.push(t);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("column '{}': bad number '{cell}'", channels[j])))?
            };
            data.push(v);
        }
    }
    let n = timestamps.len();
    Dataset::new(timestamps, DenseArray::from_vec(n, channels.len(), data)?, channels)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes the dataset in the format [`read_csv`] accepts.
pub fn write_csv(ds: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| UfoError::Io(std::io::Error::other(e));
    let mut header = vec!["date".to_string()];
    header.extend(ds.channels.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for i in 0..ds.len() {
        let mut row = vec![format_timestamp(ds.timestamps[i])];
        row.extend(ds.values.row(i).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
