//! The sensor-node CSV format.
//!
//! Header (required, in this order):
//! `timestamp,mox1,mox2,mox3,mox4,ec,temp,rh,ref_o3`. Timestamps are
//! ISO-8601 (`2017-06-01T00:00:00Z`, an offset, or no zone meaning UTC) or
//! integer Unix seconds. Rows with an empty cell (or `NA` / `NaN`) are
//! dropped and counted; any other unparsable cell is an error naming its
//! line. Rows are sorted by time, and a repeated timestamp is an error.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use stgat_core::data::{RawSeries, CHANNEL_NAMES, TARGET_NAME};

use crate::error::{Error, Result};

pub const TIMESTAMP_COLUMN: &str = "timestamp";

/// The expected header columns.
pub fn header() -> Vec<&'static str> {
    let mut h = vec![TIMESTAMP_COLUMN];
    h.extend(CHANNEL_NAMES);
    h.push(TARGET_NAME);
    h
}

/// A parsed corpus and the number of rows dropped for missing values.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub series: RawSeries,
    pub dropped_rows: usize,
}

pub fn read_csv(path: &Path) -> Result<Loaded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, path)
}

/// Parses CSV text from `reader`; `path` is only used in messages.
pub fn read_csv_from<R: Read>(reader: R, path: &Path) -> Result<Loaded> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let expected = header();
    if found != expected {
        return Err(csv_err(
            1,
            format!("header must be `{}`, found `{}`", expected.join(","), found.join(",")),
        ));
    }

    let width = expected.len();
    let mut rows: Vec<(i64, Vec<f64>)> = Vec::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(csv_err(line, format!("expected {width} fields, found {}", record.len())));
        }
        if record.iter().any(|cell| is_missing(cell.trim())) {
            dropped += 1;
            continue;
        }
        let ts = parse_timestamp(record[0].trim()).map_err(|m| csv_err(line, m))?;
        let mut values = Vec::with_capacity(width - 1);
        for (col, cell) in expected[1..].iter().zip(record.iter().skip(1)) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| csv_err(line, format!("column {col}: `{}` is not a number", cell.trim())))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("column {col}: value must be finite")));
            }
            values.push(v);
        }
        rows.push((ts, values));
    }
    if rows.is_empty() {
        return Err(csv_err(1, "no complete data rows".into()));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateTimestamp {
            path: path.to_path_buf(),
            timestamp: w[0].0,
        });
    }

    let channels_n = CHANNEL_NAMES.len();
    let mut timestamps = Vec::with_capacity(rows.len());
    let mut channels = Vec::with_capacity(rows.len() * channels_n);
    let mut target = Vec::with_capacity(rows.len());
    for (ts, values) in rows {
        timestamps.push(ts);
        channels.extend_from_slice(&values[..channels_n]);
        target.push(values[channels_n]);
    }
    let series = RawSeries::new(
        timestamps,
        CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        channels,
        target,
    )?;
    Ok(Loaded {
        series,
        dropped_rows: dropped,
    })
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

/// Unix seconds from an integer or an ISO-8601 date-time.
pub fn parse_timestamp(cell: &str) -> std::result::Result<i64, String> {
    if let Ok(v) = cell.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(cell) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(format!("`{cell}` is neither Unix seconds nor an ISO-8601 date-time"))
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0).map_or_else(|| ts.to_string(), |dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
}

/// Writes `series` in the documented schema. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv_to<W: Write>(writer: W, series: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header()).map_err(fmt_err)?;
    let mut record = Vec::with_capacity(header().len());
    for t in 0..series.len() {
        record.clear();
        record.push(format_timestamp(series.timestamps()[t]));
        record.extend(series.row(t).iter().map(|v| v.to_string()));
        record.push(series.target()[t].to_string());
        w.write_record(&record).map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn write_csv(path: &Path, series: &RawSeries) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(std::io::BufWriter::new(file), series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Loaded> {
        read_csv_from(text.as_bytes(), Path::new("test.csv"))
    }

    const HEAD: &str = "timestamp,mox1,mox2,mox3,mox4,ec,temp,rh,ref_o3\n";

    #[test]
    fn reads_well_formed_rows() {
        let text = format!(
            "{HEAD}2017-06-01T00:00:00Z,1,2,3,4,5,20,50,60\n\
             2017-06-01T01:00:00Z,1,2,3,4,5,20,50,61\n\
             1496282400,1,2,3,4,5,20,50,62\n"
        );
        let loaded = parse(&text).unwrap();
        assert_eq!(loaded.series.len(), 3);
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.series.timestamps()[0], 1_496_275_200);
        assert_eq!(loaded.series.target(), &[60.0, 61.0, 62.0]);
    }

    #[test]
    fn drops_rows_with_empty_cells() {
        let text = format!("{HEAD}0,1,2,3,4,5,20,50,60\n3600,1,,3,4,5,20,50,61\n7200,1,2,3,4,5,20,50,62\n");
        let loaded = parse(&text).unwrap();
        assert_eq!(loaded.series.len(), 2);
        assert_eq!(loaded.dropped_rows, 1);
    }

    #[test]
    fn sorts_rows_and_rejects_duplicates() {
        let text = format!("{HEAD}7200,1,2,3,4,5,20,50,62\n0,1,2,3,4,5,20,50,60\n");
        assert_eq!(parse(&text).unwrap().series.timestamps(), &[0, 7200]);
        let dup = format!("{HEAD}0,1,2,3,4,5,20,50,60\n0,1,2,3,4,5,20,50,61\n");
        assert!(matches!(parse(&dup), Err(Error::DuplicateTimestamp { timestamp: 0, .. })));
    }

    #[test]
    fn malformed_row_names_its_line() {
        let text = format!("{HEAD}0,1,2,3,4,5,20,50,60\n3600,1,x,3,4,5,20,50,61\n");
        match parse(&text) {
            Err(Error::Csv { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("mox2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let short = format!("{HEAD}0,1,2\n");
        assert!(matches!(parse(&short), Err(Error::Csv { line: 2, .. })));
    }

    #[test]
    fn rejects_wrong_header() {
        let text = "timestamp,a,b\n0,1,2\n";
        assert!(matches!(parse(text), Err(Error::Csv { line: 1, .. })));
    }

    #[test]
    fn write_then_read_is_exact() {
        let series = stgat_core::data::synthesize(&stgat_core::data::SynthConfig {
            len: 50,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &series).unwrap();
        let back = read_csv_from(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.series, series);
    }
}
