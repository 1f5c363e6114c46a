//! CSV records and JSON sidecars.
//!
//! Record CSV layout: header `record_id,time_kyr,value`, one sample per row.
//! Rows of one record may appear in any order and are sorted by time.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{MissamplingField, Record, RecordSet, SinusoidModel};

pub const RECORD_HEADER: [&str; 3] = ["record_id", "time_kyr", "value"];

/// Ground truth written next to a simulated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub model: SinusoidModel,
    pub missampling: MissamplingField,
    pub noise_var: f64,
    pub snr_db: f64,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_records<R: Read>(reader: R) -> Result<RecordSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "empty input"));
    }
    if header.iter().ne(RECORD_HEADER.iter().copied()) {
        return Err(parse_err(1, format!("expected header {}", RECORD_HEADER.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(f64, f64)>> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", row.len())));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad {what} '{}'", &row[i])))
        };
        let (t, v) = (num(1, "time")?, num(2, "value")?);
        let slot = match order.iter().position(|id| id == &row[0]) {
            Some(i) => i,
            None => {
                order.push(row[0].to_string());
                rows.push(Vec::new());
                order.len() - 1
            }
        };
        rows[slot].push((t, v));
    }
    if order.is_empty() {
        return Err(parse_err(1, "no data rows"));
    }
    let records = order
        .into_iter()
        .zip(rows)
        .map(|(id, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (t, v) = pts.into_iter().unzip();
            Record::new(id, t, v)
        })
        .collect::<Result<Vec<_>>>()?;
    RecordSet::new(records)
}

pub fn read_records(path: &Path) -> Result<RecordSet> {
    parse_records(File::open(path)?)
}

pub fn write_records<W: Write>(records: &RecordSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORD_HEADER)?;
    for r in records.iter() {
        for (t, v) in r.times().iter().zip(r.values()) {
            w.write_record([r.id(), &t.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_records(records: &RecordSet, path: &Path) -> Result<()> {
    write_records(records, File::create(path)?)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}
