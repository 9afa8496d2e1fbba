//! Line-delimited record files: one header object, then one record object per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::record::{EmbeddingRecord, MAX_IMAGES};

pub const RECORD_FORMAT: &str = "cirm-records";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub n_max: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    text: Vec<Vec<f64>>,
    images: Vec<Vec<f64>>,
    ocr: Vec<Vec<f64>>,
    ocr_present: Vec<u8>,
    rating: u8,
    label: u8,
}

/// Parsed contents of a record file.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordFile {
    pub d: usize,
    pub n_max: usize,
    pub records: Vec<EmbeddingRecord>,
}

fn line_of(record: &EmbeddingRecord) -> Result<String> {
    let finite = record.text.is_finite() && record.images.is_finite() && record.ocr.is_finite();
    if !finite {
        return Err(Error::Data(format!("record `{}` holds non-finite values", record.id)));
    }
    let line = RecordLine {
        id: record.id.clone(),
        text: record.text.to_rows(),
        images: record.images.to_rows(),
        ocr: record.ocr.to_rows(),
        ocr_present: record.ocr_present.iter().map(|&p| p as u8).collect(),
        rating: record.rating,
        label: record.label,
    };
    Ok(serde_json::to_string(&line).expect("record lines always serialize"))
}

pub fn records_to_string(records: &[EmbeddingRecord], d: usize) -> Result<String> {
    let header = RecordHeader { format: RECORD_FORMAT.into(), version: FORMAT_VERSION, d, n_max: MAX_IMAGES };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        if r.dim() != d {
            return Err(Error::Data(format!("record `{}` has d={}, file has d={d}", r.id, r.dim())));
        }
        r.validate(MAX_IMAGES)?;
        out.push_str(&line_of(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EmbeddingRecord], d: usize) -> Result<()> {
    let text = records_to_string(records, d)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn matrix(rows: Vec<Vec<f64>>, d: usize, field: &str) -> std::result::Result<Tensor, String> {
    if rows.iter().any(|r| r.len() != d) {
        return Err(format!("field `{field}`: every row must have {d} values"));
    }
    let n = rows.len();
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
}

fn record_from_line(line: RecordLine, d: usize, n_max: usize) -> std::result::Result<EmbeddingRecord, String> {
    if line.ocr_present.iter().any(|&p| p > 1) {
        return Err("field `ocr_present`: entries must be 0 or 1".into());
    }
    let record = EmbeddingRecord {
        id: line.id,
        text: matrix(line.text, d, "text")?,
        images: matrix(line.images, d, "images")?,
        ocr: matrix(line.ocr, d, "ocr")?,
        ocr_present: line.ocr_present.iter().map(|&p| p == 1).collect(),
        rating: line.rating,
        label: line.label,
    };
    record.validate(n_max).map_err(|e| e.to_string())?;
    Ok(record)
}

/// Parses a record file held in memory. `source` names it in error messages.
pub fn parse_records(text: &str, source: &str) -> Result<RecordFile> {
    let parse_err = |line: usize, message: String| Error::Parse { path: source.to_string(), line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let header: RecordHeader = serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != RECORD_FORMAT || header.version != FORMAT_VERSION {
        return Err(parse_err(
            1,
            format!("expected format `{RECORD_FORMAT}` version {FORMAT_VERSION}, got `{}` version {}", header.format, header.version),
        ));
    }
    if header.n_max != MAX_IMAGES {
        return Err(parse_err(1, format!("field `n_max`: expected {MAX_IMAGES}, got {}", header.n_max)));
    }
    let mut records = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(line).map_err(|e| parse_err(no, e.to_string()))?;
        records.push(record_from_line(parsed, header.d, header.n_max).map_err(|m| parse_err(no, m))?);
    }
    Ok(RecordFile { d: header.d, n_max: header.n_max, records })
}

pub fn read_records(path: &Path) -> Result<RecordFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}
