//! JSONL ingestion with line-addressed errors, and report writers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DecisionRecord;
use crate::signals::ResponseSample;

/// A JSONL record type with its own invariants.
pub trait Record: DeserializeOwned {
    fn check(&self) -> Result<()>;
}

impl Record for ResponseSample {
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl Record for DecisionRecord {
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

/// Blank lines are ignored and not counted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines_read: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub errors: Vec<LineError>,
}

fn parse_line<T: Record>(bytes: &[u8]) -> std::result::Result<T, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| format!("invalid UTF-8: {e}"))?;
    let record: T = serde_json::from_str(text).map_err(|e| e.to_string())?;
    record.check().map_err(|e| e.to_string())?;
    Ok(record)
}

/// Parses JSONL from memory. Line numbers are 1-based.
pub fn ingest_bytes<T: Record>(data: &[u8], mode: IngestMode) -> Result<(Vec<T>, IngestReport)> {
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for (i, raw) in data.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        report.lines_read += 1;
        match parse_line::<T>(raw) {
            Ok(r) => {
                records.push(r);
                report.accepted += 1;
            }
            Err(reason) => {
                if mode == IngestMode::Strict {
                    return Err(Error::Parse { line: i + 1, reason });
                }
                report.rejected += 1;
                report.errors.push(LineError { line: i + 1, reason });
            }
        }
    }
    if report.accepted == 0 {
        return Err(Error::EmptyInput);
    }
    Ok((records, report))
}

pub fn ingest_file<T: Record>(path: &Path, mode: IngestMode) -> Result<(Vec<T>, IngestReport)> {
    let data = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    ingest_bytes(&data, mode)
}

pub fn ingest_samples(path: &Path, mode: IngestMode) -> Result<(Vec<ResponseSample>, IngestReport)> {
    ingest_file(path, mode)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    // going through Value sorts object keys
    let v = serde_json::to_value(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"query_id":"q1","sample_id":0,"token_logprobs":[-0.1,-0.2],"correct":true}
{"query_id":"q1","sample_id":1,"token_logprobs":[-1.0],"correct":false,"answer":"x"}
{"query_id":"q2","sample_id":0,"token_logprobs":[0.0],"correct":true}
"#;

    #[test]
    fn three_valid_lines() {
        let (s, r) = ingest_bytes::<ResponseSample>(GOOD.as_bytes(), IngestMode::Strict).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!((r.lines_read, r.accepted, r.rejected), (3, 3, 0));
        let again = ingest_bytes::<ResponseSample>(GOOD.as_bytes(), IngestMode::Strict).unwrap().1;
        assert_eq!(r, again);
    }

    #[test]
    fn strict_names_the_line() {
        let bad = format!("{GOOD}\n{{\"query_id\":\"q3\",\"sample_id\":0,\"token_logprobs\":[0.5],\"correct\":true}}\n");
        match ingest_bytes::<ResponseSample>(bad.as_bytes(), IngestMode::Strict) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let (s, r) = ingest_bytes::<ResponseSample>(bad.as_bytes(), IngestMode::Lenient).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!((r.lines_read, r.accepted, r.rejected), (4, 3, 1));
        assert_eq!(r.errors[0].line, 5);
    }

    #[test]
    fn unknown_keys_and_bad_utf8_rejected() {
        let extra = r#"{"query_id":"q","sample_id":0,"token_logprobs":[-1.0],"correct":true,"extra":1}"#;
        assert!(ingest_bytes::<ResponseSample>(extra.as_bytes(), IngestMode::Strict).is_err());
        let mut bytes = GOOD.as_bytes().to_vec();
        bytes.extend_from_slice(b"\xff\xfe\n");
        assert!(matches!(
            ingest_bytes::<ResponseSample>(&bytes, IngestMode::Strict),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(ingest_bytes::<ResponseSample>(b"\n\n", IngestMode::Lenient), Err(Error::EmptyInput)));
        assert!(matches!(ingest_bytes::<ResponseSample>(b"{}\n", IngestMode::Lenient), Err(Error::EmptyInput)));
    }

    #[test]
    fn missing_file_is_io() {
        let e = ingest_samples(Path::new("/nonexistent/x.jsonl"), IngestMode::Strict).unwrap_err();
        assert!(matches!(e, Error::Io(_)));
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn json_keys_sorted() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        let s = to_json_string(&S { zeta: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
    }
}

#[cfg(test)]
mod fuzz {
    use super::*;
    use proptest::prelude::*;

    const LINE: &str = r#"{"query_id":"q7","sample_id":3,"token_logprobs":[-0.25,-1.5,0.0],"correct":false,"answer":"May 19"}"#;

    proptest! {
        /// A mutated line is accepted only if it independently parses and
        /// validates, and what is accepted is exactly what the text says.
        #[test]
        fn mutated_lines_are_valid_or_rejected(pos in 0usize..LINE.len(), byte in any::<u8>()) {
            let mut bytes = LINE.as_bytes().to_vec();
            bytes[pos] = byte;
            let result = ingest_bytes::<ResponseSample>(&bytes, IngestMode::Lenient);
            let independent = std::str::from_utf8(&bytes)
                .ok()
                .and_then(|t| serde_json::from_str::<ResponseSample>(t.trim()).ok())
                .filter(|s| s.validate().is_ok());
            match (result, independent) {
                (Ok((records, report)), Some(expected)) => {
                    prop_assert_eq!(report.accepted, 1);
                    prop_assert_eq!(&records[0], &expected);
                    let again: ResponseSample = serde_json::from_str(&serde_json::to_string(&records[0]).unwrap()).unwrap();
                    prop_assert_eq!(&again, &records[0]);
                }
                (Err(Error::EmptyInput), None) => {}
                (r, e) => prop_assert!(false, "ingest {:?} vs independent {:?}", r.map(|x| x.1), e),
            }
        }
    }
}
