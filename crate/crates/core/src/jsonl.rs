//! JSON and JSON-Lines serialization with a fixed float representation.
//!
//! Every `f64` is written as `{:.16e}` (17 significant digits), which is
//! enough to round-trip any finite double bit-exactly. All files produced
//! by this crate (measurement logs, checkpoints, reports) go through the
//! formatter in this module, so re-reading and re-writing a file is a
//! byte-identical operation and pipeline outputs can be hashed for
//! reproducibility checks.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// `serde_json` formatter that writes every f64 with 17 significant digits.
#[derive(Default)]
pub struct FixedFloatFormatter;

impl serde_json::ser::Formatter for FixedFloatFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{:.16e}", f64::from(value))
    }
}

/// Serializes one value to a JSON string with the fixed float format.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, JsonlError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloatFormatter);
    value.serialize(&mut ser)?;
    // serde_json only emits valid UTF-8
    Ok(String::from_utf8(buf).expect("serializer produced invalid utf-8"))
}

/// Writes one value as a single JSON document.
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonlError> {
    let mut out = BufWriter::new(File::create(path)?);
    let text = to_json_string(value)?;
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Reads one value from a single JSON document.
pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T, JsonlError> {
    let file = BufReader::new(File::open(path)?);
    serde_json::from_reader(file).map_err(|source| JsonlError::Parse { line: 1, source })
}

/// Writes an iterator of records as JSON Lines (one document per line).
pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<(), JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        let line = to_json_string(record)?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON Lines file into a vector, reporting the line number of the
/// first malformed record. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: idx + 1, source })?;
        records.push(record);
    }
    Ok(records)
}
