//! Dataset persistence as JSON lines, one student record per line.
//!
//! Reads validate every record after parsing, so a file that deserializes
//! but breaks an invariant (say, a retained student with a cause) is
//! rejected with the offending student id.

use super::{DataError, StudentRecord};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

fn io_err(path: &Path, err: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

/// Serializes records to `writer`, one JSON object per line.
pub fn write_dataset_to<W: Write>(
    writer: W,
    records: &[StudentRecord],
) -> Result<(), DataError> {
    let mut out = BufWriter::new(writer);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| DataError::Io {
            path: "<writer>".to_string(),
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(|e| DataError::Io {
            path: "<writer>".to_string(),
            message: e.to_string(),
        })?;
    }
    out.flush().map_err(|e| DataError::Io {
        path: "<writer>".to_string(),
        message: e.to_string(),
    })?;
    Ok(())
}

/// Writes records to a file at `path`, replacing any existing content.
pub fn write_dataset(path: &Path, records: &[StudentRecord]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_dataset_to(file, records).map_err(|e| match e {
        DataError::Io { message, .. } => DataError::Io {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Parses records from `reader`; `origin` names the source in errors.
pub fn read_dataset_from<R: Read>(
    reader: R,
    origin: &str,
) -> Result<Vec<StudentRecord>, DataError> {
    let reader = BufReader::new(reader);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StudentRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: origin.to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Reads a JSON-lines dataset file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<StudentRecord>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_dataset_from(file, &path.display().to_string())
}
