//! Canonical JSON serialization and JSONL file helpers.
//!
//! Every persistent format in this workspace is UTF-8 JSON or JSONL with
//! sorted object keys, so repeated runs can be compared byte for byte.
//! Sorting comes from routing serialization through [`serde_json::Value`],
//! whose object map is a `BTreeMap`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialize error: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> JsonIoError {
    JsonIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize with sorted object keys, no trailing newline.
pub fn canonical_string<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Pretty variant of [`canonical_string`], used for standalone .json files.
pub fn canonical_string_pretty<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), JsonIoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))
        .map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path)
        .map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Write one canonical JSON object per line, then atomically rename into place.
pub fn write_jsonl_atomic<T, I>(path: &Path, items: I) -> Result<usize, JsonIoError>
where
    T: Serialize,
    I: IntoIterator<Item = T>,
{
    let mut buf = String::new();
    let mut count = 0;
    for item in items {
        buf.push_str(&canonical_string(&item)?);
        buf.push('\n');
        count += 1;
    }
    write_atomic(path, buf.as_bytes())?;
    Ok(count)
}

/// Write a single canonical JSON document (pretty-printed) atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonIoError> {
    let mut s = canonical_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Read a JSONL file into a vector, reporting the offending line on failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonIoError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| JsonIoError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source: e,
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Read a single JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, JsonIoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| JsonIoError::Parse {
        path: path.display().to_string(),
        line: 0,
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Rec {
        zeta: u32,
        alpha: String,
    }

    #[test]
    fn keys_are_sorted() {
        let s = canonical_string(&Rec {
            zeta: 1,
            alpha: "x".into(),
        })
        .unwrap();
        assert_eq!(s, r#"{"alpha":"x","zeta":1}"#);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recs.jsonl");
        let items = vec![
            Rec {
                zeta: 1,
                alpha: "a".into(),
            },
            Rec {
                zeta: 2,
                alpha: "b".into(),
            },
        ];
        write_jsonl_atomic(&path, &items).unwrap();
        let back: Vec<Rec> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
    }
}
