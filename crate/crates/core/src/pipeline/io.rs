//! JSON Lines datasets and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vocab::{tokenize, Token};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Serialize `records` one per line. Returns the record count and the
/// file's SHA-256.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<OutputRecord, IoError> {
    let mut buf = Vec::new();
    for (i, r) in records.iter().enumerate() {
        serde_json::to_writer(&mut buf, r).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        buf.push(b'\n');
    }
    fs::write(path, &buf).map_err(io_err(path))?;
    Ok(OutputRecord {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        records: records.len(),
        sha256: sha256_hex(&buf),
    })
}

/// Read one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// One text prompt per non-blank line, tokenized. Blank lines are dropped.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<Token>>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(tokenize).filter(|t| !t.is_empty()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputRecord {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

/// Written next to every set of artifacts. `complete` stays false until the
/// command has written all of its outputs, so an interrupted run is
/// recognisable. `config` holds the resolved settings and is enough to
/// replay the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub complete: bool,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilons: Option<Vec<f64>>,
    pub backend: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub outputs: BTreeMap<String, OutputRecord>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, backend: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            complete: false,
            seed: None,
            epsilon: None,
            epsilons: None,
            backend: backend.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, IoError> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|source| IoError::Json {
            path: path.clone(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        a: u32,
        b: Vec<Token>,
    }

    #[test]
    fn jsonl_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let recs = vec![
            Rec {
                a: 1,
                b: tokenize("x y"),
            },
            Rec { a: 2, b: vec![] },
        ];
        let out = write_jsonl(&path, &recs).unwrap();
        assert_eq!(out.records, 2);
        assert_eq!(out.file, "x.jsonl");
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "{\"a\":1,\"b\":[\"x\",\"y\"]}\n{\"a\":2,\"b\":[]}\n"
        );
        assert_eq!(out.sha256, sha256_file(&path).unwrap());
        assert_eq!(read_jsonl::<Rec>(&path).unwrap(), recs);
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"a\":1,\"b\":[]}\n\nnot json\n").unwrap();
        match read_jsonl::<Rec>(&path) {
            Err(IoError::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("run", "mock-0", serde_json::json!({"epsilon": 1.0}));
        m.seed = Some(7);
        m.epsilon = Some(1.0);
        let path = m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(&path).unwrap(), m);
    }

    #[test]
    fn token_lines_skip_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(&path, "Beaver builds dams.\n\n  \nthe cat\n").unwrap();
        assert_eq!(
            read_token_lines(&path).unwrap(),
            vec![tokenize("beaver builds dams"), tokenize("the cat")]
        );
    }
}
