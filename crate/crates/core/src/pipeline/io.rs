//! Atomic JSONL artifacts and run manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

/// An output file written to `<path>.partial` and renamed on [`Artifact::commit`].
/// Dropping an uncommitted artifact leaves the partial file for inspection.
pub struct Artifact {
    path: PathBuf,
    partial: PathBuf,
    writer: BufWriter<File>,
    hasher: Sha256,
    records: usize,
}

impl Artifact {
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let partial = partial_path(path);
        let file = File::create(&partial).map_err(|e| PipelineError::io(&partial, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            partial,
            writer: BufWriter::new(file),
            hasher: Sha256::new(),
            records: 0,
        })
    }

    pub fn write_line(&mut self, line: &str) -> Result<(), PipelineError> {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.records += 1;
        writeln!(self.writer, "{line}").map_err(|e| PipelineError::io(&self.partial, e))
    }

    pub fn write_json<T: Serialize>(&mut self, value: &T) -> Result<(), PipelineError> {
        let line = serde_json::to_string(value).expect("record serializes");
        self.write_line(&line)
    }

    pub fn commit(mut self) -> Result<FileDigest, PipelineError> {
        self.writer
            .flush()
            .map_err(|e| PipelineError::io(&self.partial, e))?;
        std::fs::rename(&self.partial, &self.path).map_err(|e| PipelineError::io(&self.path, e))?;
        Ok(FileDigest {
            path: self.path.display().to_string(),
            sha256: hex::encode(self.hasher.finalize()),
            records: Some(self.records),
        })
    }
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// `<output>.<suffix>`, used for manifests and secondary outputs.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
}

pub fn digest_file(path: &Path) -> Result<FileDigest, PipelineError> {
    let mut file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| PipelineError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
        records: None,
    })
}

/// Non-blank lines of a JSONL file with their 1-based line numbers.
pub fn jsonl_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String), PipelineError>>, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let display = path.display().to_string();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(PipelineError::Input(format!("{display}:{}: {e}", i + 1)))),
        }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub read: usize,
    pub written: usize,
    pub dropped: usize,
}

/// Everything needed to reproduce or audit a run. Contains no timestamps, so
/// reruns with the same inputs and config produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counts: RunCounts,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let partial = partial_path(path);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&partial, text).map_err(|e| PipelineError::io(&partial, e))?;
        std::fs::rename(&partial, path).map_err(|e| PipelineError::io(path, e))
    }
}
