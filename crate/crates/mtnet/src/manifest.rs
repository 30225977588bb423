//! JSON-lines manifests for utterances and noise clips.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: String,
    pub word_id: usize,
    pub speaker_id: usize,
    pub transcript: String,
    pub noise_type: String,
    /// `None` for clean audio.
    pub snr_db: Option<f64>,
    /// Word excluded from training.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub audio_path: String,
    pub noise_type: String,
}

/// Character ids of a transcript: `a..z` map to `1..=26` (0 is the blank).
pub fn encode_transcript(text: &str) -> Option<Vec<usize>> {
    let ids: Option<Vec<usize>> = text
        .chars()
        .map(|c| c.is_ascii_lowercase().then(|| (c as u8 - b'a') as usize + 1))
        .collect();
    ids.filter(|v| !v.is_empty())
}

pub fn resolve(manifest: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    match p.is_absolute() {
        true => p.to_path_buf(),
        false => manifest.parent().unwrap_or(Path::new(".")).join(p),
    }
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Manifest {
            path: path.into(),
            line: 0,
            reason: e.to_string(),
        })?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io(path))
}

pub fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.into(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

/// Reads utterance records and validates their transcripts.
pub fn read_utterances(path: &Path) -> Result<Vec<Record>> {
    let records: Vec<Record> = read(path)?;
    for (i, r) in records.iter().enumerate() {
        if encode_transcript(&r.transcript).is_none() {
            return Err(Error::Manifest {
                path: path.into(),
                line: i + 1,
                reason: format!("transcript {:?} must be non-empty lower-case a-z", r.transcript),
            });
        }
    }
    Ok(records)
}
