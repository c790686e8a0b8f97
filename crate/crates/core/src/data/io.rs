//! On-disk dataset format.
//!
//! A dataset is a JSON-lines manifest (one record per sequence) next to one
//! binary frame file per sequence. Frame files are
//! `"TCCF" | version u32 | N u32 | d u32 | N·d f64`, all little-endian,
//! row-major. Paths in the manifest are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSequence, PhaseAnnotation, Split};
use crate::error::{Result, TccError};
use crate::tensor::Tensor;

pub const FRAMES_MAGIC: [u8; 4] = *b"TCCF";
pub const FRAMES_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_events: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_labels: Option<Vec<usize>>,
}

/// Serialize an `N × d` frame matrix.
pub fn encode_frames(frames: &Tensor) -> Vec<u8> {
    let (n, d) = (frames.rows(), frames.cols());
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * frames.len());
    buf.extend_from_slice(&FRAMES_MAGIC);
    buf.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for x in frames.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_frames(bytes: &[u8], path: &str) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(TccError::Truncated {
            path: path.into(),
            detail: format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != FRAMES_MAGIC {
        return Err(TccError::BadMagic {
            path: path.into(),
            expected: FRAMES_MAGIC,
            found,
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != FRAMES_VERSION {
        return Err(TccError::Version {
            path: path.into(),
            expected: FRAMES_VERSION,
            found: version,
        });
    }
    let (n, d) = (word(8) as u64, word(12) as u64);
    let body = n
        .checked_mul(d)
        .and_then(|e| e.checked_mul(8))
        .filter(|b| *b <= (usize::MAX - HEADER_LEN) as u64)
        .ok_or(TccError::SizeOverflow {
            path: path.into(),
            rows: n,
            cols: d,
        })? as usize;
    if bytes.len() != HEADER_LEN + body {
        return Err(TccError::Truncated {
            path: path.into(),
            detail: format!(
                "header promises {n} x {d} values ({} bytes), file has {}",
                HEADER_LEN + body,
                bytes.len()
            ),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(n as usize, d as usize, data)
}

pub fn write_frames(path: &Path, frames: &Tensor) -> Result<()> {
    fs::write(path, encode_frames(frames))?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => TccError::MissingFile(path.to_path_buf()),
        _ => TccError::Io(e),
    })?;
    decode_frames(&bytes, &path.display().to_string())
}

/// Write `dataset` as `<dir>/manifest.jsonl` plus `<dir>/<id>.tccf` files.
/// Returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest)?;
    for (seq, split) in dataset.sequences.iter().zip(&dataset.splits) {
        let file = format!("{}.tccf", seq.id);
        write_frames(&dir.join(&file), &seq.frames)?;
        let rec = ManifestRecord {
            id: seq.id.clone(),
            path: file,
            fps: seq.fps,
            split: *split,
            key_events: seq.annotation.as_ref().map(|a| a.key_events.clone()),
            phase_labels: seq.annotation.as_ref().map(|a| a.phase_labels.clone()),
        };
        let line = serde_json::to_string(&rec).expect("manifest record serializes");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(manifest)
}

/// Load a dataset from its manifest.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let file = fs::File::open(manifest).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => TccError::MissingFile(manifest.to_path_buf()),
        _ => TccError::Io(e),
    })?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let bad = |detail: String| TccError::Manifest {
        path: manifest.display().to_string(),
        detail,
    };
    let mut sequences = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        if sequences.iter().any(|s: &FeatureSequence| s.id == rec.id) {
            return Err(bad(format!("duplicate id {}", rec.id)));
        }
        let frames = read_frames(&base.join(&rec.path))?;
        let annotation = match (rec.key_events, rec.phase_labels) {
            (Some(key_events), Some(phase_labels)) => Some(PhaseAnnotation {
                key_events,
                phase_labels,
            }),
            (None, None) => None,
            _ => {
                return Err(bad(format!(
                    "sequence {} has only one of key_events/phase_labels",
                    rec.id
                )))
            }
        };
        let seq = FeatureSequence::new(rec.id, frames, rec.fps, annotation)
            .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        sequences.push(seq);
        splits.push(rec.split);
    }
    Ok(Dataset { sequences, splits })
}
