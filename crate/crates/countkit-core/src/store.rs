//! On-disk dataset layouts.
//!
//! A mixture dataset directory holds:
//!
//! ```text
//! audio/NNNNN.wav    32-bit float mono WAV, 16 kHz
//! vad/NNNNN.bin      packed per-speaker activity bits
//! labels.jsonl       one {"id", "k", "L", "seed"} object per line
//! ```
//!
//! A featurized dataset directory mirrors the ids with `features/NNNNN.ctk`
//! plus copies of `labels.jsonl` and `vad/` (the activity matrices are needed
//! to relabel excerpts).
//!
//! The VAD bit file is `u32 LE rows`, `u32 LE cols`, then each row packed
//! MSB-first into `ceil(cols / 8)` bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio;
use crate::mixer::LabeledMixture;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("audio error: {0}")]
    Audio(#[from] audio::AudioError),
    #[error("malformed labels line {0}: {1}")]
    BadLabels(usize, String),
    #[error("malformed vad file: {0}")]
    BadVad(String),
    #[error("tensor file error: {0}")]
    Tensor(#[from] crate::tensorfile::TensorFileError),
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MixtureMeta {
    pub id: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
}

pub fn id_name(id: usize) -> String {
    format!("{id:05}")
}

pub fn audio_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("audio").join(format!("{}.wav", id_name(id)))
}

pub fn vad_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("vad").join(format!("{}.bin", id_name(id)))
}

pub fn feature_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("features").join(format!("{}.ctk", id_name(id)))
}

pub fn write_vad_bits(path: &Path, matrix: &Array2<u8>) -> Result<(), StoreError> {
    let (rows, cols) = matrix.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    let row_bytes = cols.div_ceil(8);
    let mut buf = vec![0u8; row_bytes];
    for r in 0..rows {
        buf.iter_mut().for_each(|b| *b = 0);
        for c in 0..cols {
            if matrix[[r, c]] != 0 {
                buf[c / 8] |= 0x80 >> (c % 8);
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vad_bits(path: &Path) -> Result<Array2<u8>, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 8];
    r.read_exact(&mut head)
        .map_err(|_| StoreError::BadVad("truncated header".into()))?;
    let rows = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
    let cols = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    let row_bytes = cols.div_ceil(8);
    let mut packed = vec![0u8; rows * row_bytes];
    r.read_exact(&mut packed)
        .map_err(|_| StoreError::BadVad("truncated payload".into()))?;
    let mut matrix = Array2::<u8>::zeros((rows, cols));
    for row in 0..rows {
        let base = row * row_bytes;
        for c in 0..cols {
            let bit = (packed[base + c / 8] >> (7 - c % 8)) & 1;
            matrix[[row, c]] = bit;
        }
    }
    Ok(matrix)
}

/// Create the mixture dataset layout under `dir`.
pub fn init_mixture_dir(dir: &Path) -> Result<(), StoreError> {
    std::fs::create_dir_all(dir.join("audio"))?;
    std::fs::create_dir_all(dir.join("vad"))?;
    Ok(())
}

/// Write one mixture (audio + packed VAD) into an initialized dataset dir.
pub fn write_mixture(dir: &Path, id: usize, mixture: &LabeledMixture) -> Result<(), StoreError> {
    audio::write_wav_f32(&audio_path(dir, id), &mixture.audio)?;
    write_vad_bits(&vad_path(dir, id), &mixture.per_speaker_vad)?;
    Ok(())
}

pub fn write_labels(dir: &Path, metas: &[MixtureMeta]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(dir.join("labels.jsonl"))?);
    for meta in metas {
        serde_json::to_writer(&mut w, meta).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(dir: &Path) -> Result<Vec<MixtureMeta>, StoreError> {
    let file = File::open(dir.join("labels.jsonl"))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: MixtureMeta =
            serde_json::from_str(&line).map_err(|e| StoreError::BadLabels(i + 1, e.to_string()))?;
        out.push(meta);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn vad_bits_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let mut rng = crate::seeds::rng(4);
        for (rows, cols) in [(0usize, 0usize), (1, 1), (3, 17), (5, 1000), (0, 40)] {
            let m = Array2::<u8>::from_shape_fn((rows, cols), |_| rng.random_range(0..=1));
            write_vad_bits(&path, &m).unwrap();
            let back = read_vad_bits(&path).unwrap();
            assert_eq!(back, m, "{rows}x{cols}");
        }
    }

    #[test]
    fn labels_roundtrip_and_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let metas = vec![
            MixtureMeta { id: 0, k: 2, l: 3, seed: 77 },
            MixtureMeta { id: 1, k: 0, l: 0, seed: 78 },
        ];
        write_labels(dir.path(), &metas).unwrap();
        let text = std::fs::read_to_string(dir.path().join("labels.jsonl")).unwrap();
        assert!(text.lines().next().unwrap().contains("\"L\":3"));
        let back = read_labels(dir.path()).unwrap();
        assert_eq!(back, metas);
    }
}
