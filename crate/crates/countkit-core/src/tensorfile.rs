//! The "CTK1" tensor file format.
//!
//! A file is the 4-byte magic `CTK1`, one UTF-8 JSON header line terminated by
//! `\n`, then a little-endian row-major f32 payload. Feature files carry a
//! single tensor with framing metadata; checkpoint weight blobs carry a list
//! of named tensors whose payloads follow in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{FeatureKind, TFRepresentation, FRAME_LEN_S, HOP_S};

pub const MAGIC: &[u8; 4] = b"CTK1";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic (not a CTK1 file)")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("payload size mismatch: expected {expected} f32 values")]
    PayloadMismatch { expected: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    dtype: String,
    shape: Vec<usize>,
    feature_kind: FeatureKind,
    hop: f64,
    frame_len: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

fn write_preamble<W: Write>(w: &mut W, header_json: &str) -> Result<(), TensorFileError> {
    w.write_all(MAGIC)?;
    w.write_all(header_json.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_header_line<R: Read>(r: &mut R) -> Result<String, TensorFileError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic);
    }
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(TensorFileError::BadHeader("unterminated header".into()));
        }
    }
    String::from_utf8(line).map_err(|e| TensorFileError::BadHeader(e.to_string()))
}

fn write_f32_payload<W: Write>(w: &mut W, values: &[f32]) -> Result<(), TensorFileError> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32_payload<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>, TensorFileError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| TensorFileError::PayloadMismatch { expected: count })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write a D x F feature matrix.
pub fn write_feature(path: &Path, rep: &TFRepresentation) -> Result<(), TensorFileError> {
    let (d, f) = rep.data.dim();
    let header = FeatureHeader {
        dtype: "f32".into(),
        shape: vec![d, f],
        feature_kind: rep.kind,
        hop: rep.hop_s,
        frame_len: rep.frame_len_s,
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_preamble(&mut w, &serde_json::to_string(&header).unwrap())?;
    let values: Vec<f32> = rep.data.iter().map(|&v| v as f32).collect();
    write_f32_payload(&mut w, &values)?;
    w.flush()?;
    Ok(())
}

/// Read a feature matrix at f32 precision (the native storage dtype).
pub fn read_feature_f32(path: &Path) -> Result<(Array2<f32>, FeatureKind), TensorFileError> {
    let mut r = BufReader::new(File::open(path)?);
    let header: FeatureHeader = serde_json::from_str(&read_header_line(&mut r)?)
        .map_err(|e| TensorFileError::BadHeader(e.to_string()))?;
    if header.shape.len() != 2 {
        return Err(TensorFileError::BadHeader(format!(
            "expected rank-2 shape, got {:?}",
            header.shape
        )));
    }
    let (d, f) = (header.shape[0], header.shape[1]);
    let values = read_f32_payload(&mut r, d * f)?;
    let data = Array2::from_shape_vec((d, f), values)
        .map_err(|e| TensorFileError::BadHeader(e.to_string()))?;
    Ok((data, header.feature_kind))
}

/// Read a feature matrix widened to f64.
pub fn read_feature(path: &Path) -> Result<TFRepresentation, TensorFileError> {
    let (data, kind) = read_feature_f32(path)?;
    Ok(TFRepresentation {
        data: data.mapv(|v| v as f64),
        kind,
        hop_s: HOP_S,
        frame_len_s: FRAME_LEN_S,
    })
}

/// Write a named-tensor blob (checkpoint weights).
pub fn write_named_tensors(
    path: &Path,
    tensors: &[(String, ArrayViewD<f32>)],
) -> Result<(), TensorFileError> {
    let header = BlobHeader {
        dtype: "f32".into(),
        tensors: tensors
            .iter()
            .map(|(name, view)| TensorEntry { name: name.clone(), shape: view.shape().to_vec() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_preamble(&mut w, &serde_json::to_string(&header).unwrap())?;
    for (_, view) in tensors {
        let values: Vec<f32> = view.iter().cloned().collect();
        write_f32_payload(&mut w, &values)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a named-tensor blob in header order.
pub fn read_named_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>, TensorFileError> {
    let mut r = BufReader::new(File::open(path)?);
    let header: BlobHeader = serde_json::from_str(&read_header_line(&mut r)?)
        .map_err(|e| TensorFileError::BadHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let count: usize = entry.shape.iter().product();
        let values = read_f32_payload(&mut r, count)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| TensorFileError::BadHeader(e.to_string()))?;
        out.push((entry.name, arr));
    }
    Ok(out)
}
