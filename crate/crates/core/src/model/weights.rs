//! Weight file: the magic line `ATSW1\n`, one line of compact JSON
//! (architecture plus tensor manifest), a `\n`, then the little-endian `f32`
//! payload. Manifest offsets are relative to the payload start, contiguous and
//! in storage order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const WEIGHT_MAGIC: &[u8] = b"ATSW1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ArchConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_weights<T: Real, W: Write>(model: &Model<T>, mut out: W) -> Result<()> {
    let mut offset = 0;
    let tensors = model
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel() * 4;
            e
        })
        .collect();
    let header = Header {
        config: model.arch().clone(),
        tensors,
    };
    out.write_all(WEIGHT_MAGIC)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(offset);
    for p in model.params() {
        for v in p.value.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_weights<T: Real, R: Read>(mut input: R) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if !bytes.starts_with(WEIGHT_MAGIC) {
        return Err(Error::BadMagic { expected: "ATSW1" });
    }
    let rest = &bytes[WEIGHT_MAGIC.len()..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("header line is not terminated".into()))?;
    let header: Header = serde_json::from_slice(&rest[..end])
        .map_err(|e| Error::Header(e.to_string()))?;
    let payload = &rest[end + 1..];

    header.config.validate()?;
    let specs = header.config.param_specs();
    if specs.len() != header.tensors.len() {
        return Err(Error::Header(format!(
            "config needs {} tensors, manifest lists {}",
            specs.len(),
            header.tensors.len()
        )));
    }
    let mut expected_offset = 0;
    for ((name, shape), entry) in specs.iter().zip(&header.tensors) {
        if &entry.name != name {
            return Err(Error::Header(format!(
                "manifest entry `{}` where `{name}` was expected",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.offset != expected_offset {
            return Err(Error::Header(format!(
                "tensor `{name}` at offset {}, expected {expected_offset}",
                entry.offset
            )));
        }
        expected_offset += shape.iter().product::<usize>() * 4;
    }
    if payload.len() < expected_offset {
        return Err(Error::TruncatedPayload {
            expected: expected_offset,
            found: payload.len(),
        });
    }
    if payload.len() > expected_offset {
        return Err(Error::TrailingData {
            expected: expected_offset,
            found: payload.len(),
        });
    }

    let tensors = specs
        .into_iter()
        .zip(&header.tensors)
        .map(|((name, shape), entry)| {
            let n: usize = shape.iter().product();
            let raw = &payload[entry.offset..entry.offset + n * 4];
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_params(&header.config, tensors)
}

pub fn save_weights<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    read_weights(fs::File::open(path)?)
}
