//! Fixed-width little-endian numeric encoding shared by the watchdog, the
//! forwarder and the model runtime.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Float64,
    Float32,
    Int64,
    Int32,
}

impl Format {
    pub fn size(self) -> usize {
        match self {
            Format::Float64 | Format::Int64 => 8,
            Format::Float32 | Format::Int32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("{value} is not representable as {format:?}")]
    NotRepresentable { value: f64, format: Format },
    #[error("expected {expected} values, got {actual}")]
    Arity { expected: usize, actual: usize },
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
}

pub fn schema_len(formats: &[Format]) -> usize {
    formats.iter().map(|f| f.size()).sum()
}

pub fn encode_value(format: Format, value: f64, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let bad = || CodecError::NotRepresentable { value, format };
    match format {
        Format::Float64 => out.extend_from_slice(&value.to_le_bytes()),
        Format::Float32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
        Format::Int64 => {
            if value.fract() != 0.0 || !(-9.223_372_036_854_776e18..9.223_372_036_854_776e18).contains(&value) {
                return Err(bad());
            }
            out.extend_from_slice(&(value as i64).to_le_bytes());
        }
        Format::Int32 => {
            if value.fract() != 0.0 || value < i32::MIN as f64 || value > i32::MAX as f64 {
                return Err(bad());
            }
            out.extend_from_slice(&(value as i32).to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode(formats: &[Format], values: &[f64]) -> Result<Vec<u8>, CodecError> {
    if formats.len() != values.len() {
        return Err(CodecError::Arity { expected: formats.len(), actual: values.len() });
    }
    let mut out = Vec::with_capacity(schema_len(formats));
    for (f, v) in formats.iter().zip(values) {
        encode_value(*f, *v, &mut out)?;
    }
    Ok(out)
}

pub fn decode(formats: &[Format], bytes: &[u8]) -> Result<Vec<f64>, CodecError> {
    let expected = schema_len(formats);
    if bytes.len() != expected {
        return Err(CodecError::Length { expected, actual: bytes.len() });
    }
    let mut pos = 0;
    let mut out = Vec::with_capacity(formats.len());
    for f in formats {
        let b = &bytes[pos..pos + f.size()];
        out.push(match f {
            Format::Float64 => f64::from_le_bytes(b.try_into().expect("sized")),
            Format::Float32 => f32::from_le_bytes(b.try_into().expect("sized")) as f64,
            Format::Int64 => i64::from_le_bytes(b.try_into().expect("sized")) as f64,
            Format::Int32 => i32::from_le_bytes(b.try_into().expect("sized")) as f64,
        });
        pos += f.size();
    }
    Ok(out)
}
