//! Line-delimited JSON headers followed by little-endian f32 blobs.
//!
//! Request: `{request_id, stage_id, shape, spacing, dtype, num_classes, ...}\n`
//! then `channels · N · 4` bytes. Response: `{request_id, shape, num_classes,
//! dtype}\n` then `num_classes · N · 4` bytes, or `{request_id, error}\n` alone.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::raw::{decode_f32le, encode_f32le};

pub const DTYPE: &str = "f32le";

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    pub request_id: u64,
    pub stage_id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub num_classes: usize,
    /// Input channels in the blob; 1 when absent.
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    /// Patch lower corner on the inference grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<[i64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_shape: Option<[usize; 3]>,
}

impl RequestHeader {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseHeader {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn proto(msg: impl Into<String>) -> EngineError {
    EngineError::Protocol(msg.into())
}

fn write_line<T: Serialize>(w: &mut impl Write, header: &T) -> Result<()> {
    let mut line = serde_json::to_vec(header).map_err(|e| proto(e.to_string()))?;
    line.push(b'\n');
    w.write_all(&line).map_err(|e| proto(format!("write failed: {e}")))
}

/// Reads one header line; `None` at a clean end of stream.
pub fn read_line(r: &mut impl BufRead) -> Result<Option<String>> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| proto(format!("read failed: {e}")))?;
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim_end_matches(['\n', '\r']).to_string()))
}

fn read_blob(r: &mut impl BufRead, values: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; values * 4];
    r.read_exact(&mut buf)
        .map_err(|e| proto(format!("payload of {} bytes truncated: {e}", values * 4)))?;
    Ok(decode_f32le(&buf))
}

pub fn write_request(w: &mut impl Write, header: &RequestHeader, channels: &[Vec<f32>]) -> Result<()> {
    if channels.len() != header.channels || channels.iter().any(|c| c.len() != header.voxels()) {
        return Err(proto("request channels do not match the header"));
    }
    write_line(w, header)?;
    for c in channels {
        w.write_all(&encode_f32le(c)).map_err(|e| proto(format!("write failed: {e}")))?;
    }
    w.flush().map_err(|e| proto(format!("flush failed: {e}")))
}

/// Parses a request header line and reads its payload.
pub fn read_request_payload(r: &mut impl BufRead, line: &str) -> Result<(RequestHeader, Vec<Vec<f32>>)> {
    let header: RequestHeader = serde_json::from_str(line).map_err(|e| proto(format!("malformed request: {e}")))?;
    if header.dtype != DTYPE {
        return Err(proto(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header.voxels();
    let mut channels = Vec::with_capacity(header.channels);
    for _ in 0..header.channels {
        channels.push(read_blob(r, n)?);
    }
    Ok((header, channels))
}

pub fn write_response(w: &mut impl Write, request: &RequestHeader, probabilities: &[f32]) -> Result<()> {
    let header = ResponseHeader {
        request_id: request.request_id,
        shape: Some(request.shape),
        num_classes: Some(request.num_classes),
        dtype: Some(DTYPE.into()),
        error: None,
    };
    write_line(w, &header)?;
    w.write_all(&encode_f32le(probabilities))
        .map_err(|e| proto(format!("write failed: {e}")))?;
    w.flush().map_err(|e| proto(format!("flush failed: {e}")))
}

pub fn write_error(w: &mut impl Write, request_id: u64, message: &str) -> Result<()> {
    write_line(
        w,
        &ResponseHeader {
            request_id,
            shape: None,
            num_classes: None,
            dtype: None,
            error: Some(message.into()),
        },
    )?;
    w.flush().map_err(|e| proto(format!("flush failed: {e}")))
}

/// Reads the response to `request`, checking id, shape, class count and dtype.
pub fn read_response(r: &mut impl BufRead, request: &RequestHeader) -> Result<Vec<f32>> {
    let line = read_line(r)?.ok_or_else(|| proto("predictor closed the stream"))?;
    let header: ResponseHeader =
        serde_json::from_str(&line).map_err(|e| proto(format!("malformed response header: {e}")))?;
    if header.request_id != request.request_id {
        return Err(proto(format!(
            "response id {} does not match request id {}",
            header.request_id, request.request_id
        )));
    }
    if let Some(err) = header.error {
        return Err(proto(format!("predictor error: {err}")));
    }
    if header.shape != Some(request.shape) || header.num_classes != Some(request.num_classes) {
        return Err(proto(format!(
            "response shape {:?} / classes {:?} do not match request {:?} / {}",
            header.shape, header.num_classes, request.shape, request.num_classes
        )));
    }
    if header.dtype.as_deref() != Some(DTYPE) {
        return Err(proto(format!("unsupported response dtype {:?}", header.dtype)));
    }
    read_blob(r, request.num_classes * request.voxels())
}
