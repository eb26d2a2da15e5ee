//! Length-prefixed binary framing for the remote denoiser protocol.
//!
//! All integers and floats are little-endian.
//!
//! Request:  `"DCR1" | u32 header_len | header JSON | batch*dim f32`
//!
//! Response: `"DCS1" | u8 status | u32 header_len | header JSON |`
//! then `batch*dim f32` when `status == 0`, else `u32 msg_len | UTF-8 message`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{DenoisingModel, Parameterization};
use crate::error::RemoteError;
use crate::scalar::Scalar;

pub const REQUEST_MAGIC: [u8; 4] = *b"DCR1";
pub const RESPONSE_MAGIC: [u8; 4] = *b"DCS1";

pub const STATUS_OK: u8 = 0;
pub const STATUS_MALFORMED: u8 = 1;
pub const STATUS_DIMENSION: u8 = 2;
pub const STATUS_EVALUATION: u8 = 3;

const MAX_HEADER: u32 = 1 << 20;
const MAX_FLOATS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    pub batch: u32,
    pub dim: u32,
    pub t: f64,
    pub param: String,
    pub cond: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok { header: ResponseHeader, payload: Vec<f32> },
    Error { status: u8, header: ResponseHeader, message: String },
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn encode_request(header: &RequestHeader, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len() * 4);
    out.extend_from_slice(&REQUEST_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    write_f32s(&mut out, payload).expect("vec write");
    out
}

pub fn encode_response(response: &Response) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&RESPONSE_MAGIC);
    let (status, header) = match response {
        Response::Ok { header, .. } => (STATUS_OK, header),
        Response::Error { status, header, .. } => (*status, header),
    };
    out.push(status);
    let json = serde_json::to_vec(header).expect("header serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    match response {
        Response::Ok { payload, .. } => write_f32s(&mut out, payload).expect("vec write"),
        Response::Error { message, .. } => {
            out.extend_from_slice(&(message.len() as u32).to_le_bytes());
            out.extend_from_slice(message.as_bytes());
        }
    }
    out
}

fn protocol(e: io::Error) -> RemoteError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        RemoteError::Protocol("truncated frame".into())
    } else {
        RemoteError::Connection(e)
    }
}

/// Reads one response. Stops right after the magic when it does not match.
pub fn read_response<R: Read>(r: &mut R) -> Result<Response, RemoteError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(protocol)?;
    if magic != RESPONSE_MAGIC {
        return Err(if magic[..3] == RESPONSE_MAGIC[..3] {
            RemoteError::Version(magic)
        } else {
            RemoteError::Protocol(format!("unexpected magic {magic:?}"))
        });
    }
    let mut status = [0u8; 1];
    r.read_exact(&mut status).map_err(protocol)?;
    let header_len = read_u32(r).map_err(protocol)?;
    if header_len > MAX_HEADER {
        return Err(RemoteError::Protocol(format!("header length {header_len} too large")));
    }
    let mut json = vec![0u8; header_len as usize];
    r.read_exact(&mut json).map_err(protocol)?;
    let header: ResponseHeader =
        serde_json::from_slice(&json).map_err(|e| RemoteError::Protocol(format!("bad header: {e}")))?;
    if status[0] == STATUS_OK {
        let (batch, dim) = match (header.batch, header.dim) {
            (Some(b), Some(d)) => (b as u64, d as u64),
            _ => return Err(RemoteError::Protocol("ok response without batch/dim".into())),
        };
        if batch * dim > MAX_FLOATS {
            return Err(RemoteError::Protocol("payload too large".into()));
        }
        let payload = read_f32s(r, (batch * dim) as usize).map_err(protocol)?;
        Ok(Response::Ok { header, payload })
    } else {
        let len = read_u32(r).map_err(protocol)?;
        if len > MAX_HEADER {
            return Err(RemoteError::Protocol("error message too large".into()));
        }
        let mut msg = vec![0u8; len as usize];
        r.read_exact(&mut msg).map_err(protocol)?;
        Ok(Response::Error {
            status: status[0],
            header,
            message: String::from_utf8_lossy(&msg).into_owned(),
        })
    }
}

/// Outcome of reading one request on the server side.
#[derive(Debug)]
pub enum Incoming {
    Request { header: RequestHeader, payload: Vec<f32> },
    /// The frame was rejected but its extent was known, so the connection
    /// stays usable.
    Rejected { status: u8, message: String },
    /// The frame could not be delimited; the connection must be closed after
    /// replying.
    Fatal { message: String },
    Closed,
}

pub fn read_request<R: Read>(r: &mut R, served_dim: usize) -> Incoming {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(_) => return Incoming::Closed,
    }
    if magic != REQUEST_MAGIC {
        return Incoming::Fatal {
            message: format!("bad magic {magic:?}"),
        };
    }
    let header_len = match read_u32(r) {
        Ok(n) if n <= MAX_HEADER => n,
        Ok(n) => return Incoming::Fatal { message: format!("header length {n} too large") },
        Err(_) => return Incoming::Fatal { message: "truncated frame".into() },
    };
    let mut json = vec![0u8; header_len as usize];
    if r.read_exact(&mut json).is_err() {
        return Incoming::Fatal { message: "truncated header".into() };
    }
    let header: RequestHeader = match serde_json::from_slice(&json) {
        Ok(h) => h,
        Err(e) => return Incoming::Fatal { message: format!("bad header: {e}") },
    };
    let n = header.batch as u64 * header.dim as u64;
    if n > MAX_FLOATS {
        return Incoming::Fatal { message: "payload too large".into() };
    }
    let payload = match read_f32s(r, n as usize) {
        Ok(p) => p,
        Err(_) => return Incoming::Fatal { message: "truncated payload".into() },
    };
    if header.batch == 0 {
        return Incoming::Rejected {
            status: STATUS_MALFORMED,
            message: "zero-length batch".into(),
        };
    }
    if header.dim as usize != served_dim {
        return Incoming::Rejected {
            status: STATUS_DIMENSION,
            message: format!("served dim is {served_dim}, request dim is {}", header.dim),
        };
    }
    if Parameterization::from_wire_name(&header.param).is_none() {
        return Incoming::Rejected {
            status: STATUS_MALFORMED,
            message: format!("unknown param {:?}", header.param),
        };
    }
    Incoming::Request { header, payload }
}

/// Serves requests on one connection until the peer closes it.
///
/// The model answers in its native parameterization; the response header
/// says which one.
pub fn serve_connection<T, M, S>(model: &M, mut stream: S) -> io::Result<()>
where
    T: Scalar,
    M: DenoisingModel<T>,
    S: Read + Write,
{
    let dim = model.dim();
    let err_header = ResponseHeader {
        dim: Some(dim as u32),
        ..Default::default()
    };
    loop {
        let response = match read_request(&mut stream, dim) {
            Incoming::Closed => return Ok(()),
            Incoming::Fatal { message } => {
                let frame = encode_response(&Response::Error {
                    status: STATUS_MALFORMED,
                    header: err_header.clone(),
                    message,
                });
                let _ = stream.write_all(&frame);
                return Ok(());
            }
            Incoming::Rejected { status, message } => Response::Error {
                status,
                header: err_header.clone(),
                message,
            },
            Incoming::Request { header, payload } => evaluate_request(model, &header, &payload),
        };
        stream.write_all(&encode_response(&response))?;
        stream.flush()?;
    }
}

fn evaluate_request<T: Scalar, M: DenoisingModel<T>>(model: &M, header: &RequestHeader, payload: &[f32]) -> Response {
    let dim = model.dim();
    let cond = match header.cond {
        None => None,
        Some(c) if (0..=u32::MAX as i64).contains(&c) => Some(c as u32),
        Some(c) => {
            return Response::Error {
                status: STATUS_MALFORMED,
                header: ResponseHeader { dim: Some(dim as u32), ..Default::default() },
                message: format!("condition {c} out of range"),
            }
        }
    };
    let t = T::lit(header.t);
    let mut out = Vec::with_capacity(payload.len());
    let mut param = None;
    for row in payload.chunks_exact(dim) {
        let x: Vec<T> = row.iter().map(|&v| T::lit(v as f64)).collect();
        match model.evaluate(&x, t, cond) {
            Ok(o) => {
                param = Some(o.param);
                out.extend(o.value.iter().map(|v| v.to_f64_lossy() as f32));
            }
            Err(e) => {
                return Response::Error {
                    status: STATUS_EVALUATION,
                    header: ResponseHeader { dim: Some(dim as u32), ..Default::default() },
                    message: e.to_string(),
                }
            }
        }
    }
    Response::Ok {
        header: ResponseHeader {
            param: param.map(|p| p.wire_name().to_string()),
            dim: Some(dim as u32),
            batch: Some(header.batch),
        },
        payload: out,
    }
}
