//! Binary framing for split-inference requests and pose responses.
//! All multi-byte fields are little-endian; see PROTOCOL.md for the layouts.

use std::io::{self, Read};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SPLT";
pub const VERSION: u8 = 1;
pub const TYPE_REQUEST: u8 = 1;
pub const TYPE_RESPONSE: u8 = 2;
pub const DTYPE_F32: u8 = 1;
pub const MAX_DIMS: usize = 4;

/// Fixed request header before the dims: magic..flags.
pub const REQUEST_HEADER_LEN: usize = 20;
pub const RESPONSE_LEN: usize = 56;
const CRC_LEN: usize = 4;

/// Largest payload a stream reader will buffer (256 MiB).
pub const MAX_PAYLOAD: usize = 256 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("integrity error: crc32 {computed:08x} != {stored:08x}")]
    Integrity { stored: u32, computed: u32 },
    #[error("incomplete frame: need {needed} bytes, have {available}")]
    Incomplete { needed: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    BadCut = 1,
    ShapeMismatch = 2,
    Internal = 3,
}

impl Status {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(Status::Ok),
            1 => Ok(Status::BadCut),
            2 => Ok(Status::ShapeMismatch),
            3 => Ok(Status::Internal),
            other => Err(WireError::Protocol(format!("unknown status {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub request_id: u64,
    /// Raw cut byte; range checking is the server's job (status `BadCut`).
    pub cut_index: u8,
    pub shape: Vec<u32>,
    pub payload: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferResponse {
    pub request_id: u64,
    pub status: Status,
    /// `t_xyz` then log-quaternion; meaningful only when `status == Ok`.
    pub pose: [f32; 6],
    pub server_compute_ns: u64,
}

impl InferResponse {
    pub fn error(request_id: u64, status: Status) -> Self {
        Self { request_id, status, pose: [0.0; 6], server_compute_ns: 0 }
    }
}

fn shape_elements(shape: &[u32]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

/// Total encoded length of a request with this shape.
pub fn request_frame_len(shape: &[u32]) -> usize {
    REQUEST_HEADER_LEN + 4 * shape.len() + 4 + 4 * shape_elements(shape).unwrap_or(0) + CRC_LEN
}

fn check_prefix(bytes: &[u8], ty: u8) -> Result<(), WireError> {
    if bytes.len() < 8 {
        return Err(WireError::Incomplete { needed: 8, available: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(WireError::Protocol(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(WireError::Protocol(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != ty {
        return Err(WireError::Protocol(format!("unexpected message type {} (want {ty})", bytes[5])));
    }
    if bytes[6..8] != [0, 0] {
        return Err(WireError::Protocol("reserved bytes not zero".into()));
    }
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn check_crc(frame: &[u8]) -> Result<(), WireError> {
    let body = frame.len() - CRC_LEN;
    let stored = u32_at(frame, body);
    let computed = crc32fast::hash(&frame[..body]);
    if stored != computed {
        return Err(WireError::Integrity { stored, computed });
    }
    Ok(())
}

pub fn encode_request(req: &InferRequest) -> Result<Vec<u8>, WireError> {
    if req.shape.len() > MAX_DIMS {
        return Err(WireError::Protocol(format!("{} dims exceeds {MAX_DIMS}", req.shape.len())));
    }
    match shape_elements(&req.shape) {
        Some(n) if n == req.payload.len() => {}
        _ => {
            return Err(WireError::Protocol(format!(
                "payload has {} elements, shape {:?}",
                req.payload.len(),
                req.shape
            )))
        }
    }
    let payload_len = u32::try_from(4 * req.payload.len())
        .map_err(|_| WireError::Protocol("payload exceeds u32 length field".into()))?;
    let mut out = Vec::with_capacity(request_frame_len(&req.shape));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, TYPE_REQUEST, 0, 0]);
    out.extend_from_slice(&req.request_id.to_le_bytes());
    out.extend_from_slice(&[req.cut_index, DTYPE_F32, req.shape.len() as u8, 0]);
    for d in &req.shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&payload_len.to_le_bytes());
    for v in &req.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Total frame length implied by a request's header, or how many more
/// bytes are needed before that can be known.
pub fn request_len_from_header(bytes: &[u8]) -> Result<usize, WireError> {
    check_prefix(bytes, TYPE_REQUEST)?;
    if bytes.len() < REQUEST_HEADER_LEN {
        return Err(WireError::Incomplete { needed: REQUEST_HEADER_LEN, available: bytes.len() });
    }
    if bytes[17] != DTYPE_F32 {
        return Err(WireError::Protocol(format!("unsupported dtype {}", bytes[17])));
    }
    let ndim = bytes[18] as usize;
    if ndim > MAX_DIMS {
        return Err(WireError::Protocol(format!("{ndim} dims exceeds {MAX_DIMS}")));
    }
    if bytes[19] != 0 {
        return Err(WireError::Protocol("flags not zero".into()));
    }
    let len_at = REQUEST_HEADER_LEN + 4 * ndim;
    if bytes.len() < len_at + 4 {
        return Err(WireError::Incomplete { needed: len_at + 4, available: bytes.len() });
    }
    let dims: Vec<u32> = (0..ndim).map(|i| u32_at(bytes, REQUEST_HEADER_LEN + 4 * i)).collect();
    let payload_len = u32_at(bytes, len_at) as usize;
    let expected = shape_elements(&dims).and_then(|n| n.checked_mul(4));
    if expected != Some(payload_len) {
        return Err(WireError::Protocol(format!("payload_len {payload_len} does not match dims {dims:?}")));
    }
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::Protocol(format!("payload_len {payload_len} exceeds limit")));
    }
    Ok(len_at + 4 + payload_len + CRC_LEN)
}

/// Request id from a header whose magic/version/type checked out.
pub fn peek_request_id(bytes: &[u8]) -> Option<u64> {
    (bytes.len() >= 16 && check_prefix(bytes, TYPE_REQUEST).is_ok()).then(|| u64_at(bytes, 8))
}

pub fn decode_request(bytes: &[u8]) -> Result<InferRequest, WireError> {
    let total = request_len_from_header(bytes)?;
    if bytes.len() < total {
        return Err(WireError::Incomplete { needed: total, available: bytes.len() });
    }
    if bytes.len() > total {
        return Err(WireError::Protocol(format!("{} trailing bytes after frame", bytes.len() - total)));
    }
    check_crc(bytes)?;
    let ndim = bytes[18] as usize;
    let shape = (0..ndim).map(|i| u32_at(bytes, REQUEST_HEADER_LEN + 4 * i)).collect();
    let start = REQUEST_HEADER_LEN + 4 * ndim + 4;
    let payload =
        bytes[start..total - CRC_LEN].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(InferRequest { request_id: u64_at(bytes, 8), cut_index: bytes[16], shape, payload })
}

pub fn encode_response(resp: &InferResponse) -> Vec<u8> {
    let mut out = Vec::with_capacity(RESPONSE_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, TYPE_RESPONSE, 0, 0]);
    out.extend_from_slice(&resp.request_id.to_le_bytes());
    out.extend_from_slice(&[resp.status as u8, 0, 0, 0]);
    for v in &resp.pose {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&resp.server_compute_ns.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), RESPONSE_LEN);
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<InferResponse, WireError> {
    check_prefix(bytes, TYPE_RESPONSE)?;
    if bytes.len() < RESPONSE_LEN {
        return Err(WireError::Incomplete { needed: RESPONSE_LEN, available: bytes.len() });
    }
    if bytes.len() > RESPONSE_LEN {
        return Err(WireError::Protocol(format!("{} trailing bytes after frame", bytes.len() - RESPONSE_LEN)));
    }
    check_crc(bytes)?;
    if bytes[17..20] != [0, 0, 0] {
        return Err(WireError::Protocol("padding not zero".into()));
    }
    let status = Status::from_u8(bytes[16])?;
    let mut pose = [0f32; 6];
    for (i, p) in pose.iter_mut().enumerate() {
        *p = f32::from_le_bytes(bytes[20 + 4 * i..24 + 4 * i].try_into().unwrap());
    }
    Ok(InferResponse { request_id: u64_at(bytes, 8), status, pose, server_compute_ns: u64_at(bytes, 44) })
}

/// Result of pulling one request frame off a stream.
#[derive(Debug)]
pub enum ReadOutcome {
    Frame(Vec<u8>),
    /// Peer closed cleanly between frames.
    Closed,
}

/// Reads exactly one request frame, sized from its header. Never reads past
/// the declared frame length.
pub fn read_request_frame<R: Read>(r: &mut R) -> io::Result<Result<ReadOutcome, (Option<u64>, WireError)>> {
    let mut buf = vec![0u8; REQUEST_HEADER_LEN];
    match read_full(r, &mut buf)? {
        0 => return Ok(Ok(ReadOutcome::Closed)),
        n if n < REQUEST_HEADER_LEN => {
            return Ok(Err((None, WireError::Incomplete { needed: REQUEST_HEADER_LEN, available: n })))
        }
        _ => {}
    }
    let id = peek_request_id(&buf);
    loop {
        match request_len_from_header(&buf) {
            Ok(total) => {
                let have = buf.len();
                buf.resize(total, 0);
                let got = read_full(r, &mut buf[have..])?;
                if got < total - have {
                    return Ok(Err((id, WireError::Incomplete { needed: total, available: have + got })));
                }
                return Ok(Ok(ReadOutcome::Frame(buf)));
            }
            Err(WireError::Incomplete { needed, .. }) => {
                let have = buf.len();
                buf.resize(needed, 0);
                let got = read_full(r, &mut buf[have..])?;
                if got < needed - have {
                    return Ok(Err((id, WireError::Incomplete { needed, available: have + got })));
                }
            }
            Err(e) => return Ok(Err((id, e))),
        }
    }
}

pub fn read_response_frame<R: Read>(r: &mut R) -> io::Result<Result<InferResponse, WireError>> {
    let mut buf = [0u8; RESPONSE_LEN];
    let got = read_full(r, &mut buf)?;
    if got < RESPONSE_LEN {
        return Ok(Err(WireError::Incomplete { needed: RESPONSE_LEN, available: got }));
    }
    Ok(decode_response(&buf))
}

/// Like `read_exact`, but reports how many bytes arrived before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
