//! Length-prefixed framing: a 4-byte big-endian length followed by exactly
//! that many payload bytes.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const DEFAULT_FRAME_CAP: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds the {cap}-byte cap")]
    TooLarge { len: usize, cap: usize },
    /// The peer closed the stream on a frame boundary.
    #[error("connection closed")]
    Closed,
    #[error("connection lost mid-frame: {0}")]
    ConnectionLost(io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn frame_encode(payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    frame_encode_capped(payload, DEFAULT_FRAME_CAP)
}

pub fn frame_encode_capped(payload: &[u8], cap: usize) -> Result<Vec<u8>, FrameError> {
    let len = checked_len(payload.len(), cap)?;
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

fn checked_len(len: usize, cap: usize) -> Result<u32, FrameError> {
    if len > cap {
        return Err(FrameError::TooLarge { len, cap });
    }
    u32::try_from(len).map_err(|_| FrameError::TooLarge { len, cap })
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8], cap: usize) -> Result<(), FrameError> {
    let len = checked_len(payload.len(), cap)?;
    if payload.len() <= 64 * 1024 {
        let mut buf = Vec::with_capacity(4 + payload.len());
        buf.extend_from_slice(&len.to_be_bytes());
        buf.extend_from_slice(payload);
        w.write_all(&buf)?;
    } else {
        w.write_all(&len.to_be_bytes())?;
        w.write_all(payload)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one frame. A declared length over `cap` is a protocol error; the
/// caller should drop the connection since the stream is no longer in sync.
pub fn read_frame<R: Read>(r: &mut R, cap: usize) -> Result<Vec<u8>, FrameError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => {
                return Err(FrameError::ConnectionLost(io::ErrorKind::UnexpectedEof.into()))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(classify(e)),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > cap {
        return Err(FrameError::TooLarge { len, cap });
    }
    read_exact_payload(r, len)
}

/// Reads exactly `len` raw bytes (used for unframed bulk bodies).
pub fn read_exact_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, FrameError> {
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::ConnectionLost(e),
        _ => classify(e),
    })?;
    Ok(payload)
}

fn classify(e: io::Error) -> FrameError {
    match e.kind() {
        io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::UnexpectedEof => FrameError::ConnectionLost(e),
        _ => FrameError::Io(e),
    }
}

/// Alias kept for symmetry with [`frame_encode`].
pub fn frame_decode<R: Read>(r: &mut R) -> Result<Vec<u8>, FrameError> {
    read_frame(r, DEFAULT_FRAME_CAP)
}
