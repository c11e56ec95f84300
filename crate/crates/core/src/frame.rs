//! Length-prefixed, CRC-checked record frames shared by every on-disk log.
//!
//! ```text
//! frame := len:u32le | crc32:u32le | body[len]
//! ```
//!
//! `crc32` is CRC-32/ISO-HDLC over `body`. A reader stops at the first frame
//! that is incomplete or fails its checksum; everything before it is intact.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

pub const FRAME_HEADER_LEN: usize = 8;
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

/// How hard a write tries to reach stable storage before returning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncPolicy {
    /// Handed to the OS page cache: survives process death, not power loss.
    #[default]
    Os,
    /// `fdatasync` after every write.
    Fsync,
}

pub fn encode(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out.extend_from_slice(body);
    out
}

/// Writes one or more already-encoded frames with a single syscall.
pub fn write_frames(file: &mut File, bytes: &[u8], sync: SyncPolicy) -> io::Result<()> {
    file.write_all(bytes)?;
    if sync == SyncPolicy::Fsync {
        file.sync_data()?;
    }
    Ok(())
}

/// A decoded frame and the byte position where it started.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pos: u64,
    pub body: Vec<u8>,
}

/// Reads all intact frames from `path`. Returns the frames and the length of
/// the valid prefix; bytes past it are a torn or corrupt tail.
pub fn read_all(path: &Path) -> io::Result<(Vec<Frame>, u64)> {
    let mut data = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut data)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e),
    }
    let mut frames = Vec::new();
    let mut pos = 0usize;
    while let Some((body, next)) = decode_at(&data, pos) {
        frames.push(Frame { pos: pos as u64, body: body.to_vec() });
        pos = next;
    }
    Ok((frames, pos as u64))
}

/// Decodes the frame starting at `pos`, returning its body and the next position.
pub fn decode_at(data: &[u8], pos: usize) -> Option<(&[u8], usize)> {
    let header = data.get(pos..pos + FRAME_HEADER_LEN)?;
    let len = u32::from_le_bytes(header[0..4].try_into().ok()?);
    if len > MAX_FRAME_LEN {
        return None;
    }
    let crc = u32::from_le_bytes(header[4..8].try_into().ok()?);
    let start = pos + FRAME_HEADER_LEN;
    let body = data.get(start..start + len as usize)?;
    (crc32fast::hash(body) == crc).then_some((body, start + len as usize))
}

/// Escapes a logical name (topic, queue, group) into a single path component.
/// Bytes outside `[A-Za-z0-9._-]` become `%XX`.
pub fn encode_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn decode_name(encoded: &str) -> Option<String> {
    let bytes = encoded.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = encoded.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// Replaces `path` with `bytes` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8], sync: SyncPolicy) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if sync == SyncPolicy::Fsync {
            f.sync_all()?;
        }
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::OpenOptions;

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).unwrap();
        write_frames(&mut f, &encode(b"one"), SyncPolicy::Os).unwrap();
        write_frames(&mut f, &encode(b"two"), SyncPolicy::Os).unwrap();
        let full = encode(b"three");
        write_frames(&mut f, &full[..full.len() - 2], SyncPolicy::Os).unwrap();
        let (frames, valid) = read_all(&path).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].body, b"two");
        assert_eq!(valid, 2 * (FRAME_HEADER_LEN as u64 + 3));
    }

    #[test]
    fn corrupt_crc_stops_reading() {
        let mut bytes = encode(b"hello");
        bytes.extend(encode(b"world"));
        bytes[FRAME_HEADER_LEN] ^= 0xFF;
        assert!(decode_at(&bytes, 0).is_none());
    }

    #[test]
    fn names_round_trip() {
        for n in ["telemetry/cepsa-mqtt", "a b%c", "plain_name.1"] {
            let enc = encode_name(n);
            assert!(!enc.contains('/'));
            assert_eq!(decode_name(&enc).as_deref(), Some(n));
        }
    }
}
