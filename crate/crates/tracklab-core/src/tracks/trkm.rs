//! Binary track-file codec.
//!
//! Layout, all little-endian: magic `TRKM`, version u16 (= 1), then
//! tracked frames, grid rows, grid cols as u16, a reserved u16, followed
//! by f32 `(x, y)` pairs in frame-major, row-major order. The 14-byte
//! header is followed by exactly `frames * rows * cols * 2` floats;
//! anything less or more is a format error. Writes go through a
//! temporary file and a rename so readers never observe a partial file.

use super::{Provenance, TrackSet};
use crate::error::{Error, Result};
use ndarray::Array4;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"TRKM";
const VERSION: u16 = 1;
const HEADER_LEN: u64 = 14;

/// Serializes a track set. Positions are narrowed to f32; grid
/// dimensions must fit in u16.
pub fn write_tracks(path: &Path, tracks: &TrackSet) -> Result<()> {
    let (k, rows, cols) = (tracks.tracked_frames(), tracks.grid_rows(), tracks.grid_cols());
    for (name, v) in [("frames", k), ("rows", rows), ("cols", cols)] {
        if v == 0 || v > u16::MAX as usize {
            return Err(Error::Input(format!("track {name} {v} out of range for file format")));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + k * rows * cols * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u16).to_le_bytes());
    buf.extend_from_slice(&(rows as u16).to_le_bytes());
    buf.extend_from_slice(&(cols as u16).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for &v in tracks.positions.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses a track file. Errors cite the byte offset of the problem: 0
/// for a bad magic, 4 for an unsupported version, and the end of the
/// readable prefix for truncation.
pub fn read_tracks(path: &Path) -> Result<TrackSet> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; HEADER_LEN as usize];
    let got = read_up_to(&mut file, &mut header)?;
    if got < 4 || header[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a track file (bad magic)".into(),
        });
    }
    if got < HEADER_LEN as usize {
        return Err(Error::Format {
            offset: got as u64,
            msg: "truncated header".into(),
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let k = u16::from_le_bytes([header[6], header[7]]) as usize;
    let rows = u16::from_le_bytes([header[8], header[9]]) as usize;
    let cols = u16::from_le_bytes([header[10], header[11]]) as usize;
    if k == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 6,
            msg: format!("degenerate track dimensions {k}x{rows}x{cols}"),
        });
    }

    let expected = k * rows * cols * 2 * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::Format {
            offset: HEADER_LEN + payload.len() as u64,
            msg: format!(
                "truncated payload: expected {expected} bytes for {k}x{rows}x{cols} tracks, got {}",
                payload.len()
            ),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            offset: HEADER_LEN + expected as u64,
            msg: format!("{} trailing bytes after track payload", payload.len() - expected),
        });
    }

    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let positions = Array4::from_shape_vec((k, rows, cols, 2), floats)
        .expect("length checked against dimensions");
    Ok(TrackSet { positions, provenance: Provenance::File })
}

/// Reads until `buf` is full or EOF; returns the byte count.
fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
