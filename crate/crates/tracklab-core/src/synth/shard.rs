//! Clip shard codec.
//!
//! A shard is a single binary file: magic `TMVC`, version u16, then one
//! record per clip, all little-endian. Each record is a shape header
//! (frames, height, width, channels as u32), the f32 pixel payload, the
//! two u32 labels (appearance, motion), and the f32 flow payload with
//! two channels per pixel. The clip count is implicit: records run to
//! end of file. [`ShardReader`] indexes record offsets at open time so
//! clips can be fetched in any order without holding the shard (which
//! may exceed memory) resident.

use super::{ClipShape, VideoClip};
use crate::error::{Error, Result};
use ndarray::Array4;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const MAGIC: [u8; 4] = *b"TMVC";
const VERSION: u16 = 1;
const FILE_HEADER_LEN: u64 = 6;
const CLIP_HEADER_LEN: u64 = 16;

/// Streaming shard writer. Records are appended to a temporary file and
/// the shard only appears at its final path when [`ShardWriter::finish`]
/// renames it, so readers never see a partial shard.
pub struct ShardWriter {
    file: BufWriter<tempfile::NamedTempFile>,
    path: PathBuf,
    clips: usize,
}

impl ShardWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        let mut file = BufWriter::new(tmp);
        file.write_all(&MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        Ok(ShardWriter { file, path: path.to_path_buf(), clips: 0 })
    }

    pub fn push(&mut self, clip: &VideoClip) -> Result<()> {
        let shape = clip.shape();
        shape.validate()?;
        let expect_pixels = shape.frames * shape.height * shape.width * shape.channels;
        if clip.pixels.len() != expect_pixels {
            return Err(Error::Input(format!(
                "pixel payload has {} values, shape implies {expect_pixels}",
                clip.pixels.len()
            )));
        }
        let expect_flow = shape.frames * shape.height * shape.width * 2;
        if clip.flow.len() != expect_flow {
            return Err(Error::Input(format!(
                "flow payload has {} values, shape implies {expect_flow}",
                clip.flow.len()
            )));
        }
        for dim in [shape.frames, shape.height, shape.width, shape.channels] {
            self.file.write_all(&(dim as u32).to_le_bytes())?;
        }
        write_f32s(&mut self.file, clip.pixels.iter().copied())?;
        self.file.write_all(&clip.appearance_label.to_le_bytes())?;
        self.file.write_all(&clip.motion_label.to_le_bytes())?;
        write_f32s(&mut self.file, clip.flow.iter().copied())?;
        self.clips += 1;
        Ok(())
    }

    pub fn clips(&self) -> usize {
        self.clips
    }

    pub fn finish(self) -> Result<usize> {
        let clips = self.clips;
        let tmp = self.file.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).map_err(|e| Error::Io(e.error))?;
        Ok(clips)
    }
}

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f32>) -> std::io::Result<()> {
    // Chunked so each clip costs a few large writes, not a million tiny ones.
    let mut buf = Vec::with_capacity(1 << 16);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= (1 << 16) {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)
}

#[derive(Debug, Clone)]
struct ClipEntry {
    offset: u64,
    shape: ClipShape,
    appearance: u32,
    motion: u32,
}

/// Random-access shard reader. Opening scans the record headers once to
/// build a clip index; pixel and flow payloads are only read on demand.
pub struct ShardReader {
    file: std::fs::File,
    index: Vec<ClipEntry>,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let len = file.metadata()?.len();
        let mut header = [0u8; FILE_HEADER_LEN as usize];
        let got = read_up_to(&mut file, &mut header)?;
        if got < 4 || header[..4] != MAGIC {
            return Err(Error::Format { offset: 0, msg: "not a clip shard (bad magic)".into() });
        }
        if got < FILE_HEADER_LEN as usize {
            return Err(Error::Format { offset: got as u64, msg: "truncated shard header".into() });
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported shard version {version} (expected {VERSION})"),
            });
        }

        let mut index = Vec::new();
        let mut offset = FILE_HEADER_LEN;
        while offset < len {
            if len - offset < CLIP_HEADER_LEN {
                return Err(Error::Format {
                    offset: len,
                    msg: format!(
                        "truncated record header for clip {} (needs {CLIP_HEADER_LEN} bytes at offset {offset})",
                        index.len()
                    ),
                });
            }
            let mut dims = [0u8; CLIP_HEADER_LEN as usize];
            file.seek(SeekFrom::Start(offset))?;
            file.read_exact(&mut dims)?;
            let d = |i: usize| u32::from_le_bytes(dims[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
            let shape = ClipShape { frames: d(0), height: d(1), width: d(2), channels: d(3) };
            if let Err(e) = shape.validate() {
                return Err(Error::Format {
                    offset,
                    msg: format!("clip {} has invalid shape: {e}", index.len()),
                });
            }
            let pixel_bytes = (shape.frames * shape.height * shape.width * shape.channels * 4) as u64;
            let flow_bytes = (shape.frames * shape.height * shape.width * 2 * 4) as u64;
            let record = CLIP_HEADER_LEN + pixel_bytes + 8 + flow_bytes;
            if len - offset < record {
                return Err(Error::Format {
                    offset: len,
                    msg: format!(
                        "truncated payload for clip {}: record at offset {offset} needs {record} bytes, file ends after {}",
                        index.len(),
                        len - offset
                    ),
                });
            }
            let mut labels = [0u8; 8];
            file.seek(SeekFrom::Start(offset + CLIP_HEADER_LEN + pixel_bytes))?;
            file.read_exact(&mut labels)?;
            index.push(ClipEntry {
                offset,
                shape,
                appearance: u32::from_le_bytes(labels[..4].try_into().unwrap()),
                motion: u32::from_le_bytes(labels[4..].try_into().unwrap()),
            });
            offset += record;
        }
        Ok(ShardReader { file, index })
    }

    pub fn clip_count(&self) -> usize {
        self.index.len()
    }

    pub fn shape(&self, i: usize) -> Result<ClipShape> {
        Ok(self.entry(i)?.shape)
    }

    /// Labels without touching the pixel payload.
    pub fn labels(&self, i: usize) -> Result<(u32, u32)> {
        let e = self.entry(i)?;
        Ok((e.appearance, e.motion))
    }

    pub fn read_clip(&mut self, i: usize) -> Result<VideoClip> {
        let entry = self.entry(i)?.clone();
        let s = entry.shape;
        let pixel_count = s.frames * s.height * s.width * s.channels;
        let flow_count = s.frames * s.height * s.width * 2;

        self.file.seek(SeekFrom::Start(entry.offset + CLIP_HEADER_LEN))?;
        let pixels = read_f32s(&mut self.file, pixel_count)?;
        self.file.seek(SeekFrom::Current(8))?;
        let flow = read_f32s(&mut self.file, flow_count)?;

        Ok(VideoClip {
            pixels: Array4::from_shape_vec((s.frames, s.height, s.width, s.channels), pixels)
                .expect("payload length checked"),
            flow: Array4::from_shape_vec((s.frames, s.height, s.width, 2), flow)
                .expect("payload length checked"),
            appearance_label: entry.appearance,
            motion_label: entry.motion,
            scene: None,
        })
    }

    fn entry(&self, i: usize) -> Result<&ClipEntry> {
        self.index.get(i).ok_or_else(|| {
            Error::Input(format!("clip index {i} out of range (shard has {})", self.index.len()))
        })
    }
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

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

/// Shard-level metadata written next to the shard by data generation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShardManifest {
    pub clips: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub appearance_histogram: Vec<usize>,
    pub motion_histogram: Vec<usize>,
    pub shard_file: String,
}

impl ShardManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.write_all(b"\n")?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_stratified_clip, SceneConfig};

    fn small_shape() -> ClipShape {
        ClipShape { frames: 4, height: 16, width: 16, channels: 3 }
    }

    fn build_shard(path: &Path, count: usize, seed: u64) -> Vec<VideoClip> {
        let shape = small_shape();
        let cfg = SceneConfig::default();
        let mut writer = ShardWriter::create(path).unwrap();
        let mut clips = Vec::new();
        for i in 0..count {
            let clip = generate_stratified_clip(seed, i as u64, &shape, &cfg).unwrap();
            writer.push(&clip).unwrap();
            clips.push(clip);
        }
        assert_eq!(writer.finish().unwrap(), count);
        clips
    }

    #[test]
    fn round_trip_preserves_payloads_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.tmvc");
        let clips = build_shard(&path, 5, 7);
        let mut reader = ShardReader::open(&path).unwrap();
        assert_eq!(reader.clip_count(), 5);
        for (i, clip) in clips.iter().enumerate() {
            let back = reader.read_clip(i).unwrap();
            assert_eq!(back.pixels, clip.pixels);
            assert_eq!(back.flow, clip.flow);
            assert_eq!(back.appearance_label, clip.appearance_label);
            assert_eq!(back.motion_label, clip.motion_label);
            assert!(back.scene.is_none());
            assert_eq!(reader.labels(i).unwrap(), (clip.appearance_label, clip.motion_label));
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tmvc");
        let p2 = dir.path().join("b.tmvc");
        build_shard(&p1, 4, 3);
        let mut reader = ShardReader::open(&p1).unwrap();
        let mut writer = ShardWriter::create(&p2).unwrap();
        for i in 0..reader.clip_count() {
            let clip = reader.read_clip(i).unwrap();
            writer.push(&clip).unwrap();
        }
        writer.finish().unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn random_access_matches_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.tmvc");
        let clips = build_shard(&path, 6, 11);
        let mut reader = ShardReader::open(&path).unwrap();
        for &i in &[5usize, 0, 3, 3, 1] {
            let back = reader.read_clip(i).unwrap();
            assert_eq!(back.pixels, clips[i].pixels);
            assert_eq!(back.motion_label, clips[i].motion_label);
        }
    }

    #[test]
    fn empty_shard_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tmvc");
        let writer = ShardWriter::create(&path).unwrap();
        assert_eq!(writer.finish().unwrap(), 0);
        let reader = ShardReader::open(&path).unwrap();
        assert_eq!(reader.clip_count(), 0);
    }

    #[test]
    fn bad_magic_and_version_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tmvc");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        match ShardReader::open(&path).err() {
            Some(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::write(&path, b"TMVC\x09\x00").unwrap();
        match ShardReader::open(&path).err() {
            Some(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_file_end() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.tmvc");
        build_shard(&path, 2, 1);
        let full = std::fs::read(&path).unwrap();
        let cut = full.len() - 100;
        std::fs::write(&path, &full[..cut]).unwrap();
        match ShardReader::open(&path).err() {
            Some(Error::Format { offset, msg }) => {
                assert_eq!(offset, cut as u64);
                assert!(msg.contains("clip 1"), "message should name the clip: {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_shape_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tmvc");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TMVC");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        // Channels = 7 is not a supported layout.
        for dim in [4u32, 16, 16, 7] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        bytes.resize(bytes.len() + 64, 0);
        std::fs::write(&path, &bytes).unwrap();
        match ShardReader::open(&path).err() {
            Some(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = ShardManifest {
            clips: 64,
            seed: 9,
            frames: 16,
            height: 64,
            width: 64,
            channels: 3,
            appearance_histogram: vec![4; 16],
            motion_histogram: vec![4; 16],
            shard_file: "clips.tmvc".into(),
        };
        m.save(&path).unwrap();
        assert_eq!(ShardManifest::load(&path).unwrap(), m);
    }
}
