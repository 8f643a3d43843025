//! Checkpoint container.
//!
//! Layout, little-endian: magic `TMCK`, version u16 (= 1), a u32-length
//! canonical config text (UTF-8 `key=value` lines sorted by key), then
//! named f32 tensors to end of file. Each tensor record is: name length
//! u16, name bytes, rank u8, dims u32 each, then the row-major payload.
//! Floats are written by bit pattern, so a write/read/write cycle is
//! byte-identical.

use super::params::Params;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"TMCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Renders config entries as canonical text: one `key=value` line per
/// entry, sorted by key. Duplicate keys and embedded newlines are
/// caller errors.
pub fn render_config(entries: &[(String, String)]) -> Result<String> {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Input(format!("duplicate config key '{}'", pair[0].0)));
        }
    }
    for (k, v) in sorted {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Input(format!("config entry '{k}' cannot be rendered")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("config line '{line}' is not key=value"),
            })?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("duplicate config key '{k}'"),
            });
        }
    }
    Ok(map)
}

pub fn write_checkpoint(
    path: &Path,
    config: &str,
    tensors: &[(&str, &[usize], &[f32])],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_bytes = config.as_bytes();
    if cfg_bytes.len() > u32::MAX as usize {
        return Err(Error::Input("config text too large for checkpoint".into()));
    }
    buf.extend_from_slice(&(cfg_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_bytes);
    for &(name, shape, data) in tensors {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Input(format!("tensor name '{name}' length out of range")));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Input(format!("tensor '{name}' rank {} too large", shape.len())));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Input(format!(
                "tensor '{name}' shape {shape:?} disagrees with {} values",
                data.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            if d > u32::MAX as usize {
                return Err(Error::Input(format!("tensor '{name}' dimension {d} too large")));
            }
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.flush()?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses a checkpoint. Format errors cite the byte offset: 0 for a bad
/// magic, 4 for an unsupported version, and the end of the readable
/// prefix for truncation.
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<NamedTensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, msg: "not a checkpoint file (bad magic)".into() });
    }
    if bytes.len() < 6 {
        return Err(Error::Format { offset: bytes.len() as u64, msg: "truncated header".into() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let mut pos = 6usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<usize> {
        if bytes.len() - *pos < n {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let at = *pos;
        *pos += n;
        Ok(at)
    };

    let at = take(&mut pos, 4, "config length")?;
    let cfg_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let at = take(&mut pos, cfg_len, "config text")?;
    let config = std::str::from_utf8(&bytes[at..at + cfg_len])
        .map_err(|_| Error::Format { offset: at as u64, msg: "config text is not UTF-8".into() })?
        .to_string();

    let mut tensors = Vec::new();
    while pos < bytes.len() {
        let record = pos as u64;
        let at = take(&mut pos, 2, "tensor name length")?;
        let name_len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        if name_len == 0 {
            return Err(Error::Format { offset: record, msg: "empty tensor name".into() });
        }
        let at = take(&mut pos, name_len, "tensor name")?;
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let at = take(&mut pos, 1, "tensor rank")?;
        let rank = bytes[at] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let at = take(&mut pos, 4, "tensor dimension")?;
            let d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            shape.push(d);
            count = count.checked_mul(d).ok_or(Error::Format {
                offset: record,
                msg: format!("tensor '{name}' dimension product overflows"),
            })?;
        }
        let at = take(&mut pos, count * 4, "tensor payload")?;
        let data: Vec<f32> = bytes[at..at + count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok((config, tensors))
}

/// Borrowing view of a parameter arena in checkpoint-tensor form.
pub fn params_tensors(p: &Params<f32>) -> Vec<(&str, &[usize], &[f32])> {
    (0..p.len()).map(|i| (p.name(i), p.shape(i), p.data(i))).collect()
}

/// Loads every registered parameter from the tensor list by name.
/// Tensors the arena does not know (optimizer state, counters) are
/// ignored here; a missing or misshapen parameter is a data error.
pub fn load_params(p: &mut Params<f32>, tensors: &[NamedTensor]) -> Result<()> {
    for i in 0..p.len() {
        let name = p.name(i).to_string();
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor '{name}'")))?;
        if t.shape != p.shape(i) {
            return Err(Error::Data(format!(
                "checkpoint tensor '{name}' has shape {:?}, model wants {:?}",
                t.shape,
                p.shape(i)
            )));
        }
        p.load_values(&name, &t.data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(&'static str, Vec<usize>, Vec<f32>)> {
        vec![
            ("a.weight", vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-40, 2.0, -7.0]),
            ("a.bias", vec![2], vec![0.0, 1.0e-8]),
            ("scalar", vec![], vec![42.0]),
        ]
    }

    fn write_sample(path: &Path) {
        let t = sample_tensors();
        let borrowed: Vec<(&str, &[usize], &[f32])> =
            t.iter().map(|(n, s, d)| (*n, s.as_slice(), d.as_slice())).collect();
        write_checkpoint(path, "alpha=1\nbeta=two\n", &borrowed).unwrap();
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tmck");
        write_sample(&path);
        let (config, tensors) = read_checkpoint(&path).unwrap();
        assert_eq!(config, "alpha=1\nbeta=two\n");
        let want = sample_tensors();
        assert_eq!(tensors.len(), want.len());
        for (got, (name, shape, data)) in tensors.iter().zip(&want) {
            assert_eq!(got.name, *name);
            assert_eq!(got.shape, *shape);
            let got_bits: Vec<u32> = got.data.iter().map(|v| v.to_bits()).collect();
            let want_bits: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(got_bits, want_bits);
        }

        // Write what was read; files must be byte-identical.
        let path2 = dir.path().join("m2.tmck");
        let borrowed: Vec<(&str, &[usize], &[f32])> = tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice()))
            .collect();
        write_checkpoint(&path2, &config, &borrowed).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_offsets_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tmck");
        std::fs::write(&path, b"NOPE").unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut v9 = Vec::new();
        v9.extend_from_slice(b"TMCK");
        v9.extend_from_slice(&9u16.to_le_bytes());
        v9.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &v9).unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_prefix_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.tmck");
        write_sample(&path);
        let full = std::fs::read(&path).unwrap();
        for cut in [full.len() - 3, full.len() - 30, 8, 5] {
            std::fs::write(&path, &full[..cut]).unwrap();
            match read_checkpoint(&path) {
                Err(Error::Format { offset, .. }) => {
                    assert_eq!(offset, cut as u64, "cut at {cut}")
                }
                other => panic!("expected format error at cut {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn config_rendering_is_canonical() {
        let entries = vec![
            ("zeta".to_string(), "9".to_string()),
            ("alpha".to_string(), "1".to_string()),
        ];
        let text = render_config(&entries).unwrap();
        assert_eq!(text, "alpha=1\nzeta=9\n");
        let map = parse_config(&text).unwrap();
        assert_eq!(map["alpha"], "1");
        assert_eq!(map["zeta"], "9");
        let dup = vec![
            ("k".to_string(), "1".to_string()),
            ("k".to_string(), "2".to_string()),
        ];
        assert!(render_config(&dup).is_err());
        assert!(parse_config("novalue\n").is_err());
    }

    #[test]
    fn load_params_checks_names_and_shapes() {
        let mut p = Params::<f32>::new();
        p.push("w", &[2, 2], false, vec![0.0; 4]);
        let good = vec![NamedTensor { name: "w".into(), shape: vec![2, 2], data: vec![1.0; 4] }];
        load_params(&mut p, &good).unwrap();
        assert_eq!(p.data(0), &[1.0; 4]);

        let missing: Vec<NamedTensor> = vec![];
        assert!(matches!(load_params(&mut p, &missing), Err(Error::Data(_))));
        let misshapen =
            vec![NamedTensor { name: "w".into(), shape: vec![4], data: vec![1.0; 4] }];
        assert!(matches!(load_params(&mut p, &misshapen), Err(Error::Data(_))));
    }
}
