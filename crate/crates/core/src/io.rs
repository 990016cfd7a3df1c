//! Binary containers for tensors and checkpoints, plus `key=value` text.
//!
//! Tensor record: rank (u32 LE), extents (u32 LE each), values as
//! little-endian `f32`. A `.rawt` file is exactly one record.
//!
//! Checkpoint: the magic `PIMMSCKPT1`, then for every parameter its name
//! length (u32 LE), UTF-8 name and tensor record; a zero name length ends
//! the parameter list and the rest of the file is UTF-8 `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{PimmsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"PIMMSCKPT1";

pub type Metadata = BTreeMap<String, String>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rank = self.u32()?;
        if rank == 0 || rank > 8 {
            return Err(format!("implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = Reader { bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(t)
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PimmsError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| PimmsError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PimmsError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PimmsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PimmsError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PimmsError::io(path, e))
}

pub fn write_rawt(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(8 + t.len() * 4);
    encode_tensor(&mut out, t);
    write_atomic(path, &out)
}

pub fn read_rawt(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?).map_err(|e| PimmsError::format(path, e))
}

pub fn encode_metadata(meta: &Metadata) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parse `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<Metadata, String> {
    let mut out = Metadata::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got `{line}`", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{k}`", i + 1));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Metadata> {
    let text = fs::read_to_string(path).map_err(|e| PimmsError::io(path, e))?;
    parse_key_values(&text).map_err(|e| PimmsError::format(path, e))
}

pub fn encode_checkpoint(params: &ParamStore, meta: &Metadata) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(&mut out, t);
    }
    put_u32(&mut out, 0);
    out.extend_from_slice(encode_metadata(meta).as_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ParamStore, Metadata), String> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err("missing PIMMSCKPT1 magic".into());
    }
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let mut params = ParamStore::new();
    loop {
        let n = r.u32()?;
        if n == 0 {
            break;
        }
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let t = r.tensor()?;
        params.insert(name, t).map_err(|e| e.to_string())?;
    }
    let text = std::str::from_utf8(&bytes[r.pos..])
        .map_err(|_| "metadata block is not UTF-8".to_string())?;
    Ok((params, parse_key_values(text)?))
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, meta: &Metadata) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, meta))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, Metadata)> {
    decode_checkpoint(&read_bytes(path)?).map_err(|e| PimmsError::format(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let len: usize = shape.iter().product();
            prop::collection::vec(-1e3f32..1e3, len)
                .prop_map(move |d| Tensor::new(shape.clone(), d.into_iter().map(f64::from).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips_f32_values(
            tensors in prop::collection::vec(tensor_strategy(), 1..5),
            seed in 0u64..1000,
        ) {
            let mut params = ParamStore::new();
            for (i, t) in tensors.into_iter().enumerate() {
                params.insert(format!("net/layer{i}/w"), t).unwrap();
            }
            let meta = Metadata::from([
                ("init".to_string(), "he-uniform".to_string()),
                ("seed".to_string(), seed.to_string()),
            ]);
            let bytes = encode_checkpoint(&params, &meta);
            let (p2, m2) = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(p2, params);
            prop_assert_eq!(m2, meta);
        }
    }

    #[test]
    fn checkpoint_layout_is_bit_exact() {
        let mut params = ParamStore::new();
        params
            .insert("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let meta = Metadata::from([("step".to_string(), "3".to_string())]);
        let bytes = encode_checkpoint(&params, &meta);
        let mut expected = b"PIMMSCKPT1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'a');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.extend_from_slice(b"step=3\n");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
        let mut params = ParamStore::new();
        params.insert("a", Tensor::zeros(&[3, 3])).unwrap();
        let bytes = encode_checkpoint(&params, &Metadata::new());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 10]).is_err());
    }

    #[test]
    fn key_value_parsing() {
        let m = parse_key_values("# comment\na = 1\n\nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values("a=1\na=2\n").is_err());
    }
}
