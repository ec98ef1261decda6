//! Binary array files: a text header naming each array, then the values as
//! little-endian `f64`s in header order.
//!
//! ```text
//! unctrack-weights 1
//! count 2
//! enc.embed.b 64 64
//! enc.embed.w 768x64 49152
//! end
//! <raw bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};

const MAGIC: &str = "unctrack-weights 1";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Parse(format!("bad dimension `{d}` in shape `{s}`"))))
        .collect()
}

/// Encodes named arrays, sorted by name.
pub fn encode_arrays<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Array)>) -> Result<Vec<u8>> {
    let mut entries: Vec<(&str, &Array)> = arrays.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut header = format!("{MAGIC}\ncount {}\n", entries.len());
    for (name, a) in &entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Input(format!("array name `{name}` must be non-empty without whitespace")));
        }
        header.push_str(&format!("{name} {} {}\n", shape_str(a.shape()), a.len()));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for (_, a) in &entries {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes arrays in file order.
pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("truncated header".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Parse("header is not UTF-8".into()))
    };
    if next_line()? != MAGIC {
        return Err(Error::Parse("not an unctrack weights file".into()));
    }
    let count: usize = next_line()?
        .strip_prefix("count ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Parse("missing array count".into()))?;
    let mut meta = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, n] = fields[..] else {
            return Err(Error::Parse(format!("bad header line `{line}`")));
        };
        let shape = parse_shape(shape)?;
        let n: usize = n.parse().map_err(|_| Error::Parse(format!("bad element count in `{line}`")))?;
        if shape.iter().product::<usize>() != n {
            return Err(Error::Parse(format!("element count disagrees with shape in `{line}`")));
        }
        meta.push((name.to_string(), shape, n));
    }
    if next_line()? != "end" {
        return Err(Error::Parse("missing header terminator".into()));
    }
    let body = &bytes[pos..];
    let total: usize = meta.iter().map(|m| m.2).sum();
    if body.len() != total * 8 {
        return Err(Error::Parse(format!("expected {} data bytes, found {}", total * 8, body.len())));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    meta.into_iter()
        .map(|(name, shape, n)| {
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Ok((name, Array::new(shape, data)?))
        })
        .collect()
}

pub fn encode_params(params: &ParamStore) -> Result<Vec<u8>> {
    encode_arrays(params.iter())
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, a) in decode_arrays(bytes)? {
        store.insert(&name, a)?;
    }
    Ok(store)
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    fs::write(path, encode_params(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    decode_params(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut p = ParamStore::new();
        p.insert("b", Array::vector(&[1.5, -0.0, f64::MIN_POSITIVE])).unwrap();
        p.insert("a", Array::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        p.insert("s", Array::scalar(3.0)).unwrap();
        let bytes = encode_params(&p).unwrap();
        let q = decode_params(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, encode_params(&q).unwrap());
        let header = String::from_utf8_lossy(&bytes[..80]);
        assert!(header.starts_with("unctrack-weights 1\ncount 3\na 2x2 4\nb 3 3\ns 1 1\nend\n"));
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Array::vector(&[1.0, 2.0])).unwrap();
        let bytes = encode_params(&p).unwrap();
        assert!(matches!(decode_params(&bytes[..bytes.len() - 1]), Err(Error::Parse(_))));
        assert!(decode_params(b"garbage\n").is_err());
    }
}
