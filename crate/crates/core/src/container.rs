//! Self-describing binary container shared by model checkpoints and meta
//! inputs.
//!
//! ```text
//! META-INPUT <KIND>\n
//! version <u32>\n
//! header-bytes <n>\n
//! <n bytes of TOML: caller metadata, tensor table, payload digest>
//! <payload: little-endian f32 buffers, in tensor-table order>
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    payload_sha256: String,
    meta: toml::Table,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn encode(kind: &str, meta: toml::Table, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (_, t) in tensors {
        payload.extend(t.to_le_bytes());
    }
    let header = Header {
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = toml::to_string(&header).map_err(|e| Error::Format {
        what: "container",
        offset: 0,
        msg: e.to_string(),
    })?;
    let mut out = format!("META-INPUT {kind}\nversion {VERSION}\nheader-bytes {}\n", header.len()).into_bytes();
    out.extend(header.as_bytes());
    out.extend(payload);
    Ok(out)
}

#[derive(Debug)]
pub(crate) struct Decoded {
    pub meta: toml::Table,
    pub tensors: Vec<(String, Tensor)>,
}

struct Cursor<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.fail("unterminated header line"))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| self.fail("header line is not UTF-8"))?;
        self.pos += end + 1;
        Ok(s)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                what: self.what,
                offset: self.bytes.len() as u64,
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub(crate) fn decode(what: &'static str, kind: &str, bytes: &[u8]) -> Result<Decoded> {
    let mut cur = Cursor { what, bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != format!("META-INPUT {kind}") {
        cur.pos = 0;
        return Err(cur.fail(format!("bad magic {magic:?}, expected \"META-INPUT {kind}\"")));
    }
    let version_at = cur.pos;
    let version = cur
        .line()?
        .strip_prefix("version ")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Format {
            what,
            offset: version_at as u64,
            msg: "malformed version line".into(),
        })?;
    if version != VERSION {
        return Err(Error::Version {
            what,
            found: version,
            supported: VERSION,
        });
    }
    let len_at = cur.pos;
    let header_len = cur
        .line()?
        .strip_prefix("header-bytes ")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| Error::Format {
            what,
            offset: len_at as u64,
            msg: "malformed header-bytes line".into(),
        })?;
    let header_at = cur.pos;
    let raw = cur.take(header_len)?;
    let text = std::str::from_utf8(raw).map_err(|_| Error::Format {
        what,
        offset: header_at as u64,
        msg: "header is not UTF-8".into(),
    })?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Format {
        what,
        offset: header_at as u64,
        msg: format!("header: {e}"),
    })?;

    let payload_at = cur.pos;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    let payload = cur.take(expected)?;
    if cur.pos != bytes.len() {
        return Err(cur.fail(format!("{} trailing bytes after payload", bytes.len() - cur.pos)));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Format {
            what,
            offset: payload_at as u64,
            msg: "payload digest mismatch".into(),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = payload[off..off + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        off += n * 4;
        let t = Tensor::new(entry.shape, data).map_err(|e| Error::Format {
            what,
            offset: (payload_at + off) as u64,
            msg: format!("tensor `{}`: {e}", entry.name),
        })?;
        tensors.push((entry.name, t));
    }
    Ok(Decoded {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let t = Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.5);
        let mut meta = toml::Table::new();
        meta.insert("note".into(), "hi".into());
        encode("TEST", meta, &[("t", &t)]).unwrap()
    }

    #[test]
    fn roundtrip() {
        let d = decode("test", "TEST", &sample()).unwrap();
        assert_eq!(d.meta["note"].as_str(), Some("hi"));
        assert_eq!(d.tensors[0].1.data()[0], -2.5);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = sample();
        let cut = &b[..b.len() - 3];
        match decode("test", "TEST", cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flipped_payload_bit_detected() {
        let mut b = sample();
        let last = b.len() - 1;
        b[last] ^= 1;
        assert!(matches!(decode("test", "TEST", &b), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_version_is_version_error() {
        let b = String::from_utf8_lossy(&sample()).replacen("version 1", "version 7", 1);
        assert!(matches!(
            decode("test", "TEST", b.as_bytes()),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn wrong_kind_is_format_error_at_zero() {
        assert!(matches!(
            decode("test", "OTHER", &sample()),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
