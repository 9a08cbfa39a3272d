use std::path::Path;

use crate::adaptation::{MetaInput, Provenance};
use crate::container;
use crate::error::{Error, Result};

const KIND: &str = "INPUT";
const WHAT: &str = "meta input";

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: WHAT,
        offset: 0,
        msg: msg.into(),
    }
}

pub fn encode_meta_input(m: &MetaInput) -> Result<Vec<u8>> {
    let mut meta = toml::Table::new();
    meta.insert("steps".into(), toml::Value::Integer(m.steps as i64));
    let prov = toml::Table::try_from(&m.trained_on).map_err(|e| bad(e.to_string()))?;
    meta.insert("trained_on".into(), toml::Value::Table(prov));
    container::encode(KIND, meta, &[("w", &m.w)])
}

pub fn decode_meta_input(bytes: &[u8]) -> Result<MetaInput> {
    let d = container::decode(WHAT, KIND, bytes)?;
    let steps = d
        .meta
        .get("steps")
        .and_then(|v| v.as_integer())
        .filter(|&s| s >= 0)
        .ok_or_else(|| bad("missing steps"))? as usize;
    let trained_on: Provenance = d
        .meta
        .get("trained_on")
        .cloned()
        .ok_or_else(|| bad("missing trained_on"))?
        .try_into()
        .map_err(|e: toml::de::Error| bad(format!("trained_on: {e}")))?;
    let mut tensors = d.tensors.into_iter();
    let w = match (tensors.next(), tensors.next()) {
        (Some((name, w)), None) if name == "w" && w.rank() == 3 => w,
        _ => return Err(bad("expected exactly one rank-3 tensor named `w`")),
    };
    Ok(MetaInput { w, trained_on, steps })
}

pub fn save_meta_input(m: &MetaInput, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_meta_input(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_meta_input(path: impl AsRef<Path>) -> Result<MetaInput> {
    let path = path.as_ref();
    decode_meta_input(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
