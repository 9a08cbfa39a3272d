use std::path::Path;

use crate::container;
use crate::error::{Error, Result};
use crate::model::{BnStats, Model, ModelSpec, NamedParam};
use crate::tensor::Tensor;

const KIND: &str = "MODEL";

pub(crate) fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut meta = toml::Table::new();
    meta.insert("frozen".into(), model.frozen.into());
    meta.insert(
        "spec".into(),
        toml::Value::try_from(&model.spec).map_err(|e| Error::Format {
            what: "checkpoint",
            offset: 0,
            msg: e.to_string(),
        })?,
    );
    let bn: Vec<(String, Tensor)> = model
        .bn_stats
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            [
                (format!("bn{i}.running_mean"), vec_tensor(&s.mean)),
                (format!("bn{i}.running_var"), vec_tensor(&s.var)),
            ]
        })
        .collect();
    let mut tensors: Vec<(&str, &Tensor)> = model.params.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
    tensors.extend(bn.iter().map(|(n, t)| (n.as_str(), t)));
    container::encode(KIND, meta, &tensors)
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty stats")
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn decode_model(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: String| Error::Format {
        what: "checkpoint",
        offset: 0,
        msg,
    };
    let decoded = container::decode("checkpoint", KIND, bytes)?;
    let frozen = decoded
        .meta
        .get("frozen")
        .and_then(|v| v.as_bool())
        .ok_or_else(|| bad("header lacks `frozen`".into()))?;
    let spec: ModelSpec = decoded
        .meta
        .get("spec")
        .cloned()
        .ok_or_else(|| bad("header lacks `spec`".into()))?
        .try_into()
        .map_err(|e: toml::de::Error| bad(format!("spec: {e}")))?;

    // Rebuild the expected layout and fill it from the file.
    let template = Model::build(spec.clone(), 0)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = decoded.tensors.into_iter().collect();
    let mut params = Vec::with_capacity(template.params.len());
    for p in template.params {
        let t = by_name
            .remove(&p.name)
            .ok_or_else(|| bad(format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(bad(format!("tensor `{}` has shape {:?}, spec needs {:?}", p.name, t.shape(), p.tensor.shape())));
        }
        params.push(NamedParam { name: p.name, tensor: t });
    }
    let mut bn_stats = Vec::with_capacity(template.bn_stats.len());
    for (i, s) in template.bn_stats.iter().enumerate() {
        let mut take = |suffix: &str| -> Result<Vec<f32>> {
            let name = format!("bn{i}.{suffix}");
            let t = by_name.remove(&name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.numel() != s.mean.len() {
                return Err(bad(format!("tensor `{name}` has {} values, need {}", t.numel(), s.mean.len())));
            }
            Ok(t.into_data())
        };
        let mean = take("running_mean")?;
        let var = take("running_var")?;
        bn_stats.push(BnStats { mean, var });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }
    Ok(Model {
        spec,
        params,
        bn_stats,
        frozen,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_identity() {
        let mut m = Model::build(ModelSpec::digits(), 3).unwrap();
        m.bn_stats[1].mean[4] = 0.125;
        m.frozen = true;
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.params_checksum(), m.params_checksum());
        assert_eq!(back.bn_checksum(), m.bn_checksum());
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let m = Model::build(ModelSpec::digits(), 3).unwrap();
        let bytes = encode_model(&m).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }
}
