use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::idx::{encode_images, encode_labels, read_idx_images, read_idx_labels};
use crate::data::{Dataset, IdxEncoding};
use crate::error::{Error, Result};

/// Structured-text description of a dataset on disk.
///
/// Relative paths resolve against the directory holding the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub images: PathBuf,
    pub images_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_sha256: Option<String>,
    #[serde(default)]
    pub lineage: Vec<String>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the dataset as IDX files next to `path` and a manifest at `path`.
pub fn save_manifest(ds: &Dataset, path: &Path, encoding: IdxEncoding) -> Result<Manifest> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let images_name = PathBuf::from(format!("{stem}-images.idx"));
    let image_bytes = encode_images(&ds.images, encoding);
    fs::write(dir.join(&images_name), &image_bytes).map_err(|e| Error::io(dir.join(&images_name), e))?;
    let (labels, labels_sha256) = match &ds.labels {
        Some(l) => {
            let name = PathBuf::from(format!("{stem}-labels.idx"));
            let bytes = encode_labels(l);
            fs::write(dir.join(&name), &bytes).map_err(|e| Error::io(dir.join(&name), e))?;
            (Some(name), Some(digest(&bytes)))
        }
        None => (None, None),
    };
    let manifest = Manifest {
        name: ds.name.clone(),
        num_classes: ds.num_classes,
        images: images_name,
        images_sha256: digest(&image_bytes),
        labels,
        labels_sha256,
        lineage: ds.lineage.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Ingestion {
        entry: path.display().to_string(),
        msg: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Reads a manifest and the files it references, verifying checksums.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let entry = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
        entry: entry.clone(),
        msg: e.to_string(),
    })?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Ingestion {
        entry: entry.clone(),
        msg: format!("manifest: {e}"),
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let fetch = |rel: &Path, want: &str, field: &str| -> Result<Vec<u8>> {
        let p = dir.join(rel);
        let bytes = fs::read(&p).map_err(|e| Error::Ingestion {
            entry: format!("{entry}: {field} = {}", rel.display()),
            msg: e.to_string(),
        })?;
        let got = digest(&bytes);
        if got != want {
            return Err(Error::Ingestion {
                entry: format!("{entry}: {field} = {}", rel.display()),
                msg: format!("checksum {got} does not match manifest {want}"),
            });
        }
        Ok(bytes)
    };
    let images = read_idx_images(&fetch(&m.images, &m.images_sha256, "images")?)?;
    let labels = match (&m.labels, &m.labels_sha256) {
        (Some(p), Some(sha)) => Some(read_idx_labels(&fetch(p, sha, "labels")?)?),
        (Some(_), None) => {
            return Err(Error::Ingestion {
                entry,
                msg: "labels listed without labels_sha256".into(),
            })
        }
        _ => None,
    };
    if let Some(l) = &labels {
        if l.len() != images.shape()[0] {
            return Err(Error::Consistency {
                op: "load_manifest",
                msg: format!("{} images but {} labels in `{}`", images.shape()[0], l.len(), entry),
            });
        }
    }
    let mut ds = Dataset::new(images, labels, m.num_classes, m.name)?;
    ds.lineage = m.lineage;
    ds.check_unit_range("load_manifest")?;
    Ok(ds)
}
