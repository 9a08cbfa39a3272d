//! IDX container (the MNIST distribution format).
//!
//! Magic is `0x00 0x00 <type> <ndim>` followed by `ndim` big-endian u32
//! extents. Images are `0x0803` (u8, `n×rows×cols`) or `0x0804`
//! (u8, `n×rows×cols×channels`); type `0x0D` stores big-endian f32 instead
//! of bytes and is used for derived datasets so that corruptions survive a
//! round trip without quantization. Labels are `0x0801`.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxEncoding {
    /// One byte per pixel, `round(v · 255)`.
    U8,
    /// Big-endian IEEE single precision, lossless.
    F32,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "idx",
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn header(bytes: &[u8]) -> Result<(u8, Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file shorter than the magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    let ty = bytes[2];
    let ndim = bytes[3] as usize;
    let body = 4 + 4 * ndim;
    if bytes.len() < body {
        return Err(format_err(bytes.len(), "truncated dimension table"));
    }
    let dims = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    Ok((ty, dims, body))
}

/// Decodes an image file into an NHWC tensor scaled to `[0, 1]` for u8 data.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (ty, dims, body) = header(bytes)?;
    let shape = match dims.len() {
        3 => vec![dims[0], dims[1], dims[2], 1],
        4 => dims.clone(),
        _ => {
            return Err(format_err(
                3,
                format!("bad magic: images need 3 or 4 dimensions, found {}", dims.len()),
            ))
        }
    };
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(format_err(4, "zero-sized image dimension"));
    }
    let width = match ty {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        other => return Err(format_err(2, format!("bad magic: unsupported element type 0x{other:02x}"))),
    };
    let need = body + n * width;
    if bytes.len() != need {
        return Err(format_err(
            bytes.len().min(need),
            format!("expected {need} bytes for {shape:?}, file has {}", bytes.len()),
        ));
    }
    let raw = &bytes[body..];
    let data: Vec<f32> = match ty {
        TYPE_U8 => raw.iter().map(|&b| b as f32 / 255.0).collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (ty, dims, body) = header(bytes)?;
    if ty != TYPE_U8 || dims.len() != 1 {
        return Err(format_err(2, format!("bad magic: labels need type 0x08 with 1 dimension, found 0x{ty:02x} with {}", dims.len())));
    }
    if bytes.len() != body + dims[0] {
        return Err(format_err(
            bytes.len().min(body + dims[0]),
            format!("expected {} label bytes, file has {}", dims[0], bytes.len() - body),
        ));
    }
    Ok(bytes[body..].iter().map(|&b| b as usize).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads images (and labels when given) into a dataset named after the image file.
///
/// `num_classes` is taken as one past the largest label (at least 2) unless
/// supplied.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let images = read_idx_images(&read_file(images_path)?)?;
    let labels = match labels_path {
        Some(p) => {
            let l = read_idx_labels(&read_file(p)?)?;
            if l.len() != images.shape()[0] {
                return Err(Error::Consistency {
                    op: "load_idx",
                    msg: format!("{} has {} images but {} has {} labels", images_path.display(), images.shape()[0], p.display(), l.len()),
                });
            }
            Some(l)
        }
        None => None,
    };
    let classes = num_classes.unwrap_or_else(|| labels.as_ref().and_then(|l| l.iter().max()).map_or(2, |&m| (m + 1).max(2)));
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::new(images, labels, classes, name)?;
    ds.lineage.push(format!("load_idx({})", images_path.display()));
    ds.check_unit_range("load_idx")?;
    Ok(ds)
}

pub(crate) fn encode_images(images: &Tensor, encoding: IdxEncoding) -> Vec<u8> {
    let s = images.shape();
    let dims: Vec<usize> = if s[3] == 1 { s[..3].to_vec() } else { s.to_vec() };
    let ty = match encoding {
        IdxEncoding::U8 => TYPE_U8,
        IdxEncoding::F32 => TYPE_F32,
    };
    let mut out = vec![0, 0, ty, dims.len() as u8];
    for d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    match encoding {
        IdxEncoding::U8 => out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
        IdxEncoding::F32 => {
            for &v in images.data() {
                out.extend(v.to_be_bytes());
            }
        }
    }
    out
}

pub(crate) fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, TYPE_U8, 1];
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&y| y as u8));
    out
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: Option<&Path>, encoding: IdxEncoding) -> Result<()> {
    fs::write(images_path, encode_images(&ds.images, encoding)).map_err(|e| Error::io(images_path, e))?;
    if let (Some(p), Some(l)) = (labels_path, &ds.labels) {
        if ds.num_classes > 256 {
            return Err(Error::Range {
                op: "write_idx",
                msg: format!("{} classes do not fit in u8 labels", ds.num_classes),
            });
        }
        fs::write(p, encode_labels(l)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_is_format_error() {
        let bytes = [0x01, 0x00, 0x08, 0x03, 0, 0, 0, 0];
        assert!(matches!(read_idx_images(&bytes), Err(Error::Format { offset: 0, .. })));
        let labels_as_images = encode_labels(&[1, 2]);
        assert!(matches!(read_idx_images(&labels_as_images), Err(Error::Format { .. })));
    }

    #[test]
    fn f32_encoding_is_lossless() {
        let t = Tensor::from_fn(vec![2, 3, 2, 1], |i| i as f32 / 7.0);
        let back = read_idx_images(&encode_images(&t, IdxEncoding::F32)).unwrap();
        assert_eq!(back, t);
    }
}
