use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("IDX {what} header truncated")))
}

/// Parses an IDX image file and its label file. Pixels are scaled to `[0, 1]`
/// and samples shaped `[1, rows, cols]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!(
            "image file magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let lmagic = be_u32(labels, 0, "label")?;
    if lmagic != LABELS_MAGIC {
        return Err(Error::format(format!(
            "label file magic {lmagic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let ln = be_u32(labels, 4, "label")? as usize;
    if ln != n {
        return Err(Error::format(format!("{n} images but {ln} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format("IDX file declares an empty dataset"));
    }
    let pixels = &images[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::format(format!(
            "image payload has {} bytes, header declares {}",
            pixels.len(),
            n * rows * cols
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::format(format!(
            "label payload has {} bytes, header declares {n}",
            label_bytes.len()
        )));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        class_count,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Parses series rows `label,v0,v1,...`; samples are shaped `[1, length]`.
pub fn parse_series_csv(text: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut length = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label = fields
            .next()
            .and_then(|f| f.parse::<f64>().ok())
            .filter(|v| *v >= 0.0 && v.fract() == 0.0)
            .ok_or_else(|| Error::format(format!("line {}: bad label", lineno + 1)))?;
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(format!("line {}: {e}", lineno + 1)))?;
        if values.is_empty() {
            return Err(Error::format(format!("line {}: no values", lineno + 1)));
        }
        match length {
            None => length = Some(values.len()),
            Some(l) if l != values.len() => {
                return Err(Error::format(format!(
                    "line {}: {} values, expected {l}",
                    lineno + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        labels.push(label as usize);
        data.extend(values);
    }
    let length = length.ok_or_else(|| Error::format("series file has no rows"))?;
    let n = labels.len();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, length], data)?, labels, class_count)
}

pub fn load_series_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_series_csv(&fs::read_to_string(path)?)
}
