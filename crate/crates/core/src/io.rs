//! Dataset readers (IDX, binary PGM/PPM) and image writers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| dataset_err(path, "truncated header"))
}

/// Read an IDX image/label pair (MNIST layout).
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let img = read(images)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Magic {
            path: images.to_path_buf(),
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&img, 4, images)? as usize;
    let h = be_u32(&img, 8, images)? as usize;
    let w = be_u32(&img, 12, images)? as usize;
    let pixels = img.get(16..).unwrap_or(&[]);
    if pixels.len() != n * h * w {
        return Err(dataset_err(
            images,
            format!("expected {} pixel bytes, found {}", n * h * w, pixels.len()),
        ));
    }

    let lab = read(labels)?;
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Magic {
            path: labels.to_path_buf(),
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let m = be_u32(&lab, 4, labels)? as usize;
    let values = lab.get(8..).unwrap_or(&[]);
    if values.len() != m {
        return Err(dataset_err(labels, format!("expected {m} labels, found {}", values.len())));
    }
    if m != n {
        return Err(dataset_err(labels, format!("{m} labels for {n} images")));
    }
    if n == 0 {
        return Err(dataset_err(images, "no images"));
    }
    let labels_vec: Vec<usize> = values.iter().map(|&b| b as usize).collect();
    let classes = classes.unwrap_or_else(|| labels_vec.iter().max().map_or(1, |m| m + 1));
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels_vec, classes)
}

/// Binary PGM (P5) or PPM (P6) with maxval up to 255, as `[C, H, W]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(dataset_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => {
            return Err(Error::Magic {
                path: path.to_path_buf(),
                expected: "P5 or P6".into(),
            })
        }
    };
    let mut num = || -> Result<usize> {
        token()?.parse().map_err(|_| dataset_err(path, "bad header number"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 255 || w == 0 || h == 0 {
        return Err(dataset_err(path, format!("unsupported header {w}x{h} max {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).unwrap_or(&[]);
    let n = w * h * channels;
    if raster.len() < n {
        return Err(dataset_err(path, format!("expected {n} raster bytes, found {}", raster.len())));
    }
    let scale = maxval as f64;
    // interleaved RGB to planar
    let data = Tensor::from_fn(&[channels, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raster[p * channels + c] as f64 / scale
    });
    Ok(data)
}

/// A directory of PGM/PPM files plus a CSV of `file,label` rows.
pub fn load_image_dir(dir: &Path, labels_csv: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    let mut table = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("file")) {
            continue;
        }
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| dataset_err(labels_csv, format!("line {}: expected file,label", lineno + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| dataset_err(labels_csv, format!("line {}: bad label", lineno + 1)))?;
        table.insert(name.trim().to_string(), label);
    }

    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(dataset_err(dir, "no PGM/PPM files"));
    }
    if files.len() != table.len() {
        return Err(dataset_err(
            labels_csv,
            format!("{} labels for {} images", table.len(), files.len()),
        ));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len());
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label = *table
            .get(name)
            .ok_or_else(|| dataset_err(labels_csv, format!("no label for {name}")))?;
        images.push(read_pnm(f)?);
        labels.push(label);
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Tensor::stack(&images)?, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Pgm,
    Ppm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutOfRange {
    #[default]
    Error,
    Clamp,
}

/// 8-bit code for a pixel in `[0, 1]`, rounding half up.
pub fn quantize_pixel(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encode a `[C, H, W]` image as binary PGM (C = 1) or PPM (C = 3).
pub fn encode_pnm(img: &Tensor, fmt: ImageFormat, policy: OutOfRange) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("write_image", format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = match (fmt, c) {
        (ImageFormat::Pgm, 1) => "P5",
        (ImageFormat::Ppm, 3) => "P6",
        _ => {
            return Err(Error::shape(
                "write_image",
                format!("{fmt:?} cannot hold {c} channels"),
            ))
        }
    };
    if policy == OutOfRange::Error {
        if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("pixel value {v} outside [0, 1]")));
        }
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize_pixel(img.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_image(img: &Tensor, path: &Path, fmt: ImageFormat, policy: OutOfRange) -> Result<()> {
    let bytes = encode_pnm(img, fmt, policy)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Format matching the channel count.
pub fn format_for(img: &Tensor) -> ImageFormat {
    if img.shape().first() == Some(&3) {
        ImageFormat::Ppm
    } else {
        ImageFormat::Pgm
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
