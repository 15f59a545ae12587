//! Datasets (IDX and the SPNT raw container), sample-wise normalization,
//! occlusion masks and the occluded-region MSE.

mod idx;

pub use idx::{
    encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, IdxImages, IMAGE_MAGIC, LABEL_MAGIC,
};

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SpnError};
use crate::leaves::EvidenceMask;

pub const RAW_MAGIC: &[u8; 4] = b"SPNT";
pub const RAW_VERSION: u32 = 1;

/// `n` grayscale images of `height x width` bytes, optionally labelled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u8>>,
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, labels: Option<Vec<u8>>) -> Result<Self> {
        let cells = height * width;
        if cells == 0 || pixels.len() % cells != 0 {
            return Err(SpnError::domain(format!(
                "{} bytes do not form {height}x{width} images",
                pixels.len()
            )));
        }
        let n = pixels.len() / cells;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(SpnError::domain(format!("{n} images but {} labels", l.len())));
            }
        }
        Ok(ImageDataset {
            n,
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let cells = self.height * self.width;
        &self.pixels[i * cells..(i + 1) * cells]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i] as usize)
    }

    /// The first `count` samples (all of them if fewer).
    pub fn take(&self, count: usize) -> ImageDataset {
        let n = count.min(self.n);
        let cells = self.height * self.width;
        ImageDataset {
            n,
            height: self.height,
            width: self.width,
            pixels: self.pixels[..n * cells].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| v as usize).collect())
    }

    pub fn images_f64(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.image(i).iter().map(|&p| f64::from(p)).collect())
            .collect()
    }
}

/// Loads an IDX image file, plus an optional IDX label file.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<ImageDataset> {
    let parsed = parse_idx_images(&idx::read_bytes(images)?, images)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&idx::read_bytes(p)?, p)?;
            if l.len() != parsed.n {
                return Err(SpnError::Format {
                    path: p.to_path_buf(),
                    offset: 4,
                    message: format!("{} labels for {} images", l.len(), parsed.n),
                });
            }
            Some(l)
        }
        None => None,
    };
    ImageDataset::new(parsed.rows, parsed.cols, parsed.pixels, labels)
}

/// Writes the dataset as IDX files (gzip when a name ends in `.gz`).
pub fn write_idx(dataset: &ImageDataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    let enc = encode_idx_images(&IdxImages {
        n: dataset.n,
        rows: dataset.height,
        cols: dataset.width,
        pixels: dataset.pixels.clone(),
    });
    idx::write_bytes(images, &enc)?;
    if let (Some(path), Some(l)) = (labels, &dataset.labels) {
        idx::write_bytes(path, &encode_idx_labels(l))?;
    }
    Ok(())
}

pub fn parse_raw(bytes: &[u8], path: &Path) -> Result<ImageDataset> {
    let err = |offset: usize, message: String| SpnError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 20 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(err(0, "bad raw tensor magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = word(4);
    if version != RAW_VERSION {
        return Err(err(4, format!("unsupported raw tensor version {version}")));
    }
    let (n, h, w) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let body = &bytes[20..];
    if body.len() != n * h * w {
        return Err(err(
            20 + body.len().min(n * h * w),
            format!("{} pixel bytes expected", n * h * w),
        ));
    }
    ImageDataset::new(h, w, body.to_vec(), None)
}

pub fn encode_raw(dataset: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + dataset.pixels.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [
        RAW_VERSION,
        dataset.n as u32,
        dataset.height as u32,
        dataset.width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&dataset.pixels);
    out
}

/// Loads either container, recognized by its leading bytes.
pub fn load_dataset(images: &Path, labels: Option<&Path>) -> Result<ImageDataset> {
    let bytes = idx::read_bytes(images)?;
    if bytes.starts_with(RAW_MAGIC) {
        let mut d = parse_raw(&bytes, images)?;
        if let Some(p) = labels {
            let l = parse_idx_labels(&idx::read_bytes(p)?, p)?;
            d = ImageDataset::new(d.height, d.width, d.pixels, Some(l))?;
        }
        Ok(d)
    } else {
        load_idx(images, labels)
    }
}

/// Mean and population standard deviation of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics over the pixels selected by `mask` (all pixels when `None`).
/// A constant selection gets `std = 1`.
pub fn image_stats(pixels: &[f64], mask: Option<&EvidenceMask>) -> NormStats {
    let chosen = |i: usize| mask.is_none_or(|m| m.observed[i]);
    let (mut n, mut sum) = (0usize, 0.0);
    for (i, &p) in pixels.iter().enumerate() {
        if chosen(i) {
            n += 1;
            sum += p;
        }
    }
    if n == 0 {
        return NormStats { mean: 0.0, std: 1.0 };
    }
    let mean = sum / n as f64;
    let var = pixels
        .iter()
        .enumerate()
        .filter(|(i, _)| chosen(*i))
        .map(|(_, p)| (p - mean) * (p - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    NormStats {
        mean,
        std: if std > 0.0 { std } else { 1.0 },
    }
}

pub fn normalize(pixels: &[f64], stats: NormStats) -> Vec<f64> {
    pixels.iter().map(|p| (p - stats.mean) / stats.std).collect()
}

/// Maps normalized values back to pixel units, clipped to `[0, 255]`.
pub fn denormalize(values: &[f64], stats: NormStats) -> Vec<f64> {
    values
        .iter()
        .map(|v| (v * stats.std + stats.mean).clamp(0.0, 255.0))
        .collect()
}

/// Normalizes every image by its own mean and standard deviation.
pub fn normalize_samplewise(dataset: &ImageDataset) -> (Vec<Vec<f64>>, Vec<NormStats>) {
    dataset
        .images_f64()
        .into_iter()
        .map(|im| {
            let s = image_stats(&im, None);
            (normalize(&im, s), s)
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionSpec {
    Left,
    Bottom,
    None,
}

impl fmt::Display for OcclusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OcclusionSpec::Left => "left",
            OcclusionSpec::Bottom => "bottom",
            OcclusionSpec::None => "none",
        })
    }
}

impl FromStr for OcclusionSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "left" => Ok(OcclusionSpec::Left),
            "bottom" => Ok(OcclusionSpec::Bottom),
            "none" => Ok(OcclusionSpec::None),
            other => Err(format!("unknown occlusion `{other}` (left, bottom, none)")),
        }
    }
}

/// Left: columns `[0, W/2)` hidden. Bottom: rows `[ceil(H/2), H)` hidden.
pub fn apply_occlusion(height: usize, width: usize, spec: OcclusionSpec) -> EvidenceMask {
    let mut mask = EvidenceMask::all_observed(height, width);
    for i in 0..height {
        for j in 0..width {
            let hidden = match spec {
                OcclusionSpec::Left => j < width / 2,
                OcclusionSpec::Bottom => i >= height.div_ceil(2),
                OcclusionSpec::None => false,
            };
            mask.observed[i * width + j] = !hidden;
        }
    }
    mask
}

/// Mean squared error over the hidden pixels.
pub fn mse_occluded(predicted: &[f64], original: &[f64], mask: &EvidenceMask) -> Result<f64> {
    if predicted.len() != original.len() || original.len() != mask.observed.len() {
        return Err(SpnError::domain("image and mask sizes differ"));
    }
    let (mut n, mut sum) = (0usize, 0.0);
    for ((p, o), &obs) in predicted.iter().zip(original).zip(&mask.observed) {
        if !obs {
            n += 1;
            sum += (p - o) * (p - o);
        }
    }
    if n == 0 {
        return Err(SpnError::domain("no hidden pixels to score"));
    }
    Ok(sum / n as f64)
}

/// Per-pixel mean over a dataset, in pixel units.
pub fn pixel_means(dataset: &ImageDataset) -> Vec<f64> {
    let cells = dataset.height * dataset.width;
    let mut acc = vec![0.0; cells];
    for i in 0..dataset.n {
        for (a, &p) in acc.iter_mut().zip(dataset.image(i)) {
            *a += f64::from(p);
        }
    }
    acc.iter_mut().for_each(|a| *a /= dataset.n.max(1) as f64);
    acc
}

/// Writes an 8-bit binary PGM; values are rounded and clipped.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(SpnError::domain("pixel count does not match the image size"));
    }
    let mut f = File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}
