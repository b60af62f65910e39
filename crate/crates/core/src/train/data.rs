use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// One image/mask pair, image as CHW floats in [0, 1], mask as 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
}

impl Sample {
    /// From interleaved RGB8 and an 8-bit mask (values above 127 are road).
    pub fn from_rgb8(id: String, height: usize, width: usize, rgb: &[u8], mask: &[u8]) -> Self {
        let n = height * width;
        let mut image = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                image[c * n + i] = rgb[i * 3 + c] as f32 / 255.0;
            }
        }
        Sample {
            id,
            height,
            width,
            image,
            mask: mask.iter().map(|&m| if m > 127 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn image_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.image.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("sample buffers are consistent")
    }
}

/// Stacks samples of equal size into `[b, 3, h, w]` and a flat mask.
pub fn stack<T: Element>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<T>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Usage(format!(
                "batch mixes sizes {h}x{w} and {}x{} (`{}`)",
                s.height, s.width, s.id
            )));
        }
        image.extend(s.image.iter().map(|&v| T::from_f64_lossy(v as f64)));
        mask.extend(s.mask.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], image)?, mask))
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn load_pair(sat: &Path, mask: &Path, id: String) -> Result<Sample> {
    let rgb = image::open(sat).map_err(|e| image_err(sat, e))?.to_rgb8();
    let m = image::open(mask).map_err(|e| image_err(mask, e))?.to_luma8();
    if rgb.dimensions() != m.dimensions() {
        return Err(image_err(
            mask,
            format!("mask is {:?}, image is {:?}", m.dimensions(), rgb.dimensions()),
        ));
    }
    let (w, h) = rgb.dimensions();
    Ok(Sample::from_rgb8(id, h as usize, w as usize, rgb.as_raw(), m.as_raw()))
}

/// An RGB image as a sample with an all-background mask.
pub fn load_image(path: &Path) -> Result<Sample> {
    let rgb = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let mask = vec![0u8; (w * h) as usize];
    Ok(Sample::from_rgb8(id, h as usize, w as usize, rgb.as_raw(), &mask))
}

/// Writes `pixels` (row-major, one byte each) as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| image_err(path, "pixel buffer does not match size"))?
        .save(path)
        .map_err(|e| image_err(path, e))
}

/// Every `<id>_sat.png` in `dir` with its `<id>_mask.png`, sorted by id.
pub fn dataset_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(id) = name.strip_suffix("_sat.png") else { continue };
        let mask = dir.join(format!("{id}_mask.png"));
        if !mask.is_file() {
            return Err(image_err(&mask, "missing mask for satellite image"));
        }
        pairs.push((id.to_string(), path.clone(), mask));
    }
    pairs.sort();
    Ok(pairs)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    dataset_pairs(dir)?
        .into_iter()
        .map(|(id, sat, mask)| load_pair(&sat, &mask, id))
        .collect()
}
