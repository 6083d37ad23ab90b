use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::Sample;

/// Samples loaded from disk plus the files that had no counterpart.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub unmatched: Vec<PathBuf>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Reads an 8-bit PNG as a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn read_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| {
        if img.get_pixel(x as u32, y as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Loads `images/<id>.png` with `masks/<id>.png`, sorted by id. Files without
/// a counterpart are reported and skipped.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    let mut unmatched = Vec::new();
    for (id, p) in &images {
        if !masks.contains_key(id) {
            log::warn!("{} has no mask, skipped", p.display());
            unmatched.push(p.clone());
        }
    }
    for (id, p) in &masks {
        if !images.contains_key(id) {
            log::warn!("{} has no image, skipped", p.display());
            unmatched.push(p.clone());
        }
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = images
        .iter()
        .filter_map(|(id, ip)| masks.get(id).map(|mp| (id, ip, mp)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("no image/mask pairs under {}", dir.display())));
    }
    let samples = pairs
        .par_iter()
        .map(|(id, ip, mp)| Sample::new(id.as_str(), read_rgb_png(ip)?, read_mask_png(mp)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, unmatched })
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).ok_or_else(|| {
        Error::Data(format!(
            "{}: pixel buffer does not match {width}x{height}",
            path.display()
        ))
    })?;
    img.save(path)?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes samples in the layout [`load_dataset`] reads; masks as {0, 255}.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let (h, w) = s.size();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| to_u8(s.image.at(0, c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(dir.join("images").join(format!("{}.png", s.id)))?;
        let mask = s.mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
        write_gray_png(&dir.join("masks").join(format!("{}.png", s.id)), w, h, mask)
    })
}
