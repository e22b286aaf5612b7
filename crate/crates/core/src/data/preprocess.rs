//! Image decoding and backbone preprocessing.

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use ndarray::Array3;

use crate::backbone::{Image, Preprocessing};
use crate::{Error, Result, Scalar};

/// Decodes `bytes`, resizes the short side to the backbone resolution,
/// center-crops and normalizes per channel.
pub fn preprocess_image<T: Scalar>(bytes: &[u8], prep: &Preprocessing, locator: &str) -> Result<Image<T>> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        locator: locator.to_string(),
        message: e.to_string(),
    })?;
    Ok(preprocess_rgb(&decoded.to_rgb8(), prep))
}

pub fn preprocess_rgb<T: Scalar>(img: &RgbImage, prep: &Preprocessing) -> Image<T> {
    let res = prep.resolution as u32;
    let (w, h) = img.dimensions();
    let fitted = if (w, h) == (res, res) {
        img.clone()
    } else {
        let scale = res as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(res);
        let nh = ((h as f64 * scale).round() as u32).max(res);
        let resized = DynamicImage::ImageRgb8(img.clone()).resize_exact(nw, nh, FilterType::CatmullRom).to_rgb8();
        let (x0, y0) = ((nw - res) / 2, (nh - res) / 2);
        image::imageops::crop_imm(&resized, x0, y0, res, res).to_image()
    };
    Array3::from_shape_fn((res as usize, res as usize, 3), |(y, x, c)| {
        let v = fitted.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
        T::lit((v - prep.mean[c] as f64) / prep.std[c] as f64)
    })
}

/// Inverse of the normalization, for visualization.
pub fn to_rgb<T: Scalar>(img: &Image<T>, prep: &Preprocessing) -> RgbImage {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = img[[y as usize, x as usize, c]].to_f64_lossy() * prep.std[c] as f64 + prep.mean[c] as f64;
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}
