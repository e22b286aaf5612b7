//! PNG output: qualitative result grids and mask previews.
//!
//! Text goes to a `.txt` sidecar next to each image.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};

use crate::backbone::{Image, Preprocessing};
use crate::data::preprocess::to_rgb;
use crate::data::ImageSource;
use crate::masking::{MaskedPairBundle, RelevanceMap};
use crate::{Error, Result, Scalar};

pub const TILE: u32 = 96;
pub const BORDER: u32 = 4;

const QUERY_COLOR: Rgb<u8> = Rgb([40, 90, 220]);
const HIT_COLOR: Rgb<u8> = Rgb([30, 180, 60]);
const PLAIN_COLOR: Rgb<u8> = Rgb([235, 235, 235]);
const PLACEHOLDER: Rgb<u8> = Rgb([128, 128, 128]);

fn source_rgb(source: &ImageSource) -> Option<RgbImage> {
    match source {
        ImageSource::Synthetic(s) => Some(s.render()),
        ImageSource::File(p) => image::open(p).ok().map(|i| i.to_rgb8()),
    }
}

fn tile(img: Option<&RgbImage>, frame: Rgb<u8>) -> RgbImage {
    let inner = TILE - 2 * BORDER;
    let mut out = RgbImage::from_pixel(TILE, TILE, frame);
    let body = match img {
        Some(i) => imageops::resize(i, inner, inner, imageops::FilterType::Triangle),
        None => RgbImage::from_pixel(inner, inner, PLACEHOLDER),
    };
    imageops::replace(&mut out, &body, i64::from(BORDER), i64::from(BORDER));
    out
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

fn save(canvas: &RgbImage, path: &Path, text: &str) -> Result<()> {
    canvas
        .save(path)
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))?;
    let side = sidecar(path);
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

/// One row of a result grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub query: ImageSource,
    pub query_text: String,
    pub target_id: String,
    /// Ranked ids with their image, if resolvable.
    pub retrieved: Vec<(String, Option<ImageSource>)>,
}

/// Writes one row per query: the reference image then the top `top` results,
/// with the ground truth framed green. Returns the canvas size.
pub fn emit_result_grid(rows: &[GridRow], top: usize, out: &Path) -> Result<(u32, u32)> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("result grid needs at least one query".into()));
    }
    if top == 0 {
        return Err(Error::InvalidInput("result grid needs top >= 1".into()));
    }
    let (w, h) = (TILE * (1 + top as u32), TILE * rows.len() as u32);
    let mut canvas = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut text = String::new();
    for (r, row) in rows.iter().enumerate() {
        let y = i64::from(TILE * r as u32);
        let q = source_rgb(&row.query);
        imageops::replace(&mut canvas, &tile(q.as_ref(), QUERY_COLOR), 0, y);
        let _ = write!(text, "row {r}: {} | target {} |", row.query_text, row.target_id);
        for (c, (id, src)) in row.retrieved.iter().take(top).enumerate() {
            let img = src.as_ref().and_then(source_rgb);
            let frame = if *id == row.target_id { HIT_COLOR } else { PLAIN_COLOR };
            imageops::replace(&mut canvas, &tile(img.as_ref(), frame), i64::from(TILE * (c as u32 + 1)), y);
            let _ = write!(text, " {id}{}", if *id == row.target_id { "*" } else { "" });
        }
        text.push('\n');
    }
    save(&canvas, out, &text)?;
    Ok((w, h))
}

/// Blue-to-red colour ramp for a score in `[0, 1]`.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    Rgb([(255.0 * v) as u8, (80.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8, (255.0 * (1.0 - v)) as u8])
}

/// Original, relevance heat map, relevant-patch overlay and masked image side by side.
pub fn emit_mask_preview<T: Scalar>(
    original: &Image<T>,
    bundle: &MaskedPairBundle<T>,
    caption: &str,
    masked_caption: &str,
    prep: &Preprocessing,
    out: &Path,
) -> Result<(u32, u32)> {
    let orig = to_rgb(original, prep);
    let masked = to_rgb(&bundle.masked_image, prep);
    let grid = bundle.relevance.grid();
    let map: &RelevanceMap<T> = &bundle.relevance;
    let cell = |x: u32, y: u32, side: u32| ((y * grid as u32 / side) as usize, (x * grid as u32 / side) as usize);
    let side = orig.width();
    let heatmap = RgbImage::from_fn(side, side, |x, y| heat(map.scores[cell(x, y, side)].to_f64_lossy()));
    let overlay = RgbImage::from_fn(side, side, |x, y| {
        let p = orig.get_pixel(x, y);
        if bundle.masks.relevant[cell(x, y, side)] == 1 {
            *p
        } else {
            Rgb([p[0] / 4, p[1] / 4, p[2] / 4])
        }
    });
    let panels = [orig, heatmap, overlay, masked];
    let mut canvas = RgbImage::new(TILE * panels.len() as u32, TILE);
    for (i, p) in panels.iter().enumerate() {
        imageops::replace(&mut canvas, &tile(Some(p), PLAIN_COLOR), i64::from(TILE * i as u32), 0);
    }
    let text = format!(
        "caption: {caption}\nremoved word: {}\nmasked caption: {masked_caption}\npartner: {}\nrelevant patches: {:.1}%\npanels: original | relevance | relevant patches | masked image\n",
        bundle.removed.word,
        bundle.partner_index,
        100.0 * bundle.masks.relevant_fraction(),
    );
    save(&canvas, out, &text)?;
    Ok((canvas.width(), canvas.height()))
}
