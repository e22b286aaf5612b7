//! Seeded colored-shape images with template captions.
//!
//! Every caption names the shape as its first noun, so masking never skips a
//! synthetic sample.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "ring", "cross"];

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 215, 40]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 60, 180]),
    ("pink", [240, 130, 190]),
    ("white", [245, 245, 245]),
];

const BACKGROUNDS: [(&str, [u8; 3]); 3] = [("black", [15, 15, 15]), ("gray", [120, 120, 120]), ("brown", [110, 70, 40])];

/// Native render size before backbone preprocessing.
pub const RENDER_SIZE: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: usize,
    pub color: usize,
    pub background: usize,
    /// Center in pixels of the native render.
    pub cx: u32,
    pub cy: u32,
    pub radius: u32,
    pub template: usize,
}

impl ShapeSpec {
    /// The `index`-th sample of a seeded stream.
    pub fn sample(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let radius = rng.gen_range(12..24);
        Self {
            shape: rng.gen_range(0..SHAPES.len()),
            color: rng.gen_range(0..COLORS.len()),
            background: rng.gen_range(0..BACKGROUNDS.len()),
            cx: rng.gen_range(radius..RENDER_SIZE - radius),
            cy: rng.gen_range(radius..RENDER_SIZE - radius),
            radius,
            template: rng.gen_range(0..4),
        }
    }

    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn with_color(mut self, color: usize) -> Self {
        self.color = color;
        self
    }

    pub fn caption(&self) -> String {
        let (shape, color, bg) = (self.shape_name(), self.color_name(), BACKGROUNDS[self.background].0);
        let size = if self.radius >= 18 { "large" } else { "small" };
        match self.template {
            0 => format!("a {color} {shape} on a {bg} background"),
            1 => format!("{color} {shape} over a plain {bg} backdrop"),
            2 => format!("the {shape} is {color}"),
            _ => format!("a {size} {color} {shape} in the picture"),
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx as f64, y - self.cy as f64);
        let r = self.radius as f64;
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
            2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
            3 => dx.abs() + dy.abs() <= r,
            4 => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= r && d >= r * 0.55
            }
            _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        }
    }

    pub fn render(&self) -> RgbImage {
        let fg = Rgb(COLORS[self.color].1);
        let bg = Rgb(BACKGROUNDS[self.background].1);
        RgbImage::from_fn(RENDER_SIZE, RENDER_SIZE, |x, y| {
            if self.inside(x as f64 + 0.5, y as f64 + 0.5) {
                fg
            } else {
                bg
            }
        })
    }
}
