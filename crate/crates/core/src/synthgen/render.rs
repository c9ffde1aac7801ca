//! Shape catalog and frame rasterization.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::types::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Ellipse, Shape::Rectangle, Shape::Triangle, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Ellipse => "ellipse",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
        }
    }

    /// Whether the point `(u, v)` in unit box coordinates belongs to the shape.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - 0.5, v - 0.5);
        let r2 = 4.0 * (dx * dx + dy * dy);
        match self {
            Shape::Rectangle => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
            Shape::Ellipse => r2 <= 1.0,
            Shape::Ring => (0.3..=1.0).contains(&r2),
            Shape::Triangle => (0.0..1.0).contains(&v) && (dx.abs() * 2.0) <= v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Dots];

    /// Whether object-local pixel `(i, j)` uses the darker texture tone.
    pub fn dark(self, i: usize, j: usize) -> bool {
        match self {
            Texture::Solid => false,
            Texture::Stripes => (j / 2) % 2 == 1,
            Texture::Checker => (i / 3 + j / 3) % 2 == 1,
            Texture::Dots => i % 4 == 1 && j % 4 == 1,
        }
    }
}

/// Named bright fills (reals in `[0, 1]`).
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.92, 0.18, 0.16]),
    ("green", [0.20, 0.85, 0.25]),
    ("blue", [0.22, 0.38, 0.96]),
    ("yellow", [0.96, 0.90, 0.20]),
    ("magenta", [0.90, 0.25, 0.85]),
    ("cyan", [0.20, 0.88, 0.92]),
    ("orange", [0.98, 0.58, 0.12]),
    ("white", [0.95, 0.95, 0.95]),
];

/// Texture tone relative to the fill.
pub const TEXTURE_TONE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: usize,
    pub shape: Shape,
    pub color: [f64; 3],
    pub texture: Texture,
    /// `(w, h)` in pixels.
    pub size: (usize, usize),
}

impl ObjectInstance {
    /// Object-local mask, row-major `h × w`.
    pub fn mask(&self) -> Vec<bool> {
        let (w, h) = self.size;
        let mut m = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                m.push(self.shape.contains((i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / h as f64));
            }
        }
        m
    }

    pub fn mask_area(&self) -> usize {
        self.mask().iter().filter(|b| **b).count()
    }

    fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        if self.texture.dark(i, j) {
            self.color.map(|c| c * TEXTURE_TONE)
        } else {
            self.color
        }
    }
}

/// A static world larger than the frame; the camera selects a window.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB background.
    pub background: Vec<[f64; 3]>,
    pub objects: Vec<ObjectInstance>,
    /// World coordinates of each object's top-left corner.
    pub positions: Vec<(i64, i64)>,
}

/// What changes from frame to frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    /// Top-left corner of the camera window in world coordinates.
    pub camera: (i64, i64),
    pub visible: Vec<bool>,
    pub gain: f64,
    pub blur: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: RgbImage,
    /// Tight bounds of each object's visible pixels; `None` when the
    /// object is hidden or less than [`PRESENCE_FRACTION`] of it is in view.
    pub boxes: Vec<Option<BBox>>,
}

/// Minimum visible fraction for an object to count as present.
pub const PRESENCE_FRACTION: f64 = 0.25;

/// Renders a `width × height` window of the world.
pub fn render_frame(world: &World, state: &FrameState, width: usize, height: usize) -> RenderedFrame {
    let (cx, cy) = state.camera;
    let mut px = vec![[0.0; 3]; width * height];
    for y in 0..height {
        for x in 0..width {
            let (wx, wy) = (x as i64 + cx, y as i64 + cy);
            if wx >= 0 && wy >= 0 && (wx as usize) < world.width && (wy as usize) < world.height {
                px[y * width + x] = world.background[wy as usize * world.width + wx as usize];
            }
        }
    }
    let mut boxes = Vec::with_capacity(world.objects.len());
    for ((obj, &(ox, oy)), &vis) in world.objects.iter().zip(&world.positions).zip(&state.visible) {
        if !vis {
            boxes.push(None);
            continue;
        }
        let (w, h) = obj.size;
        let mask = obj.mask();
        let total = mask.iter().filter(|b| **b).count();
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        let mut shown = 0usize;
        for j in 0..h {
            for i in 0..w {
                if !mask[j * w + i] {
                    continue;
                }
                let (fx, fy) = (ox + i as i64 - cx, oy + j as i64 - cy);
                if fx < 0 || fy < 0 || fx >= width as i64 || fy >= height as i64 {
                    continue;
                }
                px[fy as usize * width + fx as usize] = obj.pixel(i, j);
                shown += 1;
                x0 = x0.min(fx);
                y0 = y0.min(fy);
                x1 = x1.max(fx);
                y1 = y1.max(fy);
            }
        }
        let present = total > 0 && shown as f64 >= PRESENCE_FRACTION * total as f64;
        boxes.push(present.then(|| {
            BBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64).expect("non-empty mask")
        }));
    }
    if state.blur {
        px = box_blur(&px, width, height);
    }
    let data: Vec<u8> = px
        .iter()
        .flat_map(|p| p.map(|c| ((c * state.gain).clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    RenderedFrame {
        image: RgbImage::from_raw(width, height, data).expect("buffer matches size"),
        boxes,
    }
}

/// 3×3 mean filter with edge-truncated windows.
fn box_blur(px: &[[f64; 3]], width: usize, height: usize) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; px.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let p = px[yy * width + xx];
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            out[y * width + x] = acc.map(|a| a / n);
        }
    }
    out
}
