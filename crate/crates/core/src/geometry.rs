//! Axis-aligned boxes and the overlap measures built on them.
//!
//! Boxes are corner encoded: `(x, y)` is the top-left corner and the box
//! covers the half-open extent `[x, x + w) × [y, y + h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ResponseTrack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from corners `(x0, y0)`–`(x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w / self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection with the image rectangle `[0, width) × [0, height)`;
    /// `None` when nothing is left.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        BBox::from_corners(x0, y0, x1, y1).ok()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 1D IoU of the half-open frame spans `[start, end)` of two tracks.
pub fn temporal_iou(p: &ResponseTrack, g: &ResponseTrack) -> f64 {
    let inter = p.end().min(g.end()).saturating_sub(p.start.max(g.start));
    if inter == 0 {
        return 0.0;
    }
    let union = p.len() + g.len() - inter;
    inter as f64 / union as f64
}

/// Spatiotemporal IoU: per-frame intersection areas summed over the temporal
/// union, divided by the summed per-frame union areas. A frame covered by
/// only one track contributes that track's box area to the denominator.
pub fn tube_iou(p: &ResponseTrack, g: &ResponseTrack) -> f64 {
    let first = p.start.min(g.start);
    let last = p.end().max(g.end());
    let mut inter_sum = 0.0;
    let mut union_sum = 0.0;
    for frame in first..last {
        match (p.box_at(frame), g.box_at(frame)) {
            (Some(a), Some(b)) => {
                let inter = a.intersection_area(b);
                inter_sum += inter;
                union_sum += a.area() + b.area() - inter;
            }
            (Some(a), None) => union_sum += a.area(),
            (None, Some(b)) => union_sum += b.area(),
            (None, None) => {}
        }
    }
    if inter_sum == 0.0 {
        return 0.0;
    }
    (inter_sum / union_sum).clamp(0.0, 1.0)
}
