//! Score-timeline plot: top-1 confidence per sampled frame, the ground-truth
//! span shaded and the selected peak marked.

use image::{Rgb, RgbImage};
use serde::Serialize;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 240;
const LEFT: u32 = 40;
const RIGHT: u32 = 10;
const TOP: u32 = 10;
const BOTTOM: u32 = 30;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const GT_SHADE: [u8; 3] = [200, 235, 200];
pub const SCORE_LINE: [u8; 3] = [30, 80, 200];
pub const PEAK_LINE: [u8; 3] = [220, 40, 40];
const AXIS: [u8; 3] = [0, 0, 0];
const QUERY_LINE: [u8; 3] = [150, 150, 150];

/// Pixel rectangle of the plotting area, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlotArea {
    pub x0: u32,
    pub x1: u32,
    pub y0: u32,
    pub y1: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanMeta {
    /// First and last frame of the span, inclusive.
    pub start_frame: usize,
    pub end_frame: usize,
    pub x_start: u32,
    pub x_end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerMeta {
    pub frame: usize,
    pub x: u32,
}

/// Coordinates of everything drawn, for auditing the image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotMeta {
    pub query: String,
    pub width: u32,
    pub height: u32,
    pub area: PlotArea,
    /// Frame range of the x axis.
    pub frame_min: usize,
    pub frame_max: usize,
    pub gt_span: SpanMeta,
    pub peak: MarkerMeta,
    pub query_frame: MarkerMeta,
    pub points: usize,
}

pub struct PlotInput<'a> {
    pub query: String,
    pub timeline: &'a [(usize, f64)],
    /// Ground-truth frames, inclusive.
    pub gt_span: (usize, usize),
    pub peak_frame: usize,
    pub query_frame: usize,
}

fn area() -> PlotArea {
    PlotArea {
        x0: LEFT,
        x1: WIDTH - 1 - RIGHT,
        y0: TOP,
        y1: HEIGHT - 1 - BOTTOM,
    }
}

/// Horizontal pixel of `frame` on an axis spanning `[lo, hi]`.
pub fn frame_x(area: &PlotArea, lo: usize, hi: usize, frame: usize) -> u32 {
    let span = (hi - lo).max(1) as f64;
    let t = (frame.clamp(lo, hi) - lo) as f64 / span;
    area.x0 + (t * (area.x1 - area.x0) as f64).round() as u32
}

fn score_y(area: &PlotArea, score: f64) -> u32 {
    let t = score.clamp(0.0, 1.0);
    area.y1 - (t * (area.y1 - area.y0) as f64).round() as u32
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: [u8; 3]) {
    for y in y0..=y1 {
        img.put_pixel(x, y, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (u32, u32), (x1, y1): (u32, u32), c: [u8; 3]) {
    let (mut x, mut y) = (x0 as i64, y0 as i64);
    let (dx, dy) = ((x1 as i64 - x).abs(), -(y1 as i64 - y).abs());
    let (sx, sy) = (if x < x1 as i64 { 1 } else { -1 }, if y < y1 as i64 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        img.put_pixel(x as u32, y as u32, Rgb(c));
        if x == x1 as i64 && y == y1 as i64 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn render(input: &PlotInput<'_>) -> (RgbImage, PlotMeta) {
    let a = area();
    let last = input.timeline.last().map_or(0, |e| e.0);
    let frame_min = 0;
    let frame_max = last.max(input.query_frame).max(input.gt_span.1).max(1);
    let fx = |f: usize| frame_x(&a, frame_min, frame_max, f);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb(BACKGROUND));

    let (gs, ge) = (fx(input.gt_span.0), fx(input.gt_span.1));
    for x in gs..=ge {
        vline(&mut img, x, a.y0, a.y1, GT_SHADE);
    }
    let qx = fx(input.query_frame);
    vline(&mut img, qx, a.y0, a.y1, QUERY_LINE);
    let px = fx(input.peak_frame);
    vline(&mut img, px, a.y0, a.y1, PEAK_LINE);
    line(&mut img, (a.x0, a.y1), (a.x1, a.y1), AXIS);
    line(&mut img, (a.x0, a.y0), (a.x0, a.y1), AXIS);
    let points: Vec<(u32, u32)> = input.timeline.iter().map(|&(f, s)| (fx(f), score_y(&a, s))).collect();
    for w in points.windows(2) {
        line(&mut img, w[0], w[1], SCORE_LINE);
    }
    if let [only] = points.as_slice() {
        img.put_pixel(only.0, only.1, Rgb(SCORE_LINE));
    }

    let meta = PlotMeta {
        query: input.query.clone(),
        width: WIDTH,
        height: HEIGHT,
        area: a,
        frame_min,
        frame_max,
        gt_span: SpanMeta {
            start_frame: input.gt_span.0,
            end_frame: input.gt_span.1,
            x_start: gs,
            x_end: ge,
        },
        peak: MarkerMeta {
            frame: input.peak_frame,
            x: px,
        },
        query_frame: MarkerMeta {
            frame: input.query_frame,
            x: qx,
        },
        points: points.len(),
    };
    (img, meta)
}
