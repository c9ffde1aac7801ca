//! Shared domain types: frames, clips, queries, tracks and annotations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// 8-bit interleaved RGB raster. Pixel values are exposed as reals in
/// `[0, 1]`; storage stays 8-bit so that in-memory frames are exactly what a
/// PNG round trip produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                context: "RgbImage::from_raw",
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Quantizes reals in `[0, 1]` (interleaved RGB, row-major).
    pub fn from_reals(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                context: "RgbImage::from_reals",
                expected: width * height * 3,
                actual: values.len(),
            });
        }
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    pub fn get_u8(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set_u8(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major `[3, H, W]` reals, the layout the backbone consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    /// Copies the integer-aligned region covered by `b` (rounded outward,
    /// clipped to the image). `None` when the clipped region is empty.
    pub fn crop(&self, b: &BBox) -> Option<RgbImage> {
        let x0 = b.x.floor().max(0.0) as usize;
        let y0 = b.y.floor().max(0.0) as usize;
        let x1 = (b.right().ceil().max(0.0) as usize).min(self.width);
        let y1 = (b.bottom().ceil().max(0.0) as usize).min(self.height);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y1 {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Some(RgbImage {
            width: w,
            height: h,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::config(format!(
                "detection confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self { bbox, confidence })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub video_id: Arc<str>,
    pub index: usize,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub video_id: Arc<str>,
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl VideoClip {
    /// Validates that frame indices run 0, 1, 2, … and that every frame
    /// shares the resolution of the first.
    pub fn new(video_id: impl Into<Arc<str>>, frames: Vec<Frame>, fps: f64) -> Result<Self> {
        let video_id = video_id.into();
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::data(format!("video {video_id}: fps must be positive")));
        }
        if let Some(first) = frames.first() {
            let (w, h) = (first.image.width(), first.image.height());
            for (i, f) in frames.iter().enumerate() {
                if f.index != i {
                    return Err(Error::data(format!(
                        "video {video_id}: frame at position {i} has index {}",
                        f.index
                    )));
                }
                if f.image.width() != w || f.image.height() != h {
                    return Err(Error::data(format!(
                        "video {video_id}: frame {i} is {}x{}, expected {w}x{h}",
                        f.image.width(),
                        f.image.height()
                    )));
                }
            }
        }
        Ok(Self {
            video_id,
            frames,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the clip's frames.
    pub fn resolution(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.image.width(), f.image.height()))
            .unwrap_or((0, 0))
    }
}

/// Where a query crop was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSource {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualQuery {
    pub crop: RgbImage,
    pub title: Option<String>,
    pub query_frame: usize,
    pub source: Option<CropSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTrack {
    pub start: usize,
    pub boxes: Vec<BBox>,
}

impl ResponseTrack {
    pub fn new(start: usize, boxes: Vec<BBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Empty("response track boxes"));
        }
        Ok(Self { start, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// One past the last covered frame.
    pub fn end(&self) -> usize {
        self.start + self.boxes.len()
    }

    pub fn last_frame(&self) -> usize {
        self.end() - 1
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.end()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        if self.contains(frame) {
            self.boxes.get(frame - self.start)
        } else {
            None
        }
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }

    /// Keeps only frames strictly before `frame`; `None` if nothing remains.
    pub fn truncated_before(&self, frame: usize) -> Option<ResponseTrack> {
        if frame <= self.start {
            return None;
        }
        let keep = (frame - self.start).min(self.len());
        Some(ResponseTrack {
            start: self.start,
            boxes: self.boxes[..keep].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub video_id: Arc<str>,
    /// Position of this record among the records of its video.
    pub query_index: usize,
    pub query: VisualQuery,
    pub gt_track: ResponseTrack,
}

impl AnnotationRecord {
    /// The record's identity across prediction and annotation files.
    pub fn key(&self) -> QueryKey {
        QueryKey {
            video_id: self.video_id.to_string(),
            query_index: self.query_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryKey {
    pub video_id: String,
    pub query_index: usize,
}

impl std::fmt::Display for QueryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.video_id, self.query_index)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTimeline {
    entries: Vec<(usize, Detection)>,
}

impl ScoreTimeline {
    pub fn new(entries: Vec<(usize, Detection)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::data("score timeline frame indices must strictly increase"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, Detection)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, d)| d.confidence).collect()
    }
}
