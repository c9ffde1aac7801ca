//! On-disk dataset layout.
//!
//! ```text
//! <root>/videos/<video_id>/frames/000000.png ...
//! <root>/annotations.json
//! <root>/spec.json            (optional, written by the generator)
//! ```
//!
//! `annotations.json` is a list of records
//! `{video_id, fps, query: {frame_idx, crop_frame?, box, title?}, response_track: {start, boxes}}`.
//! Boxes are `[x, y, w, h]` in pixels with `(x, y)` the top-left corner. The
//! query crop is cut from frame `crop_frame` (default: `frame_idx`) at `box`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::types::{AnnotationRecord, CropSource, Frame, ResponseTrack, RgbImage, VideoClip, VisualQuery};

/// Frame rate assumed for videos that have no annotation record and no
/// `spec.json` next to them.
pub const DEFAULT_FPS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryJson {
    pub frame_idx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_frame: Option<usize>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackJson {
    pub start: usize,
    pub boxes: Vec<BBox>,
}

impl From<&ResponseTrack> for TrackJson {
    fn from(t: &ResponseTrack) -> Self {
        Self {
            start: t.start,
            boxes: t.boxes.clone(),
        }
    }
}

impl TryFrom<&TrackJson> for ResponseTrack {
    type Error = Error;

    fn try_from(t: &TrackJson) -> Result<Self> {
        ResponseTrack::new(t.start, t.boxes.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationJson {
    pub video_id: String,
    pub fps: f64,
    pub query: QueryJson,
    pub response_track: TrackJson,
    /// Only present in generated pseudo-pair files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub clip: VideoClip,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<VideoEntry>,
}

impl Dataset {
    pub fn records(&self) -> impl Iterator<Item = (&VideoClip, &AnnotationRecord)> {
        self.entries
            .iter()
            .flat_map(|e| e.records.iter().map(move |r| (&e.clip, r)))
    }

    pub fn num_records(&self) -> usize {
        self.entries.iter().map(|e| e.records.len()).sum()
    }

    pub fn clip(&self, video_id: &str) -> Option<&VideoClip> {
        self.entries
            .iter()
            .find(|e| &*e.clip.video_id == video_id)
            .map(|e| &e.clip)
    }

    /// Deterministic train/test split: the last `test_fraction` of videos
    /// (in id order) form the test split.
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let n = self.entries.len();
        let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let cut = n - n_test.min(n);
        (
            Dataset {
                entries: self.entries[..cut].to_vec(),
            },
            Dataset {
                entries: self.entries[cut..].to_vec(),
            },
        )
    }

    /// Annotation documents in file order.
    pub fn annotation_json(&self) -> Vec<AnnotationJson> {
        self.records()
            .map(|(clip, r)| record_to_json(clip.fps, r))
            .collect()
    }
}

pub fn record_to_json(fps: f64, r: &AnnotationRecord) -> AnnotationJson {
    let (crop_frame, bbox) = match r.query.source {
        Some(src) => (Some(src.frame), src.bbox),
        None => (
            None,
            BBox::new(0.0, 0.0, r.query.crop.width() as f64, r.query.crop.height() as f64)
                .expect("crop is non-empty"),
        ),
    };
    AnnotationJson {
        video_id: r.video_id.to_string(),
        fps,
        query: QueryJson {
            frame_idx: r.query.query_frame,
            crop_frame,
            bbox,
            title: r.query.title.clone(),
        },
        response_track: TrackJson::from(&r.gt_track),
        provenance: None,
    }
}

pub fn frame_path(root: &Path, video_id: &str, index: usize) -> PathBuf {
    root.join("videos")
        .join(video_id)
        .join("frames")
        .join(format!("{index:06}.png"))
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        img.raw(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_raw(w as usize, h as usize, img.into_raw())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes the dataset in the standard layout under `root`.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    for entry in &dataset.entries {
        let dir = root.join("videos").join(&*entry.clip.video_id).join("frames");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for frame in &entry.clip.frames {
            write_png(&frame_path(root, &entry.clip.video_id, frame.index), &frame.image)?;
        }
    }
    write_json(&root.join("annotations.json"), &dataset.annotation_json())
}

fn list_frames(dir: &Path, video_id: &str) -> Result<Vec<PathBuf>> {
    let mut indices = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|s| s.to_str()) != Some("png") {
            continue;
        }
        let idx = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::data(format!("video {video_id}: unexpected frame file {}", path.display())))?;
        indices.push((idx, path));
    }
    indices.sort();
    for (pos, (idx, _)) in indices.iter().enumerate() {
        if *idx != pos {
            return Err(Error::data(format!(
                "video {video_id}: missing frame {pos:06}.png (next present frame is {idx:06}.png)"
            )));
        }
    }
    Ok(indices.into_iter().map(|(_, p)| p).collect())
}

fn load_clip(root: &Path, video_id: &str, fps: f64) -> Result<VideoClip> {
    let dir = root.join("videos").join(video_id).join("frames");
    let id: Arc<str> = video_id.into();
    let frames = list_frames(&dir, video_id)?
        .iter()
        .enumerate()
        .map(|(index, p)| {
            Ok(Frame {
                video_id: id.clone(),
                index,
                image: read_png(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::data(format!("video {video_id}: no frames")));
    }
    VideoClip::new(id, frames, fps)
}

/// Checks a parsed record against its clip and builds the in-memory record.
pub fn build_record(clip: &VideoClip, query_index: usize, raw: &AnnotationJson) -> Result<AnnotationRecord> {
    let name = format!("record {}:{query_index}", raw.video_id);
    let len = clip.len();
    let q = &raw.query;
    if q.frame_idx >= len {
        return Err(Error::data(format!(
            "{name}: query frame {} outside clip of {len} frames",
            q.frame_idx
        )));
    }
    let crop_frame = q.crop_frame.unwrap_or(q.frame_idx);
    if crop_frame >= len {
        return Err(Error::data(format!("{name}: crop frame {crop_frame} outside clip of {len} frames")));
    }
    let track = ResponseTrack::try_from(&raw.response_track)
        .map_err(|e| Error::data(format!("{name}: {e}")))?;
    if track.end() > len {
        return Err(Error::data(format!(
            "{name}: response track covers frames {}..{} but the clip has {len} frames",
            track.start,
            track.end()
        )));
    }
    if track.end() > q.frame_idx {
        return Err(Error::data(format!(
            "{name}: response track ends at frame {} which is not before query frame {}",
            track.last_frame(),
            q.frame_idx
        )));
    }
    let (w, h) = clip.resolution();
    for (i, b) in track.boxes.iter().enumerate() {
        if b.clip_to(w as f64, h as f64).is_none() {
            return Err(Error::data(format!(
                "{name}: box of frame {} lies outside the frame",
                track.start + i
            )));
        }
    }
    let crop = clip.frames[crop_frame]
        .image
        .crop(&q.bbox)
        .ok_or_else(|| Error::data(format!("{name}: query box lies outside crop frame {crop_frame}")))?;
    if let Some(title) = &q.title {
        if title.trim().is_empty() {
            return Err(Error::data(format!("{name}: empty query title")));
        }
    }
    Ok(AnnotationRecord {
        video_id: clip.video_id.clone(),
        query_index,
        query: VisualQuery {
            crop,
            title: q.title.clone(),
            query_frame: q.frame_idx,
            source: Some(CropSource {
                frame: crop_frame,
                bbox: q.bbox,
            }),
        },
        gt_track: track,
    })
}

#[derive(Deserialize)]
struct SpecFps {
    fps: Option<f64>,
}

/// Loads every video under `root/videos` and validates each annotation
/// against its clip. Entries are ordered by video id; records keep their
/// file order within a video.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let raw: Vec<AnnotationJson> = read_json(&root.join("annotations.json"))?;
    let spec_path = root.join("spec.json");
    let default_fps = if spec_path.exists() {
        read_json::<SpecFps>(&spec_path)?.fps.unwrap_or(DEFAULT_FPS)
    } else {
        DEFAULT_FPS
    };

    let videos_dir = root.join("videos");
    let mut video_ids = Vec::new();
    if videos_dir.exists() {
        for item in fs::read_dir(&videos_dir).map_err(|e| Error::io(&videos_dir, e))? {
            let item = item.map_err(|e| Error::io(&videos_dir, e))?;
            if item.path().is_dir() {
                video_ids.push(item.file_name().to_string_lossy().into_owned());
            }
        }
    }
    video_ids.sort();

    let mut by_video: BTreeMap<&str, Vec<&AnnotationJson>> = BTreeMap::new();
    for r in &raw {
        if video_ids.binary_search(&r.video_id).is_err() {
            return Err(Error::data(format!(
                "annotation references unknown video {:?}",
                r.video_id
            )));
        }
        by_video.entry(&r.video_id).or_default().push(r);
    }

    let mut entries = Vec::with_capacity(video_ids.len());
    for id in &video_ids {
        let recs = by_video.remove(id.as_str()).unwrap_or_default();
        let fps = match recs.first() {
            Some(r) => r.fps,
            None => default_fps,
        };
        if let Some(bad) = recs.iter().find(|r| r.fps != fps) {
            return Err(Error::data(format!(
                "video {id}: inconsistent fps {} vs {fps}",
                bad.fps
            )));
        }
        let clip = load_clip(root, id, fps)?;
        let records = recs
            .iter()
            .enumerate()
            .map(|(i, r)| build_record(&clip, i, r))
            .collect::<Result<Vec<_>>>()?;
        entries.push(VideoEntry { clip, records });
    }
    Ok(Dataset { entries })
}

/// SHA-256 over the annotation records and every frame's pixels, in video
/// order. Identical for a generated dataset and its saved-and-loaded copy.
pub fn dataset_hash(dataset: &Dataset) -> String {
    let mut hasher = Sha256::new();
    let annotations = serde_json::to_vec(&dataset.annotation_json()).expect("annotations serialize");
    hasher.update((annotations.len() as u64).to_le_bytes());
    hasher.update(&annotations);
    for entry in &dataset.entries {
        let clip = &entry.clip;
        hasher.update((clip.video_id.len() as u64).to_le_bytes());
        hasher.update(clip.video_id.as_bytes());
        hasher.update(clip.fps.to_le_bytes());
        for frame in &clip.frames {
            hasher.update((frame.image.width() as u64).to_le_bytes());
            hasher.update((frame.image.height() as u64).to_le_bytes());
            hasher.update(frame.image.raw());
        }
    }
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
