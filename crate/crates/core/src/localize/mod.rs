//! Detect-then-track localization: score sampled frames, pick the most
//! recent peak and grow a response track around it.

pub mod peak;
pub mod tracker;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use peak::{most_recent_peak, PeakConfig};
pub use tracker::{track_bidirectional, TrackerConfig};

use crate::dataset::TrackJson;
use crate::error::{Error, Result};
use crate::features::{propose, FeatureCache, FeatureVector, ProposalConfig, ProposalMode};
use crate::geometry::iou;
use crate::heads::{embed_title, Head};
use crate::types::{AnnotationRecord, Detection, ResponseTrack, ScoreTimeline, VideoClip, VisualQuery};

/// Ranked detections of one frame.
pub trait Detector {
    /// Detections sorted by decreasing confidence (ties keep proposal order).
    fn detect(&self, clip: &VideoClip, frame: usize) -> Result<Vec<Detection>>;
}

fn ranked(mut dets: Vec<Detection>) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    dets
}

/// Scores every heuristic proposal by its IoU with the ground-truth box of
/// the frame (0 outside the track).
pub struct OracleDetector<'a> {
    pub gt: &'a ResponseTrack,
    pub proposals: ProposalConfig,
}

impl Detector for OracleDetector<'_> {
    fn detect(&self, clip: &VideoClip, frame: usize) -> Result<Vec<Detection>> {
        let img = &clip
            .frames
            .get(frame)
            .ok_or_else(|| Error::data(format!("video {}: no frame {frame}", clip.video_id)))?
            .image;
        let props = propose::<ChaCha8Rng>(img, ProposalMode::Heuristic, &self.proposals);
        let gt = self.gt.box_at(frame);
        props
            .iter()
            .map(|p| Detection::new(p.bbox, gt.map_or(0.0, |g| iou(&p.bbox, g))))
            .collect::<Result<Vec<_>>>()
            .map(ranked)
    }
}

/// A trained head applied to one query.
pub struct HeadDetector<'a> {
    pub head: &'a Head,
    pub cache: &'a FeatureCache,
    pub query: Arc<FeatureVector>,
    pub title: Option<FeatureVector>,
}

/// Title embedding fed to text-fusion heads; queries without a title use
/// the zero vector.
pub fn title_feature(head: &Head, title: Option<&str>) -> Result<Option<FeatureVector>> {
    if !head.config().use_text {
        return Ok(None);
    }
    match title {
        Some(t) => embed_title(t, head.feature_dim()).map(Some),
        None => Ok(Some(FeatureVector(vec![0.0; head.feature_dim()]))),
    }
}

impl<'a> HeadDetector<'a> {
    pub fn new(head: &'a Head, cache: &'a FeatureCache, key: &str, query: &VisualQuery) -> Result<Self> {
        let feature = cache.query(key, &query.crop)?;
        if feature.len() != head.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "query feature",
                expected: head.feature_dim(),
                actual: feature.len(),
            });
        }
        Ok(Self {
            head,
            cache,
            query: feature,
            title: title_feature(head, query.title.as_deref())?,
        })
    }

    pub fn for_record(head: &'a Head, cache: &'a FeatureCache, record: &AnnotationRecord) -> Result<Self> {
        Self::new(head, cache, &record.key().to_string(), &record.query)
    }
}

impl Detector for HeadDetector<'_> {
    fn detect(&self, clip: &VideoClip, frame: usize) -> Result<Vec<Detection>> {
        let cached = self.cache.frame(clip, frame)?;
        let out = self.head.score(&self.query, self.title.as_ref(), &cached.set)?;
        let (w, h) = clip.resolution();
        out.boxes(&cached.set)
            .iter()
            .zip(&cached.set.proposals)
            .zip(&out.scores)
            .map(|((b, p), s)| Detection::new(b.clip_to(w as f64, h as f64).unwrap_or(p.bbox), *s))
            .collect::<Result<Vec<_>>>()
            .map(ranked)
    }
}

/// Top detection on every `stride`-th frame before the query frame (frame
/// 0 is always scored).
pub fn score_video(clip: &VideoClip, query_frame: usize, detector: &dyn Detector, stride: usize) -> Result<ScoreTimeline> {
    if stride == 0 {
        return Err(Error::config("detector stride must be positive"));
    }
    if clip.is_empty() {
        return Err(Error::Empty("video clip"));
    }
    let end = query_frame.min(clip.len()).max(1);
    let mut entries = Vec::new();
    for t in (0..end).step_by(stride) {
        if let Some(top) = detector.detect(clip, t)?.first() {
            entries.push((t, *top));
        }
    }
    ScoreTimeline::new(entries)
}

/// Output of the localization pipeline for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub track: ResponseTrack,
    pub peak_frame: usize,
    pub peak: Detection,
    pub timeline: ScoreTimeline,
}

pub fn vq2d_pipeline(
    clip: &VideoClip,
    query_frame: usize,
    detector: &dyn Detector,
    peak_cfg: &PeakConfig,
    tracker_cfg: &TrackerConfig,
) -> Result<Prediction> {
    let stride = peak_cfg.stride_for(clip.fps);
    let timeline = score_video(clip, query_frame, detector, stride)?;
    let (peak_frame, peak) = most_recent_peak(&timeline, peak_cfg)?;
    let limit = query_frame.max(peak_frame + 1);
    let track = track_bidirectional(clip, peak_frame, &peak.bbox, tracker_cfg, limit)?;
    let track = track
        .truncated_before(query_frame.max(1))
        .expect("the peak frame precedes the query frame");
    Ok(Prediction {
        track,
        peak_frame,
        peak,
        timeline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakJson {
    pub frame: usize,
    pub confidence: f64,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video_id: String,
    pub query_index: usize,
    pub response_track: TrackJson,
    pub peak: PeakJson,
    /// `(frame, top score)` pairs.
    pub timeline: Vec<(usize, f64)>,
    /// Top box of every timeline entry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timeline_boxes: Vec<crate::geometry::BBox>,
}

impl PredictionRecord {
    pub fn new(record: &AnnotationRecord, p: &Prediction) -> Self {
        Self {
            video_id: record.video_id.to_string(),
            query_index: record.query_index,
            response_track: TrackJson::from(&p.track),
            peak: PeakJson {
                frame: p.peak_frame,
                confidence: p.peak.confidence,
            },
            timeline: p.timeline.entries().iter().map(|(f, d)| (*f, d.confidence)).collect(),
            timeline_boxes: p.timeline.entries().iter().map(|(_, d)| d.bbox).collect(),
        }
    }

    pub fn track(&self) -> Result<ResponseTrack> {
        ResponseTrack::try_from(&self.response_track)
    }

    /// The stored timeline as typed entries (boxes default to the unit box
    /// when the file has none).
    pub fn score_timeline(&self) -> Result<ScoreTimeline> {
        let unit = crate::geometry::BBox::new(0.0, 0.0, 1.0, 1.0)?;
        let entries = self
            .timeline
            .iter()
            .enumerate()
            .map(|(i, (f, s))| Ok((*f, Detection::new(self.timeline_boxes.get(i).copied().unwrap_or(unit), *s)?)))
            .collect::<Result<Vec<_>>>()?;
        ScoreTimeline::new(entries)
    }
}
