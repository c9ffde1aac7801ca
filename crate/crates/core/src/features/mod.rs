//! Shared backbone, box proposals and region features.

mod backbone;
pub mod proposals;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig, FeatureMap};
pub use proposals::{propose, ProposalConfig, ProposalMode};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::types::{RgbImage, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
}

/// Candidate boxes of one frame with their pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub frame: usize,
    pub proposals: Vec<Proposal>,
    pub features: Vec<FeatureVector>,
}

impl ProposalSet {
    pub fn new(frame: usize, proposals: Vec<Proposal>, features: Vec<FeatureVector>) -> Result<Self> {
        if proposals.is_empty() {
            return Err(Error::Empty("proposal set"));
        }
        if proposals.len() != features.len() {
            return Err(Error::DimensionMismatch {
                context: "proposal features",
                expected: proposals.len(),
                actual: features.len(),
            });
        }
        Ok(Self {
            frame,
            proposals,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    /// Row-major `[N, C]` feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.features.iter().flat_map(|f| f.0.iter().copied()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, FeatureVector::len)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub backbone: BackboneConfig,
    pub proposals: ProposalConfig,
}

/// Backbone plus heuristic proposals: everything needed to turn a frame
/// into a [`ProposalSet`].
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    backbone: Backbone,
    proposals: ProposalConfig,
}

/// Number of spare background boxes kept per cached frame.
pub const PAD_BOXES: usize = 6;

impl FeatureExtractor {
    pub fn new(config: &FeatureConfig) -> Self {
        Self {
            backbone: Backbone::new(config.backbone.clone()),
            proposals: config.proposals.clone(),
        }
    }

    pub fn from_backbone(backbone: Backbone, proposals: ProposalConfig) -> Self {
        Self { backbone, proposals }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn proposal_config(&self) -> &ProposalConfig {
        &self.proposals
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Heuristic proposals of a frame with their pooled features.
    pub fn proposal_set(&self, img: &RgbImage, frame: usize) -> Result<ProposalSet> {
        let props = propose::<ChaCha8Rng>(img, ProposalMode::Heuristic, &self.proposals);
        let map = self.backbone.feature_map(img)?;
        let feats = self.backbone.pool(&map, &props.iter().map(|p| p.bbox).collect::<Vec<_>>())?;
        ProposalSet::new(frame, props, feats)
    }

    /// Features of arbitrary boxes of a frame.
    pub fn pool_boxes(&self, img: &RgbImage, boxes: &[BBox]) -> Result<Vec<FeatureVector>> {
        let map = self.backbone.feature_map(img)?;
        self.backbone.pool(&map, boxes)
    }

    pub fn embed_crop(&self, crop: &RgbImage) -> Result<FeatureVector> {
        self.backbone.embed_image(crop)
    }

    fn cached_frame(&self, clip: &VideoClip, frame: usize) -> Result<CachedFrame> {
        let img = &clip
            .frames
            .get(frame)
            .ok_or_else(|| Error::data(format!("video {}: no frame {frame}", clip.video_id)))?
            .image;
        let props = propose::<ChaCha8Rng>(img, ProposalMode::Heuristic, &self.proposals);
        let (w, h) = (img.width() as f64, img.height() as f64);
        let side = w.min(h) / 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(&clip.video_id, frame));
        let mut pads: Vec<BBox> = [(0.0, 0.0), (w - side, 0.0), (0.0, h - side), (w - side, h - side)]
            .iter()
            .map(|&(x, y)| BBox::new(x, y, side, side).expect("positive side"))
            .collect();
        while pads.len() < PAD_BOXES {
            pads.push(proposals::random_box(&mut rng, w, h, side / 2.0, side * 1.5));
        }
        let mut boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        boxes.extend(&pads);
        let map = self.backbone.feature_map(img)?;
        let mut feats = self.backbone.pool(&map, &boxes)?;
        let pad_feats = feats.split_off(props.len());
        Ok(CachedFrame {
            set: ProposalSet::new(frame, props, feats)?,
            pads: pads.into_iter().zip(pad_feats).collect(),
        })
    }
}

/// Seed for per-frame randomness that does not depend on evaluation order.
pub fn frame_seed(video_id: &str, frame: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    crate::seed::splitmix64(h ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Proposals of one frame plus spare background boxes (used to pad
/// proposal sets that would otherwise be empty).
#[derive(Debug, Clone, PartialEq)]
pub struct CachedFrame {
    pub set: ProposalSet,
    pub pads: Vec<(BBox, FeatureVector)>,
}

/// Memoized frame and query features. Entries are pure functions of the
/// extractor and the inputs, so the cache never changes results.
#[derive(Debug)]
pub struct FeatureCache {
    extractor: FeatureExtractor,
    frames: Mutex<HashMap<(Arc<str>, usize), Arc<CachedFrame>>>,
    queries: Mutex<HashMap<String, Arc<FeatureVector>>>,
}

impl FeatureCache {
    pub fn new(extractor: FeatureExtractor) -> Self {
        Self {
            extractor,
            frames: Mutex::default(),
            queries: Mutex::default(),
        }
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn frame(&self, clip: &VideoClip, frame: usize) -> Result<Arc<CachedFrame>> {
        let key = (clip.video_id.clone(), frame);
        if let Some(hit) = self.frames.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let entry = Arc::new(self.extractor.cached_frame(clip, frame)?);
        self.frames.lock().expect("cache lock").insert(key, entry.clone());
        Ok(entry)
    }

    /// Feature of a query crop, memoized under `key`.
    pub fn query(&self, key: &str, crop: &RgbImage) -> Result<Arc<FeatureVector>> {
        if let Some(hit) = self.queries.lock().expect("cache lock").get(key) {
            return Ok(hit.clone());
        }
        let entry = Arc::new(self.extractor.embed_crop(crop)?);
        self.queries.lock().expect("cache lock").insert(key.to_string(), entry.clone());
        Ok(entry)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.lock().expect("cache lock").len()
    }
}
