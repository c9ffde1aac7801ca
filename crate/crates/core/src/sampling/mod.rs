//! Proposal-set and frame samplers that assemble the training stream:
//! balanced proposal sets (BPS), negative frames after the target leaves
//! (N-UFS) and tracked pseudo-positive pairs (P-UFS).

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationJson, Dataset, QueryJson, TrackJson};
use crate::error::{Error, Result};
use crate::features::{propose, FeatureCache, FeatureVector, Proposal, ProposalConfig, ProposalMode, ProposalSet};
use crate::geometry::{iou, BBox};
use crate::localize::{track_bidirectional, TrackerConfig};
use crate::seed::derive;
use crate::types::{AnnotationRecord, CropSource, ResponseTrack, VideoClip, VisualQuery};

/// IoU at which a proposal counts as covering the ground truth.
pub const POSITIVE_IOU: f64 = 0.5;

/// Seed stream reserved for P-UFS subsampling.
const PUFS_STREAM: u64 = 0x7075_6673;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Annotated,
    Pufs,
    Nufs,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Annotated => "annotated",
            Provenance::Pufs => "pufs",
            Provenance::Nufs => "nufs",
        }
    }
}

/// A visual query paired with one frame of the same video. Positive pairs
/// (annotated, P-UFS) carry the target box; N-UFS pairs never do.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    query: Arc<VisualQuery>,
    query_key: Arc<str>,
    video_id: Arc<str>,
    frame: usize,
    gt_box: Option<BBox>,
    provenance: Provenance,
}

impl TrainingPair {
    pub fn positive(
        query: Arc<VisualQuery>,
        query_key: Arc<str>,
        video_id: Arc<str>,
        frame: usize,
        gt_box: BBox,
        provenance: Provenance,
    ) -> Result<Self> {
        if provenance == Provenance::Nufs {
            return Err(Error::data("N-UFS pairs cannot carry a target box"));
        }
        Ok(Self {
            query,
            query_key,
            video_id,
            frame,
            gt_box: Some(gt_box),
            provenance,
        })
    }

    pub fn negative(query: Arc<VisualQuery>, query_key: Arc<str>, video_id: Arc<str>, frame: usize) -> Self {
        Self {
            query,
            query_key,
            video_id,
            frame,
            gt_box: None,
            provenance: Provenance::Nufs,
        }
    }

    pub fn query(&self) -> &VisualQuery {
        &self.query
    }

    /// Cache key of the query crop.
    pub fn query_key(&self) -> &str {
        &self.query_key
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn gt_box(&self) -> Option<&BBox> {
        self.gt_box.as_ref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub bps_enabled: bool,
    /// Probability that BPS keeps a positive frame's set intact.
    pub bps_positive_prob: f64,
    pub nufs_enabled: bool,
    pub pufs_enabled: bool,
    /// Minimum detector objectness and tracker similarity for P-UFS.
    pub pufs_confidence_threshold: f64,
    /// Detector rate (frames per second of video) for P-UFS.
    pub pufs_fps: f64,
    /// Accepted tracked-box area in pixels, `(min, max)`.
    pub pufs_area_range: (f64, f64),
    /// Accepted tracked-box aspect ratio `w / h`, `(min, max)`.
    pub pufs_aspect_range: (f64, f64),
    /// Pseudo pairs kept per annotated positive pair.
    pub pufs_multiplier: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            bps_enabled: true,
            bps_positive_prob: 0.5,
            nufs_enabled: true,
            pufs_enabled: false,
            pufs_confidence_threshold: 0.5,
            pufs_fps: 1.0,
            pufs_area_range: (48.0, 400.0),
            pufs_aspect_range: (0.4, 2.5),
            pufs_multiplier: 0.43,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !unit(self.bps_positive_prob) {
            return Err(Error::config(format!(
                "sampling.bps_positive_prob must lie in [0, 1], got {}",
                self.bps_positive_prob
            )));
        }
        if !unit(self.pufs_confidence_threshold) {
            return Err(Error::config(format!(
                "sampling.pufs_confidence_threshold must lie in [0, 1], got {}",
                self.pufs_confidence_threshold
            )));
        }
        if !(self.pufs_fps > 0.0 && self.pufs_fps.is_finite()) {
            return Err(Error::config("sampling.pufs_fps must be positive"));
        }
        if !range(self.pufs_area_range) || !range(self.pufs_aspect_range) {
            return Err(Error::config("sampling.pufs_area_range and pufs_aspect_range need 0 < min <= max"));
        }
        if !(self.pufs_multiplier >= 0.0 && self.pufs_multiplier.is_finite()) {
            return Err(Error::config("sampling.pufs_multiplier must be non-negative"));
        }
        Ok(())
    }

    fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            similarity_threshold: self.pufs_confidence_threshold,
            ..TrackerConfig::default()
        }
    }
}

/// Whether any proposal of `set` covers `gt`.
pub fn contains_positive(set: &ProposalSet, gt: &BBox) -> bool {
    set.proposals.iter().any(|p| iou(&p.bbox, gt) >= POSITIVE_IOU)
}

/// Per-proposal labels: covering the ground truth or not.
pub fn labels(set: &ProposalSet, gt: Option<&BBox>) -> Vec<bool> {
    set.proposals
        .iter()
        .map(|p| gt.is_some_and(|g| iou(&p.bbox, g) >= POSITIVE_IOU))
        .collect()
}

/// Balanced proposal set. With probability `p` the set is kept as is;
/// otherwise every proposal covering `gt` is removed. A set emptied this
/// way is refilled with one spare box, drawn uniformly from the spares that
/// do not touch `gt` (or, failing that, from those below the positive IoU).
/// Returns the set and whether it still contains the target.
pub fn bps_sample(
    set: &ProposalSet,
    gt: &BBox,
    p: f64,
    spares: &[(BBox, FeatureVector)],
    rng: &mut impl Rng,
) -> Result<(ProposalSet, bool)> {
    if set.is_empty() {
        return Err(Error::Empty("proposal set"));
    }
    if rng.gen_bool(p.clamp(0.0, 1.0)) {
        return Ok((set.clone(), contains_positive(set, gt)));
    }
    let (mut proposals, mut features) = (Vec::new(), Vec::new());
    for (prop, feat) in set.proposals.iter().zip(&set.features) {
        if iou(&prop.bbox, gt) < POSITIVE_IOU {
            proposals.push(*prop);
            features.push(feat.clone());
        }
    }
    if proposals.is_empty() {
        let disjoint: Vec<_> = spares.iter().filter(|(b, _)| b.intersection_area(gt) == 0.0).collect();
        let pool = if disjoint.is_empty() {
            spares.iter().filter(|(b, _)| iou(b, gt) < POSITIVE_IOU).collect()
        } else {
            disjoint
        };
        let (b, f) = pool
            .choose(rng)
            .ok_or(Error::Empty("spare boxes for an emptied proposal set"))?;
        proposals.push(Proposal {
            bbox: *b,
            objectness: 0.0,
        });
        features.push(f.clone());
    }
    Ok((ProposalSet::new(set.frame, proposals, features)?, false))
}

fn record_query(record: &AnnotationRecord) -> (Arc<VisualQuery>, Arc<str>) {
    (Arc::new(record.query.clone()), Arc::from(record.key().to_string()))
}

/// One positive pair per ground-truth frame of every record.
pub fn annotated_pairs(dataset: &Dataset) -> Vec<TrainingPair> {
    let mut out = Vec::new();
    for (_, record) in dataset.records() {
        let (query, key) = record_query(record);
        for (i, b) in record.gt_track.boxes.iter().enumerate() {
            out.push(TrainingPair {
                query: query.clone(),
                query_key: key.clone(),
                video_id: record.video_id.clone(),
                frame: record.gt_track.start + i,
                gt_box: Some(*b),
                provenance: Provenance::Annotated,
            });
        }
    }
    out
}

/// Negative frames drawn uniformly without replacement from
/// `(last GT frame, query frame]`, as many as there are GT frames (fewer
/// when the interval is shorter). Frames are returned in increasing order.
pub fn nufs_sample(record: &AnnotationRecord, rng: &mut impl Rng) -> Vec<TrainingPair> {
    let first = record.gt_track.end();
    let last = record.query.query_frame;
    if last < first {
        return Vec::new();
    }
    let interval = last - first + 1;
    let count = record.gt_track.len().min(interval);
    let mut frames: Vec<usize> = rand::seq::index::sample(rng, interval, count)
        .into_iter()
        .map(|i| first + i)
        .collect();
    frames.sort_unstable();
    let (query, key) = record_query(record);
    frames
        .into_iter()
        .map(|f| TrainingPair::negative(query.clone(), key.clone(), record.video_id.clone(), f))
        .collect()
}

/// An unlabeled object followed by the tracker: `(frame, box)` views in
/// frame order, after the area/aspect filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PufsInstance {
    pub views: Vec<(usize, BBox)>,
}

impl PufsInstance {
    fn box_at(&self, frame: usize) -> Option<&BBox> {
        self.views.iter().find(|(f, _)| *f == frame).map(|(_, b)| b)
    }
}

/// Detects salient objects every `fps / pufs_fps` frames, tracks each new
/// detection in both directions and keeps the views passing the area and
/// aspect filters. Detections already covered by an earlier instance are
/// skipped; instances overlapping any of `exclude` (annotated tracks) on a
/// shared frame are dropped, as are instances with fewer than two views.
pub fn pufs_instances(
    clip: &VideoClip,
    cfg: &SamplerConfig,
    proposals: &ProposalConfig,
    exclude: &[&ResponseTrack],
) -> Result<Vec<PufsInstance>> {
    cfg.validate()?;
    if clip.len() < 2 {
        return Ok(Vec::new());
    }
    let stride = ((clip.fps / cfg.pufs_fps).round() as usize).max(1);
    let tracker = cfg.tracker();
    let (fw, fh) = clip.resolution();
    let mut tracks: Vec<ResponseTrack> = Vec::new();
    for t in (0..clip.len()).step_by(stride) {
        let dets = propose::<ChaCha8Rng>(&clip.frames[t].image, ProposalMode::Heuristic, proposals);
        for det in dets.iter().filter(|d| d.objectness >= cfg.pufs_confidence_threshold) {
            let covered = tracks
                .iter()
                .any(|tr| tr.box_at(t).is_some_and(|b| iou(b, &det.bbox) >= POSITIVE_IOU));
            if covered || det.bbox.w >= fw as f64 && det.bbox.h >= fh as f64 {
                continue;
            }
            tracks.push(track_bidirectional(clip, t, &det.bbox, &tracker, clip.len())?);
        }
    }
    let (amin, amax) = cfg.pufs_area_range;
    let (rmin, rmax) = cfg.pufs_aspect_range;
    let mut out = Vec::new();
    for tr in tracks {
        let inst = PufsInstance {
            views: tr
                .frames()
                .zip(&tr.boxes)
                .filter(|(_, b)| (amin..=amax).contains(&b.area()) && (rmin..=rmax).contains(&b.aspect_ratio()))
                .map(|(f, b)| (f, *b))
                .collect(),
        };
        let annotated = exclude.iter().any(|gt| {
            gt.frames()
                .any(|f| inst.box_at(f).is_some_and(|b| iou(b, gt.box_at(f).expect("frame in track")) >= POSITIVE_IOU))
        });
        if inst.views.len() >= 2 && !annotated {
            out.push(inst);
        }
    }
    Ok(out)
}

/// Every ordered pair of distinct views of every instance: the first view
/// is cut out as the query crop, the second is the training frame.
pub fn pufs_pairs(clip: &VideoClip, instances: &[PufsInstance]) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (k, inst) in instances.iter().enumerate() {
        for &(cf, cb) in &inst.views {
            let crop = clip.frames[cf]
                .image
                .crop(&cb)
                .ok_or_else(|| Error::data(format!("video {}: tracked box outside frame {cf}", clip.video_id)))?;
            let query = Arc::new(VisualQuery {
                crop,
                title: None,
                query_frame: clip.len() - 1,
                source: Some(CropSource { frame: cf, bbox: cb }),
            });
            let key: Arc<str> = Arc::from(format!("pufs:{}:{k}:{cf}", clip.video_id));
            for &(f, b) in inst.views.iter().filter(|(f, _)| *f != cf) {
                out.push(TrainingPair::positive(
                    query.clone(),
                    key.clone(),
                    clip.video_id.clone(),
                    f,
                    b,
                    Provenance::Pufs,
                )?);
            }
        }
    }
    Ok(out)
}

/// P-UFS pairs of one clip before subsampling.
pub fn pufs_generate(
    clip: &VideoClip,
    cfg: &SamplerConfig,
    proposals: &ProposalConfig,
    exclude: &[&ResponseTrack],
) -> Result<Vec<TrainingPair>> {
    pufs_pairs(clip, &pufs_instances(clip, cfg, proposals, exclude)?)
}

/// P-UFS pairs of a whole dataset, uniformly subsampled (seeded, order
/// preserved) to at most `pufs_multiplier` times the number of annotated
/// positive pairs.
pub fn pufs_dataset(dataset: &Dataset, cfg: &SamplerConfig, proposals: &ProposalConfig) -> Result<Vec<TrainingPair>> {
    let mut all = Vec::new();
    for entry in &dataset.entries {
        let exclude: Vec<&ResponseTrack> = entry.records.iter().map(|r| &r.gt_track).collect();
        all.extend(pufs_generate(&entry.clip, cfg, proposals, &exclude)?);
    }
    let positives: usize = dataset.records().map(|(_, r)| r.gt_track.len()).sum();
    let budget = (cfg.pufs_multiplier * positives as f64).round() as usize;
    if all.len() <= budget {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, PUFS_STREAM));
    let mut keep = rand::seq::index::sample(&mut rng, all.len(), budget).into_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| all[i].clone()).collect())
}

/// Pseudo pairs in the annotation file schema. `frame_idx` is the paired
/// frame, the response track is its single box and `crop_frame`/`box`
/// locate the query crop.
pub fn pufs_to_json(fps_of: impl Fn(&str) -> f64, pairs: &[TrainingPair]) -> Vec<AnnotationJson> {
    pairs
        .iter()
        .map(|p| {
            let src = p.query.source.expect("P-UFS queries record their crop source");
            AnnotationJson {
                video_id: p.video_id.to_string(),
                fps: fps_of(&p.video_id),
                query: QueryJson {
                    frame_idx: p.frame,
                    crop_frame: Some(src.frame),
                    bbox: src.bbox,
                    title: None,
                },
                response_track: TrackJson {
                    start: p.frame,
                    boxes: vec![p.gt_box.expect("P-UFS pairs are positive")],
                },
                provenance: Some(p.provenance.name().to_string()),
            }
        })
        .collect()
}

/// Reads pairs written by [`pufs_to_json`] back against `dataset`.
pub fn pufs_from_json(dataset: &Dataset, records: &[AnnotationJson]) -> Result<Vec<TrainingPair>> {
    let mut crops: HashMap<(String, usize, [u64; 4]), (Arc<VisualQuery>, Arc<str>)> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = format!("pseudo pair {i} ({})", r.video_id);
        if r.provenance.as_deref() != Some("pufs") {
            return Err(Error::data(format!("{name}: provenance must be \"pufs\"")));
        }
        let clip = dataset
            .clip(&r.video_id)
            .ok_or_else(|| Error::data(format!("{name}: unknown video")))?;
        let crop_frame = r.query.crop_frame.unwrap_or(r.query.frame_idx);
        let [b] = r.response_track.boxes.as_slice() else {
            return Err(Error::data(format!("{name}: expected exactly one box")));
        };
        if r.response_track.start != r.query.frame_idx || r.query.frame_idx >= clip.len() || crop_frame >= clip.len() {
            return Err(Error::data(format!("{name}: frame indices outside the clip")));
        }
        let bits = r.query.bbox.to_array().map(f64::to_bits);
        let (query, key) = match crops.get(&(r.video_id.clone(), crop_frame, bits)) {
            Some(hit) => hit.clone(),
            None => {
                let crop = clip.frames[crop_frame]
                    .image
                    .crop(&r.query.bbox)
                    .ok_or_else(|| Error::data(format!("{name}: query box outside frame {crop_frame}")))?;
                let q = Arc::new(VisualQuery {
                    crop,
                    title: None,
                    query_frame: clip.len() - 1,
                    source: Some(CropSource {
                        frame: crop_frame,
                        bbox: r.query.bbox,
                    }),
                });
                let key: Arc<str> = Arc::from(format!("pufs:{}:{}:{crop_frame}", r.video_id, crops.len()));
                crops.insert((r.video_id.clone(), crop_frame, bits), (q.clone(), key.clone()));
                (q, key)
            }
        };
        out.push(TrainingPair::positive(
            query,
            key,
            clip.video_id.clone(),
            r.query.frame_idx,
            *b,
            Provenance::Pufs,
        )?);
    }
    Ok(out)
}

/// One element of the training stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochItem {
    pub pair: TrainingPair,
    pub set: ProposalSet,
    /// Whether the set contains a proposal covering the target.
    pub exists: bool,
    pub labels: Vec<bool>,
}

/// Training stream of one epoch: annotated positives, fresh N-UFS
/// negatives (if enabled) and the given P-UFS pairs (if enabled),
/// shuffled with a seed derived from `(cfg.seed, epoch)`. BPS is applied
/// to every positive frame when enabled.
pub fn build_epoch(
    dataset: &Dataset,
    cache: &FeatureCache,
    cfg: &SamplerConfig,
    pufs: &[TrainingPair],
    epoch: u64,
) -> Result<Vec<EpochItem>> {
    cfg.validate()?;
    if dataset.num_records() == 0 {
        return Err(Error::Empty("training dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, epoch));
    let mut pairs = annotated_pairs(dataset);
    if cfg.nufs_enabled {
        for (_, record) in dataset.records() {
            pairs.extend(nufs_sample(record, &mut rng));
        }
    }
    if cfg.pufs_enabled {
        pairs.extend(pufs.iter().cloned());
    }
    pairs.shuffle(&mut rng);
    let clips: HashMap<&str, &VideoClip> = dataset.entries.iter().map(|e| (&*e.clip.video_id, &e.clip)).collect();
    pairs
        .into_iter()
        .map(|pair| {
            let clip = clips
                .get(pair.video_id())
                .ok_or_else(|| Error::data(format!("training pair refers to unknown video {}", pair.video_id())))?;
            let cached = cache.frame(clip, pair.frame)?;
            let (set, exists) = match pair.gt_box {
                Some(gt) if cfg.bps_enabled => bps_sample(&cached.set, &gt, cfg.bps_positive_prob, &cached.pads, &mut rng)?,
                Some(gt) => (cached.set.clone(), contains_positive(&cached.set, &gt)),
                None => (cached.set.clone(), false),
            };
            let labels = labels(&set, pair.gt_box.as_ref());
            Ok(EpochItem {
                pair,
                set,
                exists,
                labels,
            })
        })
        .collect()
}
