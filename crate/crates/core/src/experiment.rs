//! End-to-end recipe: generate a benchmark, split it, train a head, run the
//! localization pipeline on the test split and score everything.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_hash, Dataset};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureConfig, FeatureExtractor};
use crate::heads::{Head, Variant};
use crate::localize::{vq2d_pipeline, Detector, HeadDetector, PeakConfig, PredictionRecord, TrackerConfig};
use crate::metrics::{
    coco_thresholds, detection_ap, fp_rate_on_negatives, join_by_key, DetEvalResult, FrameEval, NegativeTimeline,
    QueryEval, ScoredTrack, Vq2dConfig, Vq2dEvalResult, vq2d_metrics,
};
use crate::sampling::{pufs_dataset, TrainingPair};
use crate::synthgen::{generate_dataset, SceneSpec};
use crate::types::{Detection, QueryKey};
use crate::train::{fit, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vq2d: Vq2dConfig,
    /// Score at which a negative frame counts as a false positive.
    pub fp_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            vq2d: Vq2dConfig::default(),
            fp_tau: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synthgen: SceneSpec,
    /// Fraction of videos (the last ones in id order) held out for testing.
    pub test_fraction: f64,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub peak: PeakConfig,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthgen: SceneSpec::default(),
            test_fraction: 0.3,
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            peak: PeakConfig::default(),
            tracker: TrackerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthgen.validate()?;
        self.train.validate()?;
        self.peak.validate()?;
        self.tracker.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        Ok(())
    }
}

/// Ranked detections of one annotated frame, as stored in a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub query_index: usize,
    pub frame: usize,
    pub detections: Vec<Detection>,
}

/// Head detections on every annotated frame of every record.
pub fn detect_annotated(head: &Head, cache: &FeatureCache, dataset: &Dataset) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (clip, record) in dataset.records() {
        let detector = HeadDetector::for_record(head, cache, record)?;
        for frame in record.gt_track.frames() {
            out.push(DetectionRecord {
                video_id: record.video_id.to_string(),
                query_index: record.query_index,
                frame,
                detections: detector.detect(clip, frame)?,
            });
        }
    }
    Ok(out)
}

/// Pairs detection records with the annotated frames of `dataset`. Frames
/// without a record count as frames without detections; records for
/// frames that are not annotated are rejected.
pub fn detection_frames(records: &[DetectionRecord], dataset: &Dataset) -> Result<Vec<FrameEval>> {
    let mut by_frame = BTreeMap::new();
    for r in records {
        let key = (r.video_id.as_str(), r.query_index, r.frame);
        if by_frame.insert(key, r).is_some() {
            return Err(Error::data(format!("duplicate detections for {}:{} frame {}", key.0, key.1, key.2)));
        }
    }
    let mut out = Vec::new();
    for (_, record) in dataset.records() {
        for (frame, gt) in record.gt_track.frames().zip(&record.gt_track.boxes) {
            let mut detections = by_frame
                .remove(&(&*record.video_id, record.query_index, frame))
                .map(|r| r.detections.clone())
                .unwrap_or_default();
            detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            out.push(FrameEval { detections, gt: *gt });
        }
    }
    if let Some((v, q, f)) = by_frame.keys().next() {
        return Err(Error::data(format!("detections for {v}:{q} frame {f}, which is not an annotated frame")));
    }
    Ok(out)
}

/// Runs the localization pipeline for every record of `dataset`.
pub fn predict(
    head: &Head,
    cache: &FeatureCache,
    dataset: &Dataset,
    peak: &PeakConfig,
    tracker: &TrackerConfig,
) -> Result<Vec<PredictionRecord>> {
    dataset
        .records()
        .map(|(clip, record)| {
            let detector = HeadDetector::for_record(head, cache, record)?;
            let p = vq2d_pipeline(clip, record.query.query_frame, &detector, peak, tracker)?;
            Ok(PredictionRecord::new(record, &p))
        })
        .collect()
}

/// Track-level metrics and the negative-frame false-positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vq2dReport {
    #[serde(flatten)]
    pub metrics: Vq2dEvalResult,
    pub fp_rate_on_negatives: f64,
}

/// Scores prediction records against the annotations of `dataset`; the
/// two must cover exactly the same queries.
pub fn evaluate_predictions(preds: &[PredictionRecord], dataset: &Dataset, cfg: &EvalConfig) -> Result<Vq2dReport> {
    let keyed_preds = preds
        .iter()
        .map(|p| {
            let key = QueryKey {
                video_id: p.video_id.clone(),
                query_index: p.query_index,
            };
            (key, p)
        })
        .collect();
    let keyed_gts = dataset.records().map(|(_, r)| (r.key(), r)).collect();
    let joined = join_by_key(keyed_preds, keyed_gts)?;
    let mut queries = Vec::with_capacity(joined.len());
    for (_, p, r) in &joined {
        queries.push(QueryEval {
            prediction: Some(ScoredTrack {
                track: p.track()?,
                confidence: p.peak.confidence,
            }),
            gt: r.gt_track.clone(),
        });
    }
    let timelines: Vec<NegativeTimeline<'_>> = joined
        .iter()
        .map(|(_, p, r)| NegativeTimeline {
            timeline: &p.timeline,
            gt: &r.gt_track,
            query_frame: r.query.query_frame,
        })
        .collect();
    Ok(Vq2dReport {
        metrics: vq2d_metrics(&queries, &cfg.vq2d)?,
        fp_rate_on_negatives: fp_rate_on_negatives(&timelines, cfg.fp_tau),
    })
}

/// Contents of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub detection: DetEvalResult,
    pub vq2d: Vq2dReport,
    pub train_steps: usize,
    /// Mean batch loss over the last tenth of training.
    pub final_loss: Option<f64>,
    pub pufs_pairs: usize,
    pub dataset_hash: String,
    pub config_echo: ExperimentConfig,
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Results,
    pub outcome: TrainOutcome,
    pub predictions: Vec<PredictionRecord>,
}

/// A generated benchmark, split, with a shared feature cache.
pub struct Benchmark {
    pub dataset: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub cache: FeatureCache,
    pub hash: String,
}

impl Benchmark {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = generate_dataset(&cfg.synthgen)?;
        Ok(Self::from_dataset(dataset, cfg))
    }

    pub fn from_dataset(dataset: Dataset, cfg: &ExperimentConfig) -> Self {
        let (train, test) = dataset.split(cfg.test_fraction);
        Self {
            hash: dataset_hash(&dataset),
            dataset,
            train,
            test,
            cache: FeatureCache::new(FeatureExtractor::new(&cfg.features)),
        }
    }

    /// P-UFS pairs mined from the training split (empty when disabled).
    pub fn pufs_pairs(&self, cfg: &ExperimentConfig) -> Result<Vec<TrainingPair>> {
        if !cfg.train.sampler.pufs_enabled {
            return Ok(Vec::new());
        }
        pufs_dataset(&self.train, &cfg.train.effective_sampler(), &cfg.features.proposals)
    }

    /// Trains on the training split and evaluates on the test split. The
    /// feature configuration of `cfg` must be the one the cache was built
    /// with.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunOutput> {
        cfg.validate()?;
        let extractor = self.cache.extractor();
        if extractor.proposal_config() != &cfg.features.proposals || extractor.backbone().config() != &cfg.features.backbone {
            return Err(Error::config("experiment features differ from the benchmark cache"));
        }
        let pufs = self.pufs_pairs(cfg)?;
        let outcome = fit(&self.train, &self.cache, &pufs, &cfg.train, |_| Ok(()))?;
        let detections = detect_annotated(&outcome.head, &self.cache, &self.test)?;
        let detection = detection_ap(&detection_frames(&detections, &self.test)?, &coco_thresholds())?;
        let predictions = predict(&outcome.head, &self.cache, &self.test, &cfg.peak, &cfg.tracker)?;
        let vq2d = evaluate_predictions(&predictions, &self.test, &cfg.eval)?;
        let tail = (outcome.losses.len() / 10).max(1).min(outcome.losses.len());
        let final_loss = (tail > 0)
            .then(|| outcome.losses[outcome.losses.len() - tail..].iter().sum::<f64>() / tail as f64);
        Ok(RunOutput {
            results: Results {
                detection,
                vq2d,
                train_steps: outcome.losses.len(),
                final_loss,
                pufs_pairs: pufs.len(),
                dataset_hash: self.hash.clone(),
                config_echo: cfg.clone(),
            },
            outcome,
            predictions,
        })
    }
}

/// Generates the benchmark of `cfg` and runs it.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    Benchmark::generate(cfg)?.run(cfg)
}

/// Ablation grid: every head variant with the base sampler, then coco_cond
/// under the four BPS / N-UFS on-off combinations. Names are unique.
pub fn ablation_grid(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.train.head.variant = variant;
        out.push((format!("head={variant}"), cfg));
    }
    for (bps, nufs) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut cfg = base.clone();
        cfg.train.head.variant = Variant::CocoCond;
        cfg.train.sampler.bps_enabled = bps;
        cfg.train.sampler.nufs_enabled = nufs;
        let on = |b: bool| if b { "on" } else { "off" };
        out.push((format!("coco_cond bps={} nufs={}", on(bps), on(nufs)), cfg));
    }
    out
}
