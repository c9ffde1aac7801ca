use std::collections::BTreeSet;

use vqlab::dataset::TrackJson;
use vqlab::experiment::{
    ablation_grid, detection_frames, evaluate_predictions, Benchmark, DetectionRecord, EvalConfig, ExperimentConfig,
};
use vqlab::heads::Variant;
use vqlab::localize::{PeakJson, PredictionRecord};
use vqlab::synthgen::{generate_dataset, SceneSpec};
use vqlab::types::Detection;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synthgen = SceneSpec {
        num_videos: 6,
        frames_per_video: 60,
        seed: 8,
        ..SceneSpec::default()
    };
    cfg.train.total_steps = 6;
    cfg.train.schedule.decay_steps = vec![4];
    cfg
}

/// Predictions that reproduce the ground truth, with a timeline that fires
/// on every frame after the track.
fn perfect_predictions(cfg: &ExperimentConfig) -> (vqlab::dataset::Dataset, Vec<PredictionRecord>) {
    let dataset = generate_dataset(&cfg.synthgen).unwrap();
    let preds = dataset
        .records()
        .map(|(_, r)| PredictionRecord {
            video_id: r.video_id.to_string(),
            query_index: r.query_index,
            response_track: TrackJson::from(&r.gt_track),
            peak: PeakJson {
                frame: r.gt_track.start,
                confidence: 0.9,
            },
            timeline: (0..r.query.query_frame).map(|f| (f, if r.gt_track.contains(f) { 0.9 } else { 0.1 })).collect(),
            timeline_boxes: Vec::new(),
        })
        .collect();
    (dataset, preds)
}

#[test]
fn perfect_predictions_score_one_and_no_false_positives() {
    let cfg = small();
    let (dataset, preds) = perfect_predictions(&cfg);
    let report = evaluate_predictions(&preds, &dataset, &EvalConfig::default()).unwrap();
    assert_eq!(report.metrics.tap25, 1.0);
    assert_eq!(report.metrics.stap25, 1.0);
    assert_eq!(report.metrics.succ, 100.0);
    assert_eq!(report.metrics.rec_percent, 100.0);
    assert_eq!(report.fp_rate_on_negatives, 0.0);
}

#[test]
fn prediction_sets_must_match_the_queries() {
    let cfg = small();
    let (dataset, mut preds) = perfect_predictions(&cfg);
    let extra = preds[0].clone();
    preds.push(extra);
    assert!(evaluate_predictions(&preds, &dataset, &EvalConfig::default()).is_err());
    preds.truncate(preds.len() - 2);
    assert!(evaluate_predictions(&preds, &dataset, &EvalConfig::default()).is_err());
}

#[test]
fn detection_frames_pairs_records_with_annotated_frames() {
    let cfg = small();
    let dataset = generate_dataset(&cfg.synthgen).unwrap();
    let (_, r) = dataset.records().next().unwrap();
    let gt = r.gt_track.boxes[0];
    let record = DetectionRecord {
        video_id: r.video_id.to_string(),
        query_index: r.query_index,
        frame: r.gt_track.start,
        detections: vec![Detection::new(gt, 0.3).unwrap(), Detection::new(gt, 0.8).unwrap()],
    };
    let frames = detection_frames(std::slice::from_ref(&record), &dataset).unwrap();
    let annotated: usize = dataset.records().map(|(_, r)| r.gt_track.len()).sum();
    assert_eq!(frames.len(), annotated);
    // Detections come back ranked; frames without a record are empty.
    assert_eq!(frames[0].detections[0].confidence, 0.8);
    assert_eq!(frames.iter().filter(|f| f.detections.is_empty()).count(), annotated - 1);

    assert!(detection_frames(&[record.clone(), record.clone()], &dataset).is_err());
    let stray = DetectionRecord {
        frame: r.query.query_frame,
        ..record
    };
    assert!(detection_frames(&[stray], &dataset).is_err());
}

#[test]
fn ablation_grid_covers_heads_and_samplers() {
    let grid = ablation_grid(&ExperimentConfig::default());
    assert_eq!(grid.len(), 9);
    let names: BTreeSet<&str> = grid.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), 9);
    let variants: BTreeSet<&str> = grid[..5].iter().map(|(_, c)| c.train.head.variant.name()).collect();
    assert_eq!(variants.len(), 5);
    let samplers: BTreeSet<(bool, bool)> = grid[5..]
        .iter()
        .map(|(_, c)| {
            assert_eq!(c.train.head.variant, Variant::CocoCond);
            (c.train.sampler.bps_enabled, c.train.sampler.nufs_enabled)
        })
        .collect();
    assert_eq!(samplers.len(), 4);
}

#[test]
fn benchmark_run_reports_every_metric() {
    let cfg = small();
    let bench = Benchmark::generate(&cfg).unwrap();
    assert!(bench.train.num_records() > 0 && bench.test.num_records() > 0);
    let out = bench.run(&cfg).unwrap();
    let r = &out.results;
    assert_eq!(r.train_steps, 6);
    assert_eq!(r.pufs_pairs, 0);
    assert_eq!(r.dataset_hash, bench.hash);
    assert_eq!(out.predictions.len(), bench.test.num_records());
    for v in [r.detection.ap, r.detection.ap50, r.detection.ap75, r.detection.ar10, r.vq2d.metrics.tap25, r.vq2d.metrics.stap25] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert!(r.detection.ap <= r.detection.ap50);
    assert!(r.final_loss.is_some_and(f64::is_finite));

    let mut other = cfg.clone();
    other.features.backbone.seed += 1;
    assert!(bench.run(&other).is_err());
}

#[test]
fn config_rejects_unknown_keys_and_bad_fractions() {
    let err = serde_json::from_str::<ExperimentConfig>(r#"{"train": {"speed": 1}}"#).unwrap_err();
    assert!(err.to_string().contains("speed"));
    let mut cfg = ExperimentConfig::default();
    cfg.test_fraction = 1.0;
    assert!(cfg.validate().is_err());
}
