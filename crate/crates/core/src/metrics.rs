//! Evaluation metrics: detection AP/AR on annotated frames and track-level
//! VQ2D metrics.
//!
//! Ranked lists are scored with confidence tie groups: detections sharing a
//! confidence enter the precision-recall curve together, so every metric is
//! independent of input order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, temporal_iou, tube_iou, BBox};
use crate::types::{Detection, QueryKey, ResponseTrack};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Ranked detections of one annotated frame and its ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEval {
    pub detections: Vec<Detection>,
    pub gt: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetEvalResult {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR@10")]
    pub ar10: f64,
}

/// All-points interpolated AP of `(confidence, is_true_positive)` pairs
/// against `num_gt` ground truths.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Empty("ground truth"));
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let c = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == c {
            tp += ranked[i].1 as usize;
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / seen as f64));
    }
    let mut envelope = vec![0.0f64; curve.len()];
    let mut best = 0.0f64;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (&(r, _), p) in curve.iter().zip(envelope) {
        if r > prev {
            ap += (r - prev) * p;
            prev = r;
        }
    }
    Ok(ap)
}

/// Greedy confidence-ordered matching at one IoU threshold: on each frame the
/// highest-confidence detection overlapping the GT by at least `t` is the
/// true positive; everything else is a false positive.
fn match_frames(frames: &[FrameEval], t: f64) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for f in frames {
        let best = f
            .detections
            .iter()
            .filter(|d| iou(&d.bbox, &f.gt) >= t)
            .map(|d| d.confidence)
            .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))));
        let mut matched = false;
        for d in &f.detections {
            let tp = !matched && Some(d.confidence) == best && iou(&d.bbox, &f.gt) >= t;
            matched |= tp;
            out.push((d.confidence, tp));
        }
    }
    out
}

/// Frame-level query detection metrics. `thresholds` drive the headline AP
/// and AR@10; AP50 and AP75 are always reported at 0.5 and 0.75.
pub fn detection_ap(frames: &[FrameEval], thresholds: &[f64]) -> Result<DetEvalResult> {
    if frames.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config("IoU thresholds must be a non-empty list in [0, 1]"));
    }
    let ap_at = |t: f64| average_precision(&match_frames(frames, t), frames.len());
    let mut ap = 0.0;
    let mut ar = 0.0;
    for &t in thresholds {
        ap += ap_at(t)?;
        ar += recall_at_k(frames, t, 10);
    }
    let n = thresholds.len() as f64;
    Ok(DetEvalResult {
        ap: ap / n,
        ap50: ap_at(0.5)?,
        ap75: ap_at(0.75)?,
        ar10: ar / n,
    })
}

/// Fraction of frames whose `k` highest-confidence detections include one
/// overlapping the GT by at least `t`. Equal confidences keep input order.
fn recall_at_k(frames: &[FrameEval], t: f64, k: usize) -> f64 {
    let hits = frames
        .iter()
        .filter(|f| {
            let mut ranked: Vec<&Detection> = f.detections.iter().collect();
            ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            ranked.iter().take(k).any(|d| iou(&d.bbox, &f.gt) >= t)
        })
        .count();
    hits as f64 / frames.len() as f64
}

/// Thresholds of the VQ2D metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Vq2dConfig {
    /// Temporal / spatiotemporal IoU needed for a true positive.
    pub match_iou: f64,
    /// A query succeeds when its tube IoU exceeds this value.
    pub succ_tube_iou: f64,
    /// Per-frame IoU at which a GT frame counts as recovered.
    pub rec_iou: f64,
}

impl Default for Vq2dConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.25,
            succ_tube_iou: 0.0,
            rec_iou: 0.5,
        }
    }
}

/// A predicted response track and its peak confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrack {
    pub track: ResponseTrack,
    pub confidence: f64,
}

/// One query: its prediction, if any, and its ground-truth track.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEval {
    pub prediction: Option<ScoredTrack>,
    pub gt: ResponseTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vq2dEvalResult {
    #[serde(rename = "tAP25")]
    pub tap25: f64,
    #[serde(rename = "stAP25")]
    pub stap25: f64,
    #[serde(rename = "rec%")]
    pub rec_percent: f64,
    #[serde(rename = "Succ")]
    pub succ: f64,
}

/// Fraction of GT frames where the predicted box overlaps by at least `t`.
pub fn recovered_fraction(pred: &ResponseTrack, gt: &ResponseTrack, t: f64) -> f64 {
    let hits = gt
        .frames()
        .filter(|&f| matches!((pred.box_at(f), gt.box_at(f)), (Some(p), Some(g)) if iou(p, g) >= t))
        .count();
    hits as f64 / gt.len() as f64
}

pub fn vq2d_metrics(queries: &[QueryEval], cfg: &Vq2dConfig) -> Result<Vq2dEvalResult> {
    if queries.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    let n = queries.len() as f64;
    let ranked = |overlap: fn(&ResponseTrack, &ResponseTrack) -> f64| -> Vec<(f64, bool)> {
        queries
            .iter()
            .filter_map(|q| {
                q.prediction
                    .as_ref()
                    .map(|p| (p.confidence, overlap(&p.track, &q.gt) >= cfg.match_iou))
            })
            .collect()
    };
    let tap25 = average_precision(&ranked(temporal_iou), queries.len())?;
    let stap25 = average_precision(&ranked(tube_iou), queries.len())?;
    let mut succ = 0usize;
    let mut rec = 0.0;
    for q in queries {
        if let Some(p) = &q.prediction {
            succ += (tube_iou(&p.track, &q.gt) > cfg.succ_tube_iou) as usize;
            rec += recovered_fraction(&p.track, &q.gt, cfg.rec_iou);
        }
    }
    Ok(Vq2dEvalResult {
        tap25,
        stap25,
        rec_percent: 100.0 * rec / n,
        succ: 100.0 * succ as f64 / n,
    })
}

/// Joins predictions and ground truths by query key. Every ground-truth
/// query must have exactly one prediction and vice versa.
pub fn join_by_key<P, G>(preds: Vec<(QueryKey, P)>, gts: Vec<(QueryKey, G)>) -> Result<Vec<(QueryKey, P, G)>> {
    let mut by_key = BTreeMap::new();
    for (k, p) in preds {
        if by_key.insert(k.clone(), p).is_some() {
            return Err(Error::data(format!("duplicate prediction for query {k}")));
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(gts.len());
    for (k, g) in gts {
        if !seen.insert(k.clone()) {
            return Err(Error::data(format!("duplicate annotation for query {k}")));
        }
        let p = by_key
            .remove(&k)
            .ok_or_else(|| Error::data(format!("no prediction for query {k}")))?;
        out.push((k, p, g));
    }
    if let Some(k) = by_key.keys().next() {
        return Err(Error::data(format!("prediction for unknown query {k}")));
    }
    Ok(out)
}

/// Score timeline of one query with the span its negative frames come from.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeTimeline<'a> {
    /// `(frame, top-1 confidence)` pairs.
    pub timeline: &'a [(usize, f64)],
    pub gt: &'a ResponseTrack,
    pub query_frame: usize,
}

/// Fraction of sampled frames strictly after the GT track and before the
/// query frame whose top score is at least `tau`. Zero when no such frame
/// was sampled.
pub fn fp_rate_on_negatives(timelines: &[NegativeTimeline<'_>], tau: f64) -> f64 {
    let (mut total, mut fired) = (0usize, 0usize);
    for t in timelines {
        for &(frame, score) in t.timeline {
            if frame >= t.gt.end() && frame < t.query_frame {
                total += 1;
                fired += (score >= tau) as usize;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        fired as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BBox, c: f64) -> Detection {
        Detection::new(b, c).unwrap()
    }

    /// Precision-recall points by thresholding at every distinct confidence
    /// and counting frames with a qualifying detection above the cut.
    fn oracle_ap(frames: &[FrameEval], t: f64) -> f64 {
        let mut cuts: Vec<f64> = frames.iter().flat_map(|f| f.detections.iter().map(|d| d.confidence)).collect();
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();
        let points: Vec<(f64, f64)> = cuts
            .iter()
            .map(|&c| {
                let kept = frames.iter().flat_map(|f| &f.detections).filter(|d| d.confidence >= c).count();
                let tp = frames
                    .iter()
                    .filter(|f| f.detections.iter().any(|d| d.confidence >= c && iou(&d.bbox, &f.gt) >= t))
                    .count();
                (tp as f64 / frames.len() as f64, tp as f64 / kept as f64)
            })
            .collect();
        pr_area(&points)
    }

    /// Area under the interpolated curve: each recall level takes the best
    /// precision reached at that recall or beyond.
    fn pr_area(points: &[(f64, f64)]) -> f64 {
        let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
        recalls.sort_by(f64::total_cmp);
        recalls.dedup();
        let mut area = 0.0;
        let mut prev = 0.0;
        for r in recalls {
            let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            area += (r - prev) * p;
            prev = r;
        }
        area
    }

    fn random_frames(rng: &mut ChaCha8Rng) -> Vec<FrameEval> {
        let nf = rng.gen_range(1..=3);
        let mut frames: Vec<FrameEval> = (0..nf)
            .map(|_| FrameEval {
                detections: Vec::new(),
                gt: bx(10.0, 10.0, 10.0, 10.0),
            })
            .collect();
        for _ in 0..rng.gen_range(0..=6) {
            let f = rng.gen_range(0..nf);
            let b = bx(rng.gen_range(5.0..15.0), rng.gen_range(5.0..15.0), rng.gen_range(6.0..14.0), rng.gen_range(6.0..14.0));
            // Coarse confidences make ties common.
            frames[f].detections.push(det(b, rng.gen_range(0..5) as f64 / 4.0));
        }
        frames
    }

    #[test]
    fn identical_prediction_scores_one() {
        let gt = bx(1.0, 2.0, 5.0, 6.0);
        let r = detection_ap(&[FrameEval { detections: vec![det(gt, 0.8)], gt }], &coco_thresholds()).unwrap();
        assert_eq!(r, DetEvalResult { ap: 1.0, ap50: 1.0, ap75: 1.0, ar10: 1.0 });
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let gt = bx(0.0, 0.0, 5.0, 5.0);
        let frames = vec![FrameEval {
            detections: vec![det(bx(10.0, 10.0, 5.0, 5.0), 0.9), det(bx(5.0, 0.0, 5.0, 5.0), 0.3)],
            gt,
        }];
        let r = detection_ap(&frames, &coco_thresholds()).unwrap();
        assert_eq!(r, DetEvalResult { ap: 0.0, ap50: 0.0, ap75: 0.0, ar10: 0.0 });
        assert!(detection_ap(&[], &coco_thresholds()).is_err());
    }

    /// Two frames, three detections: an exact hit (0.9), a miss (0.8) and an
    /// IoU-0.64 hit (0.7). At thresholds up to 0.60 the ranked list is
    /// TP, FP, TP: AP = 0.5·1 + 0.5·2/3 = 5/6. Above it only the first hit
    /// counts: AP = 0.5. Headline AP = (3·5/6 + 7·0.5)/10 = 0.6 and
    /// AR@10 = (3·1 + 7·0.5)/10 = 0.65.
    #[test]
    fn hand_computed_two_frame_case() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let frames = vec![
            FrameEval {
                detections: vec![det(g, 0.9), det(bx(30.0, 30.0, 5.0, 5.0), 0.8)],
                gt: g,
            },
            FrameEval {
                detections: vec![det(bx(0.0, 0.0, 8.0, 8.0), 0.7)],
                gt: g,
            },
        ];
        let r = detection_ap(&frames, &coco_thresholds()).unwrap();
        assert!((r.ap50 - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.ap75 - 0.5).abs() < 1e-12);
        assert!((r.ap - 0.6).abs() < 1e-12);
        assert!((r.ar10 - 0.65).abs() < 1e-12);
        for t in coco_thresholds() {
            assert!((average_precision(&match_frames(&frames, t), 2).unwrap() - oracle_ap(&frames, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_ap_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let frames = random_frames(&mut rng);
            for t in coco_thresholds() {
                let got = average_precision(&match_frames(&frames, t), frames.len()).unwrap();
                assert_eq!(got, oracle_ap(&frames, t), "{frames:?} at {t}");
            }
            let r = detection_ap(&frames, &coco_thresholds()).unwrap();
            assert!(r.ap <= r.ap50 + 1e-15 && (0.0..=1.0).contains(&r.ap) && (0.0..=1.0).contains(&r.ar10));
        }
    }

    #[test]
    fn detection_ap_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let frames = random_frames(&mut rng);
            let base = detection_ap(&frames, &coco_thresholds()).unwrap();
            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut rng);
            for f in &mut shuffled {
                f.detections.shuffle(&mut rng);
            }
            let r = detection_ap(&shuffled, &coco_thresholds()).unwrap();
            assert_eq!((r.ap, r.ap50, r.ap75), (base.ap, base.ap50, base.ap75));
        }
    }

    #[test]
    fn false_positives_never_raise_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let far = bx(100.0, 100.0, 4.0, 4.0);
        for _ in 0..100 {
            let frames = random_frames(&mut rng);
            let base = detection_ap(&frames, &coco_thresholds()).unwrap();
            let mut low = frames.clone();
            low[0].detections.push(det(far, 0.0));
            let mut high = frames.clone();
            high[0].detections.insert(0, det(far, 1.0));
            for r in [detection_ap(&low, &coco_thresholds()).unwrap(), detection_ap(&high, &coco_thresholds()).unwrap()] {
                assert!(r.ap <= base.ap && r.ap50 <= base.ap50 && r.ap75 <= base.ap75);
            }
        }
    }

    fn track(start: usize, boxes: &[BBox]) -> ResponseTrack {
        ResponseTrack::new(start, boxes.to_vec()).unwrap()
    }

    fn const_track(start: usize, len: usize, b: BBox) -> ResponseTrack {
        track(start, &vec![b; len])
    }

    #[test]
    fn perfect_and_disjoint_vq2d() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let gts = [const_track(3, 4, b), const_track(10, 2, b)];
        let perfect: Vec<QueryEval> = gts
            .iter()
            .map(|g| QueryEval {
                prediction: Some(ScoredTrack { track: g.clone(), confidence: 0.7 }),
                gt: g.clone(),
            })
            .collect();
        let r = vq2d_metrics(&perfect, &Vq2dConfig::default()).unwrap();
        assert_eq!(r, Vq2dEvalResult { tap25: 1.0, stap25: 1.0, rec_percent: 100.0, succ: 100.0 });
        let disjoint: Vec<QueryEval> = gts
            .iter()
            .map(|g| QueryEval {
                prediction: Some(ScoredTrack { track: const_track(g.end() + 5, 3, b), confidence: 0.7 }),
                gt: g.clone(),
            })
            .collect();
        let r = vq2d_metrics(&disjoint, &Vq2dConfig::default()).unwrap();
        assert_eq!(r, Vq2dEvalResult { tap25: 0.0, stap25: 0.0, rec_percent: 0.0, succ: 0.0 });
    }

    /// Counts and PR enumeration written directly from the definitions.
    fn oracle_vq2d(queries: &[QueryEval]) -> Vq2dEvalResult {
        let n = queries.len() as f64;
        let ap = |overlap: &dyn Fn(&ResponseTrack, &ResponseTrack) -> f64| {
            let mut cuts: Vec<f64> = queries.iter().filter_map(|q| q.prediction.as_ref().map(|p| p.confidence)).collect();
            cuts.sort_by(|a, b| b.total_cmp(a));
            cuts.dedup();
            let points: Vec<(f64, f64)> = cuts
                .iter()
                .map(|&c| {
                    let kept: Vec<&QueryEval> = queries
                        .iter()
                        .filter(|q| q.prediction.as_ref().is_some_and(|p| p.confidence >= c))
                        .collect();
                    let tp = kept.iter().filter(|q| overlap(&q.prediction.as_ref().unwrap().track, &q.gt) >= 0.25).count();
                    (tp as f64 / n, tp as f64 / kept.len() as f64)
                })
                .collect();
            pr_area(&points)
        };
        let temporal = |p: &ResponseTrack, g: &ResponseTrack| {
            let pf: BTreeSet<usize> = p.frames().collect();
            let gf: BTreeSet<usize> = g.frames().collect();
            pf.intersection(&gf).count() as f64 / pf.union(&gf).count() as f64
        };
        let tube = |p: &ResponseTrack, g: &ResponseTrack| {
            let (mut i, mut u) = (0.0, 0.0);
            for f in 0..200 {
                match (p.box_at(f), g.box_at(f)) {
                    (Some(a), Some(b)) => {
                        let x = a.intersection_area(b);
                        i += x;
                        u += a.area() + b.area() - x;
                    }
                    (Some(a), None) => u += a.area(),
                    (None, Some(b)) => u += b.area(),
                    _ => {}
                }
            }
            if u == 0.0 { 0.0 } else { i / u }
        };
        let mut succ = 0.0;
        let mut rec = 0.0;
        for q in queries {
            if let Some(p) = &q.prediction {
                if tube(&p.track, &q.gt) > 0.0 {
                    succ += 1.0;
                }
                let good = q.gt.frames().filter(|&f| p.track.box_at(f).is_some_and(|b| iou(b, q.gt.box_at(f).unwrap()) >= 0.5)).count();
                rec += good as f64 / q.gt.len() as f64;
            }
        }
        Vq2dEvalResult {
            tap25: ap(&temporal),
            stap25: ap(&tube),
            rec_percent: 100.0 * rec / n,
            succ: 100.0 * succ / n,
        }
    }

    fn random_queries(rng: &mut ChaCha8Rng, n: usize) -> Vec<QueryEval> {
        let rand_track = |rng: &mut ChaCha8Rng| {
            let start = rng.gen_range(0..20);
            let len = rng.gen_range(1..8);
            let boxes: Vec<BBox> = (0..len)
                .map(|_| bx(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0)))
                .collect();
            track(start, &boxes)
        };
        (0..n)
            .map(|_| {
                let gt = rand_track(rng);
                let prediction = rng.gen_bool(0.9).then(|| ScoredTrack {
                    track: rand_track(rng),
                    confidence: rng.gen_range(0..4) as f64 / 3.0,
                });
                QueryEval { prediction, gt }
            })
            .collect()
    }

    /// Four hand-made queries: exact (0.9), temporally half-overlapping with
    /// shifted boxes (0.8), disjoint (0.6) and missing.
    #[test]
    fn mixed_queries_match_oracle() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let queries = vec![
            QueryEval {
                prediction: Some(ScoredTrack { track: const_track(0, 4, b), confidence: 0.9 }),
                gt: const_track(0, 4, b),
            },
            QueryEval {
                prediction: Some(ScoredTrack { track: const_track(2, 4, bx(2.0, 0.0, 10.0, 10.0)), confidence: 0.8 }),
                gt: const_track(0, 4, b),
            },
            QueryEval {
                prediction: Some(ScoredTrack { track: const_track(9, 2, b), confidence: 0.6 }),
                gt: const_track(0, 4, b),
            },
            QueryEval {
                prediction: None,
                gt: const_track(0, 4, b),
            },
        ];
        let got = vq2d_metrics(&queries, &Vq2dConfig::default()).unwrap();
        assert_eq!(got, oracle_vq2d(&queries));
        // tIoU of the second query is 2/6 ≥ 0.25: AP = 0.25 + 0.25 = 0.5.
        assert!((got.tap25 - 0.5).abs() < 1e-15);
        assert_eq!(got.succ, 50.0);
        // Second query recovers 2 of 4 frames at IoU 8/12.
        assert!((got.rec_percent - 100.0 * 1.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn vq2d_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6);
            let queries = random_queries(&mut rng, n);
            let got = vq2d_metrics(&queries, &Vq2dConfig::default()).unwrap();
            assert_eq!(got, oracle_vq2d(&queries), "{queries:?}");
            let mut shuffled = queries.clone();
            shuffled.shuffle(&mut rng);
            let again = vq2d_metrics(&shuffled, &Vq2dConfig::default()).unwrap();
            assert_eq!((again.tap25, again.stap25), (got.tap25, got.stap25));
            assert!((again.rec_percent - got.rec_percent).abs() < 1e-9 && again.succ == got.succ);
        }
    }

    #[test]
    fn join_requires_matching_keys() {
        let k = |v: &str, i| QueryKey { video_id: v.into(), query_index: i };
        let joined = join_by_key(vec![(k("b", 0), 2), (k("a", 0), 1)], vec![(k("a", 0), 'x'), (k("b", 0), 'y')]).unwrap();
        assert_eq!(joined, vec![(k("a", 0), 1, 'x'), (k("b", 0), 2, 'y')]);
        assert!(join_by_key(vec![(k("a", 0), 1)], vec![(k("a", 0), 'x'), (k("b", 0), 'y')]).is_err());
        assert!(join_by_key(vec![(k("a", 0), 1), (k("c", 0), 3)], vec![(k("a", 0), 'x')]).is_err());
        assert!(join_by_key(vec![(k("a", 0), 1), (k("a", 0), 3)], vec![(k("a", 0), 'x')]).is_err());
    }

    #[test]
    fn fp_rate_counts_negative_frames() {
        let gt = const_track(2, 3, bx(0.0, 0.0, 4.0, 4.0));
        let zeros: Vec<(usize, f64)> = (0..10).map(|f| (f, 0.0)).collect();
        let ones: Vec<(usize, f64)> = (0..10).map(|f| (f, 1.0)).collect();
        let nt = |t| NegativeTimeline { timeline: t, gt: &gt, query_frame: 9 };
        assert_eq!(fp_rate_on_negatives(&[nt(&zeros)], 0.6), 0.0);
        assert_eq!(fp_rate_on_negatives(&[nt(&ones)], 0.6), 1.0);
        // Negatives are frames 5..9 of each timeline.
        let mixed: Vec<(usize, f64)> = (0..10).map(|f| (f, [0.9, 0.9, 0.9, 0.9, 0.9, 0.6, 0.59, 0.1, 0.7, 1.0][f])).collect();
        let sparse = vec![(1, 1.0), (6, 0.8), (8, 0.2)];
        let got = fp_rate_on_negatives(&[nt(&mixed), nt(&sparse)], 0.6);
        let (mut n, mut k) = (0, 0);
        for t in [&mixed, &sparse] {
            for &(f, s) in t.iter() {
                if (5..9).contains(&f) {
                    n += 1;
                    k += (s >= 0.6) as usize;
                }
            }
        }
        assert_eq!((n, k), (6, 3));
        assert_eq!(got, k as f64 / n as f64);
        assert_eq!(fp_rate_on_negatives(&[], 0.6), 0.0);
    }
}
