//! Detection loss: class-balanced binary cross-entropy on proposal scores
//! plus smooth-L1 on the box deltas of positive proposals.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::ProposalSet;
use crate::geometry::BBox;
use crate::heads::{encode_deltas, HeadOutput, HeadVars};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    /// Upper bound of the positive-class weight.
    pub pos_weight_cap: f64,
    /// Score clamp inside the logarithms.
    pub eps: f64,
    /// Quadratic zone of the smooth-L1 term.
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            box_weight: 1.0,
            pos_weight_cap: 10.0,
            eps: 1e-7,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cls_weight >= 0.0
            && self.box_weight >= 0.0
            && self.pos_weight_cap >= 1.0
            && self.eps > 0.0
            && self.eps < 0.5
            && self.smooth_l1_beta > 0.0
            && [self.cls_weight, self.box_weight, self.pos_weight_cap, self.smooth_l1_beta]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid loss configuration {self:?}")))
        }
    }
}

/// Per-proposal BCE weights: positives get `min(#neg / #pos, cap)`, or 1
/// when the set has no negatives; negatives get 1.
pub fn class_weights(labels: &[bool], cap: f64) -> Vec<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    let w_pos = if pos == 0 || neg == 0 {
        1.0
    } else {
        (neg as f64 / pos as f64).min(cap)
    };
    labels.iter().map(|&l| if l { w_pos } else { 1.0 }).collect()
}

/// Adds the loss of one proposal set to `g`. `gt` is required for the box
/// term; without it (or without positives) only the class term remains.
pub fn set_loss(g: &mut Graph, out: &HeadVars, labels: &[bool], gt: Option<&BBox>, set: &ProposalSet, cfg: &LossConfig) -> Var {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let bce = g.weighted_bce(out.scores, y, class_weights(labels, cfg.pos_weight_cap), cfg.eps);
    let mut total = g.scale(bce, cfg.cls_weight);
    if let (Some(d), Some(gt)) = (out.deltas, gt) {
        if cfg.box_weight > 0.0 && labels.iter().any(|l| *l) {
            let target = set
                .proposals
                .iter()
                .zip(labels)
                .flat_map(|(p, &l)| if l { encode_deltas(&p.bbox, gt) } else { [0.0; 4] })
                .collect();
            let l1 = g.smooth_l1(d, target, labels.to_vec(), cfg.smooth_l1_beta);
            let l1 = g.scale(l1, cfg.box_weight);
            total = g.add(total, l1);
        }
    }
    total
}

/// Loss value of a finished head output.
pub fn loss(out: &HeadOutput, labels: &[bool], gt: Option<&BBox>, set: &ProposalSet, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let n = out.scores.len();
    if labels.len() != n || set.len() != n {
        return Err(Error::DimensionMismatch {
            context: "loss labels",
            expected: n,
            actual: if labels.len() != n { labels.len() } else { set.len() },
        });
    }
    let mut g = Graph::new();
    let scores = g.constant(Tensor::matrix(n, 1, out.scores.clone()));
    let deltas = out
        .deltas
        .as_ref()
        .map(|d| g.constant(Tensor::matrix(n, 4, d.iter().flatten().copied().collect())));
    let vars = HeadVars { scores, deltas };
    let l = set_loss(&mut g, &vars, labels, gt, set, cfg);
    Ok(g.value(l).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureVector, Proposal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_of(boxes: &[BBox]) -> ProposalSet {
        let props = boxes
            .iter()
            .map(|b| Proposal {
                bbox: *b,
                objectness: 1.0,
            })
            .collect();
        ProposalSet::new(0, props, vec![FeatureVector(vec![0.0]); boxes.len()]).unwrap()
    }

    fn unit_boxes(n: usize) -> Vec<BBox> {
        (0..n).map(|i| BBox::new(i as f64, 0.0, 4.0, 4.0).unwrap()).collect()
    }

    #[test]
    fn half_scores_give_ln2() {
        let set = set_of(&unit_boxes(4));
        let out = HeadOutput {
            scores: vec![0.5; 4],
            deltas: None,
        };
        let l = loss(&out, &[true, false, true, false], None, &set, &LossConfig::default()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_scores_reach_the_clamp_bound() {
        let set = set_of(&unit_boxes(3));
        let cfg = LossConfig::default();
        let out = HeadOutput {
            scores: vec![1.0, 0.0, 0.0],
            deltas: None,
        };
        let l = loss(&out, &[true, false, false], None, &set, &cfg).unwrap();
        // Clamped terms contribute -ln(1 - eps) each, weighted 2, 1, 1.
        let bound = -(1.0 - cfg.eps).ln() * 4.0 / 3.0;
        assert!(l >= 0.0 && l <= bound + 1e-15, "{l}");
    }

    #[test]
    fn weights_balance_and_cap() {
        assert_eq!(class_weights(&[true, false, false, false], 10.0), vec![3.0, 1.0, 1.0, 1.0]);
        let many = [vec![true], vec![false; 30]].concat();
        assert_eq!(class_weights(&many, 10.0)[0], 10.0);
        assert_eq!(class_weights(&[true, true], 10.0), vec![1.0, 1.0]);
        assert_eq!(class_weights(&[false, false], 10.0), vec![1.0, 1.0]);
        assert_eq!(class_weights(&[true, true, true, false], 10.0)[0], 1.0 / 3.0);
    }

    /// Hand-written scalar BCE + smooth-L1.
    fn oracle(scores: &[f64], deltas: &[[f64; 4]], labels: &[bool], boxes: &[BBox], gt: &BBox, cfg: &LossConfig) -> f64 {
        let pos = labels.iter().filter(|l| **l).count() as f64;
        let neg = labels.len() as f64 - pos;
        let wp = if pos == 0.0 || neg == 0.0 { 1.0 } else { (neg / pos).min(cfg.pos_weight_cap) };
        let mut bce = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            let p = s.max(cfg.eps).min(1.0 - cfg.eps);
            bce += if l { -wp * p.ln() } else { -(1.0 - p).ln() };
        }
        bce /= labels.len() as f64;
        let mut l1 = 0.0;
        for ((d, &l), b) in deltas.iter().zip(labels).zip(boxes) {
            if !l {
                continue;
            }
            let (bx, by) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
            let (gx, gy) = (gt.x + gt.w / 2.0, gt.y + gt.h / 2.0);
            let t = [(gx - bx) / b.w, (gy - by) / b.h, (gt.w / b.w).ln(), (gt.h / b.h).ln()];
            for k in 0..4 {
                let e = (d[k] - t[k]).abs();
                l1 += if e < cfg.smooth_l1_beta {
                    0.5 * e * e / cfg.smooth_l1_beta
                } else {
                    e - 0.5 * cfg.smooth_l1_beta
                };
            }
        }
        if pos > 0.0 {
            l1 /= pos;
        }
        cfg.cls_weight * bce + cfg.box_weight * l1
    }

    #[test]
    fn matches_scalar_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = LossConfig {
            box_weight: 0.7,
            ..LossConfig::default()
        };
        for _ in 0..50 {
            let boxes: Vec<BBox> = (0..6)
                .map(|_| BBox::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(2.0..9.0), rng.gen_range(2.0..9.0)).unwrap())
                .collect();
            let gt = BBox::new(5.0, 6.0, 7.0, 5.0).unwrap();
            let labels: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.4)).collect();
            let scores: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let deltas: Vec<[f64; 4]> = (0..6).map(|_| [0; 4].map(|_: i32| rng.gen_range(-0.5..0.5))).collect();
            let out = HeadOutput {
                scores: scores.clone(),
                deltas: Some(deltas.clone()),
            };
            let got = loss(&out, &labels, Some(&gt), &set_of(&boxes), &cfg).unwrap();
            let want = oracle(&scores, &deltas, &labels, &boxes, &gt, &cfg);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn rejects_mismatched_labels() {
        let set = set_of(&unit_boxes(2));
        let out = HeadOutput {
            scores: vec![0.5; 2],
            deltas: None,
        };
        assert!(loss(&out, &[true], None, &set, &LossConfig::default()).is_err());
    }
}
