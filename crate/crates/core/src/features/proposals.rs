//! Class-agnostic box proposals.
//!
//! Heuristic mode thresholds a colour-contrast map against the frame's
//! median colour, groups the surviving pixels into 8-connected components
//! and scores each component by its mean contrast.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Proposal;
use crate::geometry::BBox;
use crate::types::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub max_proposals: usize,
    /// Minimum per-channel deviation from the background colour.
    pub contrast_threshold: f64,
    /// Components smaller than this many pixels are ignored.
    pub min_area: usize,
    /// Mean contrast that maps to objectness `1 - 1/e`.
    pub saliency_scale: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            max_proposals: 16,
            contrast_threshold: 0.08,
            min_area: 12,
            saliency_scale: 0.15,
        }
    }
}

pub enum ProposalMode<'a, R: Rng> {
    Heuristic,
    /// Ground-truth boxes jittered by up to `jitter` of their size, padded
    /// with uniformly random boxes.
    JitteredGt {
        boxes: &'a [BBox],
        jitter: f64,
        rng: &'a mut R,
    },
}

pub fn propose<R: Rng>(img: &RgbImage, mode: ProposalMode<'_, R>, cfg: &ProposalConfig) -> Vec<Proposal> {
    match mode {
        ProposalMode::Heuristic => heuristic(img, cfg),
        ProposalMode::JitteredGt { boxes, jitter, rng } => jittered(img, boxes, jitter, rng, cfg),
    }
}

fn median(mut v: Vec<u8>) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    *m as f64 / 255.0
}

/// Per-pixel max-channel deviation from the median colour.
pub fn contrast_map(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let bg: Vec<f64> = (0..3)
        .map(|c| median(img.raw().iter().skip(c).step_by(3).copied().collect()))
        .collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..3)
                .map(|c| (img.get(x, y, c) - bg[c]).abs())
                .fold(0.0, f64::max);
        }
    }
    out
}

pub fn full_frame(img: &RgbImage) -> Proposal {
    Proposal {
        bbox: BBox::new(0.0, 0.0, img.width() as f64, img.height() as f64).expect("non-empty frame"),
        objectness: 0.0,
    }
}

fn heuristic(img: &RgbImage, cfg: &ProposalConfig) -> Vec<Proposal> {
    let (w, h) = (img.width(), img.height());
    let contrast = contrast_map(img);
    let mut label = vec![u32::MAX; w * h];
    let mut found: Vec<(f64, BBox)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] != u32::MAX || contrast[start] < cfg.contrast_threshold {
            continue;
        }
        let id = found.len() as u32;
        label[start] = id;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let (mut area, mut total) = (0usize, 0.0);
        while let Some(p) = stack.pop() {
            let (px, py) = (p % w, p / w);
            x0 = x0.min(px);
            y0 = y0.min(py);
            x1 = x1.max(px);
            y1 = y1.max(py);
            area += 1;
            total += contrast[p];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (px as i64 + dx, py as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if label[q] == u32::MAX && contrast[q] >= cfg.contrast_threshold {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        let b = BBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
            .expect("component has at least one pixel");
        // Ids must stay dense, so small components are kept here and filtered below.
        let score = if area >= cfg.min_area {
            1.0 - (-(total / area as f64) / cfg.saliency_scale).exp()
        } else {
            -1.0
        };
        found.push((score, b));
    }
    let mut props: Vec<Proposal> = found
        .into_iter()
        .filter(|(s, _)| *s >= 0.0)
        .map(|(s, b)| Proposal {
            bbox: b,
            objectness: s.clamp(0.0, 1.0),
        })
        .collect();
    sort_and_truncate(&mut props, cfg.max_proposals);
    if props.is_empty() {
        props.push(full_frame(img));
    }
    props
}

/// Highest objectness first; ties keep spatial order (top-left first).
pub fn sort_and_truncate(props: &mut Vec<Proposal>, max: usize) {
    props.sort_by(|a, b| {
        b.objectness
            .total_cmp(&a.objectness)
            .then(a.bbox.y.total_cmp(&b.bbox.y))
            .then(a.bbox.x.total_cmp(&b.bbox.x))
    });
    props.truncate(max);
}

/// A uniformly random box inside the frame with sides in `[min_side, max_side]`.
pub fn random_box(rng: &mut impl Rng, width: f64, height: f64, min_side: f64, max_side: f64) -> BBox {
    let bw = rng.gen_range(min_side..=max_side.min(width));
    let bh = rng.gen_range(min_side..=max_side.min(height));
    let x = rng.gen_range(0.0..=(width - bw));
    let y = rng.gen_range(0.0..=(height - bh));
    BBox::new(x, y, bw, bh).expect("positive sides")
}

fn jittered<R: Rng>(img: &RgbImage, boxes: &[BBox], jitter: f64, rng: &mut R, cfg: &ProposalConfig) -> Vec<Proposal> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut out = Vec::new();
    for b in boxes.iter().take(cfg.max_proposals) {
        let jb = if jitter == 0.0 {
            Some(*b)
        } else {
            let mut j = |s: f64| rng.gen_range(-jitter..=jitter) * s;
            let (dx, dy, dw, dh) = (j(b.w), j(b.h), j(b.w), j(b.h));
            BBox::new(b.x + dx, b.y + dy, (b.w + dw).max(1.0), (b.h + dh).max(1.0))
                .ok()
                .and_then(|jb| jb.clip_to(w, h))
        };
        if let Some(bbox) = jb {
            out.push(Proposal { bbox, objectness: 1.0 });
        }
    }
    let side = (w.min(h) / 4.0).max(2.0);
    while out.len() < cfg.max_proposals {
        out.push(Proposal {
            bbox: random_box(rng, w, h, side / 2.0, side * 1.5),
            objectness: 0.0,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn canvas(w: usize, h: usize, bg: [u8; 3]) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_u8(x, y, bg);
            }
        }
        img
    }

    fn fill(img: &mut RgbImage, b: &BBox, rgb: [u8; 3]) {
        for y in b.y as usize..b.bottom() as usize {
            for x in b.x as usize..b.right() as usize {
                img.set_u8(x, y, rgb);
            }
        }
    }

    #[test]
    fn uniform_frame_falls_back_to_full_frame() {
        let img = canvas(32, 24, [90, 90, 90]);
        let p = propose::<ChaCha8Rng>(&img, ProposalMode::Heuristic, &ProposalConfig::default());
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, BBox::new(0., 0., 32., 24.).unwrap());
    }

    #[test]
    fn separated_blobs_are_found() {
        let mut img = canvas(64, 64, [60, 60, 70]);
        let blobs = [
            BBox::new(4., 4., 12., 10.).unwrap(),
            BBox::new(30., 8., 10., 14.).unwrap(),
            BBox::new(10., 40., 16., 12.).unwrap(),
            BBox::new(44., 44., 11., 11.).unwrap(),
        ];
        for (i, b) in blobs.iter().enumerate() {
            fill(&mut img, b, [200, (50 * i) as u8, 30]);
        }
        let p = propose::<ChaCha8Rng>(&img, ProposalMode::Heuristic, &ProposalConfig::default());
        assert!(p.len() >= blobs.len());
        for b in &blobs {
            assert!(p.iter().any(|q| iou(&q.bbox, b) >= 0.5), "{b:?} not proposed");
        }
        assert!(p.iter().all(|q| (0.0..=1.0).contains(&q.objectness)));
    }

    #[test]
    fn never_more_than_max_proposals() {
        let mut img = canvas(64, 64, [40, 40, 40]);
        for i in 0..6 {
            for j in 0..6 {
                fill(
                    &mut img,
                    &BBox::new(2. + 10. * i as f64, 2. + 10. * j as f64, 5., 5.).unwrap(),
                    [250, 250, 250],
                );
            }
        }
        let p = propose::<ChaCha8Rng>(&img, ProposalMode::Heuristic, &ProposalConfig::default());
        assert_eq!(p.len(), 16);
    }

    #[test]
    fn zero_jitter_returns_gt_verbatim() {
        let img = canvas(64, 48, [0, 0, 0]);
        let gt = [BBox::new(3., 4., 10., 12.).unwrap(), BBox::new(30., 20., 8., 8.).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = propose(
            &img,
            ProposalMode::JitteredGt {
                boxes: &gt,
                jitter: 0.0,
                rng: &mut rng,
            },
            &ProposalConfig::default(),
        );
        assert_eq!(p.len(), 16);
        assert_eq!(p[0].bbox, gt[0]);
        assert_eq!(p[1].bbox, gt[1]);
        assert!(p[2..].iter().all(|q| q.bbox.right() <= 64.0 && q.bbox.bottom() <= 48.0));
    }

    #[test]
    fn jitter_stays_within_bounds() {
        let img = canvas(64, 48, [0, 0, 0]);
        let gt = [BBox::new(20., 20., 10., 10.).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = propose(
                &img,
                ProposalMode::JitteredGt {
                    boxes: &gt,
                    jitter: 0.2,
                    rng: &mut rng,
                },
                &ProposalConfig::default(),
            );
            let j = p[0].bbox;
            assert!((j.x - 20.0).abs() <= 2.0 + 1e-9 && (j.w - 10.0).abs() <= 2.0 + 1e-9);
        }
    }
}
