//! Normalized cross-correlation template tracker.
//!
//! The template is the seed box's RGB patch, enlarged by a context margin
//! so that flat objects keep their outline. In each following (or
//! preceding) frame the tracker scans integer offsets within a square search
//! window around the previous position, keeps the box size fixed and moves
//! to the offset with the highest NCC less a quadratic displacement penalty.
//! NCC subtracts each channel's mean
//! and normalizes over all three channels jointly, so it is invariant to
//! brightness gain and to a uniform colour cast. The template is blended towards every accepted patch with rate
//! `α`; tracking in a direction stops when the best NCC falls below `θ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::types::{ResponseTrack, RgbImage, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// θ: minimum NCC to keep tracking.
    pub similarity_threshold: f64,
    /// α: template update rate.
    pub update_rate: f64,
    /// Search half-width as a fraction of the frame width.
    pub search_radius: f64,
    /// Offsets are ranked by `ncc - motion_penalty * (d / radius)^2`, where
    /// `d` is the Euclidean displacement; the stop test uses the raw NCC.
    pub motion_penalty: f64,
    /// Template margin added on every side, as a fraction of the box side.
    pub context: f64,
    /// Longest track (frames, including the seed); `None` is unbounded.
    pub max_track_length: Option<usize>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.4,
            update_rate: 0.1,
            search_radius: 0.15,
            motion_penalty: 1.0,
            context: 0.15,
            max_track_length: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.similarity_threshold)
            || !(0.0..=1.0).contains(&self.update_rate)
            || !(0.0..=1.0).contains(&self.search_radius)
            || !(0.0..=2.0).contains(&self.context)
            || !(self.motion_penalty >= 0.0 && self.motion_penalty.is_finite())
            || self.max_track_length == Some(0)
        {
            return Err(Error::config(format!("invalid tracker configuration {self:?}")));
        }
        Ok(())
    }
}

/// Patch at integer position `(x, y)` of size `w × h`, channel-interleaved.
fn patch(img: &RgbImage, x: usize, y: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h * 3);
    for yy in y..y + h {
        for xx in x..x + w {
            for c in 0..3 {
                out.push(img.get(xx, yy, c));
            }
        }
    }
    out
}

fn channel_means(p: &[f64]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for px in p.chunks_exact(3) {
        for c in 0..3 {
            m[c] += px[c];
        }
    }
    m.map(|v| v / (p.len() / 3) as f64)
}

/// NCC of two equally sized channel-interleaved RGB patches; 0 when either
/// is constant within every channel.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (channel_means(a), channel_means(b));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let (dx, dy) = (x - ma[i % 3], y - mb[i % 3]);
        ab += dx * dy;
        aa += dx * dx;
        bb += dy * dy;
    }
    let d = (aa * bb).sqrt();
    if d <= 1e-12 {
        0.0
    } else {
        ab / d
    }
}

/// Running template with its channel-centred copy cached, so that each
/// candidate costs one pass: with `Σ dev = 0` per channel, the cross term
/// needs no candidate mean.
struct Template {
    data: Vec<f64>,
    dev: Vec<f64>,
    dev_norm2: f64,
    w: usize,
    h: usize,
}

impl Template {
    fn new(data: Vec<f64>, w: usize, h: usize) -> Self {
        let mut t = Self {
            dev: vec![0.0; data.len()],
            data,
            dev_norm2: 0.0,
            w,
            h,
        };
        t.refresh();
        t
    }

    fn refresh(&mut self) {
        let m = channel_means(&self.data);
        for (i, (d, v)) in self.dev.iter_mut().zip(&self.data).enumerate() {
            *d = v - m[i % 3];
        }
        self.dev_norm2 = self.dev.iter().map(|d| d * d).sum();
    }

    fn blend(&mut self, p: &[f64], rate: f64) {
        for (a, b) in self.data.iter_mut().zip(p) {
            *a = (1.0 - rate) * *a + rate * b;
        }
        self.refresh();
    }

    /// Equals `ncc(&self.data, &patch(img, x, y, w, h))` up to rounding.
    fn similarity(&self, img: &RgbImage, x: usize, y: usize) -> f64 {
        let raw = img.raw();
        let stride = img.width() * 3;
        let (mut ab, mut sq, mut sum) = (0.0, 0.0, [0.0; 3]);
        let mut k = 0;
        for yy in y..y + self.h {
            let row = &raw[yy * stride + x * 3..yy * stride + (x + self.w) * 3];
            for px in row.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    ab += self.dev[k] * v;
                    sq += v * v;
                    sum[c] += v;
                    k += 1;
                }
            }
        }
        let n = (self.w * self.h) as f64;
        let bb = sq - sum.iter().map(|s| s * s / n).sum::<f64>();
        if bb <= 1e-10 || self.dev_norm2 <= 1e-12 {
            return 0.0;
        }
        ab / (self.dev_norm2 * bb).sqrt()
    }

    /// Raw similarity and position of the best-ranked offset within
    /// `radius` of `(px, py)`; ties prefer the smaller displacement, then
    /// raster order.
    fn search(&self, img: &RgbImage, px: usize, py: usize, radius: usize, penalty: f64) -> (f64, usize, usize) {
        let x_hi = (img.width() - self.w).min(px + radius);
        let y_hi = (img.height() - self.h).min(py + radius);
        let r2 = (radius.max(1) * radius.max(1)) as f64;
        // (rank, raw, x, y, squared displacement)
        let mut best = (f64::NEG_INFINITY, 0.0, px, py, usize::MAX);
        for y in py.saturating_sub(radius)..=y_hi {
            for x in px.saturating_sub(radius)..=x_hi {
                let s = self.similarity(img, x, y);
                let d2 = x.abs_diff(px).pow(2) + y.abs_diff(py).pow(2);
                let rank = s - penalty * d2 as f64 / r2;
                if rank > best.0 || (rank == best.0 && d2 < best.4) {
                    best = (rank, s, x, y, d2);
                }
            }
        }
        (best.1, best.2, best.3)
    }
}

/// Tracks `seed_box` from `seed_frame` forward (up to, excluding,
/// `end_limit`) and backward to frame 0. The seed frame keeps the seed box
/// verbatim; other boxes are the seed box translated by whole pixels.
pub fn track_bidirectional(
    clip: &VideoClip,
    seed_frame: usize,
    seed_box: &BBox,
    cfg: &TrackerConfig,
    end_limit: usize,
) -> Result<ResponseTrack> {
    cfg.validate()?;
    let (fw, fh) = clip.resolution();
    if seed_frame >= clip.len() || seed_frame >= end_limit {
        return Err(Error::data(format!(
            "video {}: tracker seed frame {seed_frame} outside the clip",
            clip.video_id
        )));
    }
    let clipped = seed_box
        .clip_to(fw as f64, fh as f64)
        .ok_or_else(|| Error::data(format!("tracker seed box {:?} outside the frame", seed_box.to_array())))?;
    if clipped.w < 1.0 || clipped.h < 1.0 {
        return Err(Error::data(format!(
            "degenerate tracker seed box {:?}",
            seed_box.to_array()
        )));
    }
    let (mx, my) = (cfg.context * clipped.w, cfg.context * clipped.h);
    let x0 = (clipped.x - mx).round().max(0.0) as usize;
    let y0 = (clipped.y - my).round().max(0.0) as usize;
    let w = ((clipped.right() + mx).round() as usize).min(fw) - x0;
    let h = ((clipped.bottom() + my).round() as usize).min(fh) - y0;
    let radius = (cfg.search_radius * fw as f64).round() as usize;
    let budget = cfg.max_track_length.unwrap_or(usize::MAX).saturating_sub(1);
    let end_limit = end_limit.min(clip.len());
    let seed_patch = patch(&clip.frames[seed_frame].image, x0, y0, w, h);

    let run = |frames: &mut dyn Iterator<Item = usize>, budget: usize| -> Vec<(usize, BBox)> {
        let mut tpl = Template::new(seed_patch.clone(), w, h);
        let (mut px, mut py) = (x0, y0);
        let mut out = Vec::new();
        for t in frames.take(budget) {
            let img = &clip.frames[t].image;
            let (s, x, y) = tpl.search(img, px, py, radius, cfg.motion_penalty);
            if s < cfg.similarity_threshold {
                break;
            }
            tpl.blend(&patch(img, x, y, w, h), cfg.update_rate);
            (px, py) = (x, y);
            let moved = seed_box.translate(x as f64 - x0 as f64, y as f64 - y0 as f64);
            match moved.clip_to(fw as f64, fh as f64) {
                Some(b) => out.push((t, b)),
                None => break,
            }
        }
        out
    };
    let forward = run(&mut (seed_frame + 1..end_limit), budget);
    let backward = run(&mut (0..seed_frame).rev(), budget.saturating_sub(forward.len()));
    let start = seed_frame - backward.len();
    let boxes = backward
        .iter()
        .rev()
        .map(|(_, b)| *b)
        .chain(std::iter::once(*seed_box))
        .chain(forward.iter().map(|(_, b)| *b))
        .collect();
    ResponseTrack::new(start, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip_with(object_at: impl Fn(usize) -> Option<(usize, usize)>, n: usize) -> VideoClip {
        clip_with_objects(|t| object_at(t).into_iter().map(|p| (p, true)).collect(), n)
    }

    /// Frames with 10×10 objects at the given positions, checkered or solid.
    fn clip_with_objects(objects_at: impl Fn(usize) -> Vec<((usize, usize), bool)>, n: usize) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bg: Vec<u8> = (0..48 * 48 * 3).map(|_| rng.gen_range(40..56)).collect();
        let frames = (0..n)
            .map(|t| {
                let mut img = RgbImage::from_raw(48, 48, bg.clone()).unwrap();
                for ((ox, oy), checker) in objects_at(t) {
                    for j in 0..10 {
                        for i in 0..10 {
                            let c = if !checker || (i / 3 + j / 3) % 2 == 0 { [230, 60, 40] } else { [160, 40, 30] };
                            img.set_u8(ox + i, oy + j, c);
                        }
                    }
                }
                Frame {
                    video_id: "v".into(),
                    index: t,
                    image: img,
                }
            })
            .collect();
        VideoClip::new("v", frames, 10.0).unwrap()
    }

    #[test]
    fn ncc_properties() {
        let a = [0.1, 0.5, 0.3, 0.9, 0.2, 0.4];
        assert!((ncc(&a, &a) - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| 0.5 * v + 0.2).collect();
        assert!((ncc(&a, &scaled) - 1.0).abs() < 1e-12);
        let cast: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + [0.1, -0.2, 0.05][i % 3]).collect();
        assert!((ncc(&a, &cast) - 1.0).abs() < 1e-12);
        // A tinted flat patch carries no structure.
        assert_eq!(ncc(&a, &[0.3, 0.1, 0.2, 0.3, 0.1, 0.2]), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((ncc(&a, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fast_similarity_matches_reference_ncc() {
        let clip = clip_with(|t| Some((10 + t, 12)), 4);
        let img0 = &clip.frames[0].image;
        let tpl = Template::new(patch(img0, 8, 10, 14, 13), 14, 13);
        let img = &clip.frames[2].image;
        for (x, y) in [(0, 0), (8, 10), (12, 11), (34, 35), (20, 3)] {
            let fast = tpl.similarity(img, x, y);
            let slow = ncc(&tpl.data, &patch(img, x, y, 14, 13));
            assert!((fast - slow).abs() < 1e-9, "({x},{y}): {fast} vs {slow}");
        }
        let flat = RgbImage::from_raw(20, 20, vec![90; 20 * 20 * 3]).unwrap();
        assert_eq!(tpl.similarity(&flat, 2, 3), 0.0);
    }

    #[test]
    fn static_object_tracked_over_visibility_span() {
        let clip = clip_with(|t| (5..25).contains(&t).then_some((20, 14)), 30);
        let seed = BBox::new(20.0, 14.0, 10.0, 10.0).unwrap();
        let tr = track_bidirectional(&clip, 12, &seed, &TrackerConfig::default(), 30).unwrap();
        assert_eq!(tr.start, 5);
        assert_eq!(tr.end(), 25);
        assert_eq!(tr.box_at(12), Some(&seed));
    }

    #[test]
    fn solid_object_is_tracked_by_its_outline() {
        let clip = clip_with_objects(|t| if (3..12).contains(&t) { vec![((20 + t / 3, 14), false)] } else { vec![] }, 16);
        let seed = BBox::new(22.0, 14.0, 10.0, 10.0).unwrap();
        let tr = track_bidirectional(&clip, 6, &seed, &TrackerConfig::default(), 16).unwrap();
        assert_eq!(tr.frames(), 3..12);
        assert_eq!(tr.box_at(10).unwrap().x, 23.0);
    }

    #[test]
    fn does_not_jump_to_a_nearby_twin() {
        // The target vanishes at frame 10; an identical object sits 8 px away.
        let clip = clip_with_objects(
            |t| {
                let mut v = vec![((30, 14), true)];
                if t < 10 {
                    v.push(((20, 14), true));
                }
                v
            },
            20,
        );
        let seed = BBox::new(20.0, 14.0, 10.0, 10.0).unwrap();
        let tr = track_bidirectional(&clip, 5, &seed, &TrackerConfig::default(), 20).unwrap();
        assert_eq!(tr.frames(), 0..10);
        let loose = TrackerConfig {
            motion_penalty: 0.0,
            ..TrackerConfig::default()
        };
        assert!(track_bidirectional(&clip, 5, &seed, &loose, 20).unwrap().end() > 10);
    }

    #[test]
    fn moving_object_is_followed() {
        let clip = clip_with(|t| Some((4 + t, 10 + t / 2)), 30);
        let seed = BBox::new(4.0, 10.0, 10.0, 10.0).unwrap();
        let tr = track_bidirectional(&clip, 0, &seed, &TrackerConfig::default(), 30).unwrap();
        assert_eq!(tr.len(), 30);
        assert_eq!(tr.box_at(29).unwrap().x, 33.0);
        assert_eq!(tr.box_at(29).unwrap().y, 24.0);
    }

    #[test]
    fn unit_threshold_keeps_only_seed() {
        // Fresh sensor noise in every frame: no patch correlates perfectly.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = (0..10)
            .map(|t| {
                let data = (0..32 * 32 * 3).map(|_| rng.gen::<u8>()).collect();
                Frame {
                    video_id: "n".into(),
                    index: t,
                    image: RgbImage::from_raw(32, 32, data).unwrap(),
                }
            })
            .collect();
        let clip = VideoClip::new("n", frames, 10.0).unwrap();
        let seed = BBox::new(10.3, 8.2, 9.0, 7.0).unwrap();
        let cfg = TrackerConfig {
            similarity_threshold: 1.0,
            ..TrackerConfig::default()
        };
        let tr = track_bidirectional(&clip, 4, &seed, &cfg, 10).unwrap();
        assert_eq!((tr.start, tr.len()), (4, 1));
        assert_eq!(tr.box_at(4), Some(&seed));
        let bad = TrackerConfig {
            similarity_threshold: 1.5,
            ..TrackerConfig::default()
        };
        assert!(track_bidirectional(&clip, 4, &seed, &bad, 10).is_err());
    }

    #[test]
    fn respects_limits_and_frame_bounds() {
        let clip = clip_with(|_| Some((36, 36)), 20);
        let seed = BBox::new(36.0, 36.0, 12.0, 12.0).unwrap();
        let cfg = TrackerConfig {
            max_track_length: Some(4),
            ..TrackerConfig::default()
        };
        let tr = track_bidirectional(&clip, 10, &seed, &cfg, 12).unwrap();
        assert_eq!(tr.len(), 4);
        assert!(tr.end() <= 12);
        for b in &tr.boxes {
            assert!(b.right() <= 48.0 && b.bottom() <= 48.0);
        }
        assert!(track_bidirectional(&clip, 10, &BBox::new(60.0, 0.0, 5.0, 5.0).unwrap(), &cfg, 20).is_err());
    }
}
