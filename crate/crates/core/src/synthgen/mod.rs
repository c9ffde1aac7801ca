//! Deterministic synthetic egocentric-style benchmark.
//!
//! Each video shows a static world through a camera that drifts by a few
//! pixels per frame. Objects are static in the world and appear or vanish on
//! scripted schedules:
//!
//! ```text
//! frame 0 ...... [crop appearance] .... [gt track] ........ query frame
//! target:          visible                visible    absent
//! distractors:              visible from some frame up to the end
//! ```
//!
//! The query crop is cut from an earlier appearance of the target, so it
//! differs from the response track in camera position and lighting.
//! Distractors share the target's shape and differ in colour (by a
//! configured margin) and possibly texture. Per-video randomness comes from
//! `seed::derive(spec.seed, video_index)`, so videos are independent of
//! generation order.

pub mod render;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_dataset, write_json, Dataset, VideoEntry};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::seed::derive;
use crate::types::{AnnotationRecord, CropSource, Frame, ResponseTrack, VideoClip, VisualQuery};
pub use render::{render_frame, FrameState, ObjectInstance, RenderedFrame, Shape, Texture, World, PALETTE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// `(height, width)` in pixels.
    pub resolution: (usize, usize),
    /// Target plus unrelated clutter objects per video.
    pub num_instances: usize,
    pub distractors_per_target: usize,
    pub blur_probability: f64,
    pub lighting_jitter: f64,
    pub fps: f64,
    /// Object side lengths are drawn from this inclusive range.
    pub object_size: (usize, usize),
    /// Minimum L∞ distance between target and distractor fills.
    pub distractor_color_margin: f64,
    /// Largest camera offset from the world origin, per axis.
    pub camera_range: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 10,
            frames_per_video: 120,
            resolution: (64, 64),
            num_instances: 3,
            distractors_per_target: 2,
            blur_probability: 0.1,
            lighting_jitter: 0.2,
            fps: 10.0,
            object_size: (10, 15),
            distractor_color_margin: 0.25,
            camera_range: 8,
        }
    }
}

/// Shortest clip that fits the appearance schedule.
pub const MIN_FRAMES: usize = 40;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        let (h, w) = self.resolution;
        if self.num_videos == 0 || self.num_instances == 0 {
            return fail("synthgen.num_videos and synthgen.num_instances must be at least 1".into());
        }
        if self.frames_per_video < MIN_FRAMES {
            return fail(format!("synthgen.frames_per_video must be at least {MIN_FRAMES}"));
        }
        for (name, p) in [
            ("blur_probability", self.blur_probability),
            ("lighting_jitter", self.lighting_jitter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("synthgen.{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(0.0..=0.4).contains(&self.distractor_color_margin) {
            return fail(format!(
                "synthgen.distractor_color_margin must lie in [0, 0.4], got {}",
                self.distractor_color_margin
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail("synthgen.fps must be positive".into());
        }
        let (lo, hi) = self.object_size;
        if lo < 4 || lo > hi {
            return fail(format!("synthgen.object_size {:?} must satisfy 4 <= min <= max", self.object_size));
        }
        let objects = self.num_instances + self.distractors_per_target;
        let usable = |side: usize| side.saturating_sub(2 * GAP + self.camera_range);
        let area = usable(w) * usable(h);
        if hi > usable(w.min(h)) || objects * (hi + GAP) * (hi + GAP) > area {
            return fail(format!(
                "synthgen: {objects} objects of size up to {hi} do not fit a {w}x{h} frame"
            ));
        }
        Ok(())
    }
}

/// Spacing between objects and between objects and the frame border.
const GAP: usize = 3;

/// `"<color> <shape>"` for every palette colour and shape.
pub fn catalog_titles() -> Vec<String> {
    PALETTE
        .iter()
        .flat_map(|(c, _)| Shape::ALL.iter().map(move |s| format!("{c} {}", s.name())))
        .collect()
}

/// Generates the dataset in memory.
pub fn generate_dataset(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let entries = (0..spec.num_videos)
        .map(|i| generate_video(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { entries })
}

/// Generates the dataset and writes it under `root`, with `spec.json`.
pub fn generate(spec: &SceneSpec, root: &Path) -> Result<Dataset> {
    let ds = generate_dataset(spec)?;
    save_dataset(root, &ds)?;
    write_json(&root.join("spec.json"), spec)?;
    Ok(ds)
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:04}")
}

/// Role of each object in a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Distractor,
    Clutter,
}

/// A generated video with its hidden scene description.
#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub world: World,
    pub roles: Vec<Role>,
    pub states: Vec<FrameState>,
    pub frames: Vec<RenderedFrame>,
}

fn draw_instances(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<ObjectInstance>, Vec<Role>, usize) {
    let (lo, hi) = spec.object_size;
    let size = |rng: &mut ChaCha8Rng| (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let mut objects = Vec::new();
    let mut roles = Vec::new();
    let target_shape = *Shape::ALL.choose(rng).expect("non-empty");
    let color_idx = rng.gen_range(0..PALETTE.len());
    let target = ObjectInstance {
        instance_id: 0,
        shape: target_shape,
        color: PALETTE[color_idx].1,
        texture: *Texture::ALL.choose(rng).expect("non-empty"),
        size: size(rng),
    };
    for d in 0..spec.distractors_per_target {
        let color = shifted_color(target.color, spec.distractor_color_margin, rng);
        let texture = if rng.gen_bool(0.5) {
            target.texture
        } else {
            **Texture::ALL.iter().filter(|t| **t != target.texture).collect::<Vec<_>>().choose(rng).expect("non-empty")
        };
        objects.push(ObjectInstance {
            instance_id: 1 + d,
            shape: target_shape,
            color,
            texture,
            size: size(rng),
        });
        roles.push(Role::Distractor);
    }
    for c in 1..spec.num_instances {
        let shape = **Shape::ALL.iter().filter(|s| **s != target_shape).collect::<Vec<_>>().choose(rng).expect("non-empty");
        objects.push(ObjectInstance {
            instance_id: spec.distractors_per_target + c,
            shape,
            color: PALETTE[rng.gen_range(0..PALETTE.len())].1,
            texture: *Texture::ALL.choose(rng).expect("non-empty"),
            size: size(rng),
        });
        roles.push(Role::Clutter);
    }
    objects.insert(0, target);
    roles.insert(0, Role::Target);
    (objects, roles, color_idx)
}

/// A colour at L∞ distance of at least `margin` from `base` (and at most
/// `2·margin`), keeping every channel inside `[0.05, 1]`.
fn shifted_color(base: [f64; 3], margin: f64, rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let mut c = base;
        let ch = rng.gen_range(0..3);
        for (k, v) in c.iter_mut().enumerate() {
            let mag = if k == ch { rng.gen_range(margin..=2.0 * margin) } else { rng.gen_range(0.0..=margin) };
            *v += if rng.gen_bool(0.5) { mag } else { -mag };
        }
        if c.iter().all(|v| (0.05..=1.0).contains(v)) {
            return c;
        }
    }
}

fn place(spec: &SceneSpec, objects: &[ObjectInstance], rng: &mut ChaCha8Rng) -> Result<Vec<(i64, i64)>> {
    let (h, w) = spec.resolution;
    let r = spec.camera_range as i64;
    for _ in 0..10_000 {
        let mut placed: Vec<(i64, i64, usize, usize)> = Vec::new();
        let ok = objects.iter().all(|o| {
            let (ow, oh) = o.size;
            // World positions that stay fully in view for every camera offset.
            let (xmax, ymax) = ((w - GAP - ow) as i64, (h - GAP - oh) as i64);
            for _ in 0..200 {
                let x = rng.gen_range(r + GAP as i64..=xmax);
                let y = rng.gen_range(r + GAP as i64..=ymax);
                let clear = placed.iter().all(|&(px, py, pw, ph)| {
                    let g = GAP as i64;
                    x >= px + pw as i64 + g || px >= x + ow as i64 + g || y >= py + ph as i64 + g || py >= y + oh as i64 + g
                });
                if clear {
                    placed.push((x, y, ow, oh));
                    return true;
                }
            }
            false
        });
        if ok {
            return Ok(placed.iter().map(|p| (p.0, p.1)).collect());
        }
    }
    Err(Error::config("synthgen: could not place objects without overlap"))
}

/// Appearance schedule of one video (all spans half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub crop_span: (usize, usize),
    pub gt_span: (usize, usize),
    pub query_frame: usize,
}

fn schedule(frames: usize, rng: &mut impl Rng) -> Schedule {
    let f = frames as f64;
    let query_frame = frames - 1 - rng.gen_range(0..=(frames / 30).min(3));
    let gap = rng.gen_range((0.17 * f).round() as usize..=(0.4 * f).round() as usize);
    let gt_end = query_frame - gap;
    let len = rng.gen_range((0.07 * f).round().max(2.0) as usize..=(0.15 * f).round() as usize);
    let gt_start = gt_end - len;
    let crop_gap = rng.gen_range(3..=(gt_start / 4).max(3));
    let crop_end = gt_start - crop_gap;
    let crop_len = rng.gen_range(2..=6).min(crop_end);
    Schedule {
        crop_span: (crop_end - crop_len, crop_end),
        gt_span: (gt_start, gt_end),
        query_frame,
    }
}

fn camera_path(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<(i64, i64)> {
    let r = spec.camera_range as i64;
    let max_step = ((0.05 * spec.resolution.1 as f64).floor() as i64).max(1);
    let mut pos = (rng.gen_range(0..=r), rng.gen_range(0..=r));
    let mut vel = (0i64, 0i64);
    let mut path = Vec::with_capacity(spec.frames_per_video);
    for _ in 0..spec.frames_per_video {
        path.push(pos);
        for (p, v) in [(&mut pos.0, &mut vel.0), (&mut pos.1, &mut vel.1)] {
            if rng.gen_bool(0.3) {
                *v = (*v + rng.gen_range(-1..=1)).clamp(-max_step.min(2), max_step.min(2));
            }
            let next = *p + *v;
            if !(0..=r).contains(&next) {
                *v = -*v;
            }
            *p = (*p + *v).clamp(0, r);
        }
    }
    path
}

/// Generates one video and its scene description.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<(GeneratedVideo, Schedule, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, index as u64));
    let (h, w) = spec.resolution;
    let r = spec.camera_range;
    let (objects, roles, color_idx) = draw_instances(spec, &mut rng);
    let positions = place(spec, &objects, &mut rng)?;
    let sched = schedule(spec.frames_per_video, &mut rng);
    let (ww, wh) = (w + r, h + r);
    let base: [f64; 3] = {
        let g = rng.gen_range(0.12..0.28);
        [g + rng.gen_range(-0.03..0.03), g + rng.gen_range(-0.03..0.03), g + rng.gen_range(-0.03..0.03)]
    };
    let background = (0..ww * wh)
        .map(|_| {
            let n = rng.gen_range(-0.02..0.02);
            base.map(|c| c + n)
        })
        .collect();
    let world = World {
        width: ww,
        height: wh,
        background,
        objects,
        positions,
    };
    let title = format!("{} {}", PALETTE[color_idx].0, world.objects[0].shape.name());

    let frames = spec.frames_per_video;
    let spans: Vec<(usize, usize)> = roles
        .iter()
        .map(|role| match role {
            Role::Target => (0, 0),
            Role::Distractor => (rng.gen_range(0..=sched.gt_start_bound()), frames),
            Role::Clutter => {
                let a = rng.gen_range(0..frames / 2);
                (a, rng.gen_range(a + frames / 4..=frames))
            }
        })
        .collect();
    let cameras = camera_path(spec, &mut rng);
    let mut states = Vec::with_capacity(frames);
    let mut rendered = Vec::with_capacity(frames);
    for (t, &camera) in cameras.iter().enumerate() {
        let visible = roles
            .iter()
            .zip(&spans)
            .map(|(role, &(a, b))| match role {
                Role::Target => in_span(t, sched.crop_span) || in_span(t, sched.gt_span),
                _ => (a..b).contains(&t),
            })
            .collect();
        let state = FrameState {
            camera,
            visible,
            gain: 1.0 + 0.5 * spec.lighting_jitter * rng.gen_range(-1.0..=1.0),
            blur: rng.gen_bool(spec.blur_probability),
        };
        rendered.push(render_frame(&world, &state, w, h));
        states.push(state);
    }
    Ok((
        GeneratedVideo {
            world,
            roles,
            states,
            frames: rendered,
        },
        sched,
        title,
    ))
}

impl Schedule {
    fn gt_start_bound(&self) -> usize {
        self.gt_span.0
    }
}

fn in_span(t: usize, (a, b): (usize, usize)) -> bool {
    (a..b).contains(&t)
}

fn generate_video(spec: &SceneSpec, index: usize) -> Result<VideoEntry> {
    let (video, sched, title) = generate_scene(spec, index)?;
    let id = video_id(index);
    let frames = video
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| Frame {
            video_id: id.as_str().into(),
            index: i,
            image: f.image.clone(),
        })
        .collect();
    let clip = VideoClip::new(id.as_str(), frames, spec.fps)?;
    let target_box = |t: usize| -> Result<BBox> {
        video.frames[t].boxes[0].ok_or_else(|| Error::data(format!("video {id}: target missing at frame {t}")))
    };
    let crop_frame = (sched.crop_span.0 + sched.crop_span.1) / 2;
    let crop_box = target_box(crop_frame)?;
    let crop = clip.frames[crop_frame]
        .image
        .crop(&crop_box)
        .ok_or_else(|| Error::data(format!("video {id}: empty query crop")))?;
    let boxes = (sched.gt_span.0..sched.gt_span.1)
        .map(target_box)
        .collect::<Result<Vec<_>>>()?;
    let record = AnnotationRecord {
        video_id: clip.video_id.clone(),
        query_index: 0,
        query: VisualQuery {
            crop,
            title: Some(title),
            query_frame: sched.query_frame,
            source: Some(CropSource {
                frame: crop_frame,
                bbox: crop_box,
            }),
        },
        gt_track: ResponseTrack::new(sched.gt_span.0, boxes)?,
    };
    Ok(VideoEntry {
        clip,
        records: vec![record],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            num_videos: 3,
            frames_per_video: 60,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn validation() {
        assert!(SceneSpec::default().validate().is_ok());
        let bad = [
            SceneSpec { num_videos: 0, ..SceneSpec::default() },
            SceneSpec { frames_per_video: 10, ..SceneSpec::default() },
            SceneSpec { blur_probability: 1.5, ..SceneSpec::default() },
            SceneSpec { num_instances: 40, ..SceneSpec::default() },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SceneSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_invariants() {
        let spec = SceneSpec {
            num_videos: 8,
            ..small_spec()
        };
        for i in 0..spec.num_videos {
            let (v, s, title) = generate_scene(&spec, i).unwrap();
            assert!(catalog_titles().contains(&title));
            let q = s.query_frame;
            assert!(s.crop_span.1 < s.gt_span.0 && s.gt_span.1 <= q && q < spec.frames_per_video);
            for t in 0..spec.frames_per_video {
                let present = v.frames[t].boxes[0].is_some();
                let scheduled = in_span(t, s.crop_span) || in_span(t, s.gt_span);
                assert_eq!(present, scheduled, "video {i} frame {t}");
                let distractors = v
                    .roles
                    .iter()
                    .zip(&v.frames[t].boxes)
                    .filter(|(r, b)| **r == Role::Distractor && b.is_some())
                    .count();
                if t >= s.gt_span.0 {
                    assert_eq!(distractors, spec.distractors_per_target);
                }
            }
            // Distractors share the target shape and differ in colour.
            for (o, r) in v.world.objects.iter().zip(&v.roles) {
                if *r == Role::Distractor {
                    assert_eq!(o.shape, v.world.objects[0].shape);
                    let d = o
                        .color
                        .iter()
                        .zip(&v.world.objects[0].color)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(d >= spec.distractor_color_margin - 1e-12);
                }
            }
        }
    }

    #[test]
    fn camera_steps_are_bounded() {
        let spec = small_spec();
        let (v, _, _) = generate_scene(&spec, 1).unwrap();
        let bound = (0.05 * spec.resolution.1 as f64) as i64;
        for p in v.states.windows(2) {
            assert!((p[0].camera.0 - p[1].camera.0).abs() <= bound);
            assert!((p[0].camera.1 - p[1].camera.1).abs() <= bound);
        }
    }

    #[test]
    fn gt_boxes_match_rasterized_mask_bounds() {
        let spec = SceneSpec {
            blur_probability: 0.0,
            lighting_jitter: 0.0,
            ..small_spec()
        };
        let (v, s, _) = generate_scene(&spec, 0).unwrap();
        let t = s.gt_span.0;
        let b = v.frames[t].boxes[0].unwrap();
        // Oracle: re-render with only the target visible and diff against
        // the render with every object hidden.
        let mut only = v.states[t].clone();
        only.visible = vec![false; only.visible.len()];
        let empty = render_frame(&v.world, &only, 64, 64).image;
        only.visible[0] = true;
        let with = render_frame(&v.world, &only, 64, 64).image;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..64 {
            for x in 0..64 {
                if (0..3).any(|c| empty.get_u8(x, y, c) != with.get_u8(x, y, c)) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        let oracle = BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
        assert!(iou(&b, &oracle) >= 0.9);
    }

    #[test]
    fn no_distractors_when_disabled() {
        let spec = SceneSpec {
            distractors_per_target: 0,
            ..small_spec()
        };
        let (v, _, _) = generate_scene(&spec, 0).unwrap();
        assert!(v.roles.iter().all(|r| *r != Role::Distractor));
    }
}
