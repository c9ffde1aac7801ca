use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vqlab::dataset::{read_json, AnnotationJson};
use vqlab::experiment::DetectionRecord;
use vqlab::localize::{PeakJson, PredictionRecord};
use vqlab::types::Detection;

fn vqlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqlab")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 4] = ["--set", "synthgen.num_videos=5", "--set", "synthgen.frames_per_video=60"];

fn synthgen(dir: &Path) {
    let mut args = vec!["synthgen", "--out", s(dir), "--seed", "4"];
    args.extend(SMALL);
    ok(&vqlab(&args));
}

#[test]
fn eval_det_on_annotations_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthgen(&data);
    let ann: Vec<AnnotationJson> = read_json(&data.join("annotations.json")).unwrap();
    let mut records = Vec::new();
    let mut per_video = std::collections::BTreeMap::<String, usize>::new();
    for a in &ann {
        let q = per_video.entry(a.video_id.clone()).or_default();
        for (i, b) in a.response_track.boxes.iter().enumerate() {
            records.push(DetectionRecord {
                video_id: a.video_id.clone(),
                query_index: *q,
                frame: a.response_track.start + i,
                detections: vec![Detection::new(*b, 1.0).unwrap()],
            });
        }
        *q += 1;
    }
    let preds = tmp.path().join("dets.json");
    fs::write(&preds, serde_json::to_string(&records).unwrap()).unwrap();
    let out_dir = tmp.path().join("eval");
    let stdout = ok(&vqlab(&[
        "eval-det",
        "--data",
        s(&data),
        "--predictions",
        s(&preds),
        "--split",
        "all",
        "--out",
        s(&out_dir),
    ]));
    assert!(stdout.contains("AP = 1.0000"), "{stdout}");
    let results: serde_json::Value = read_json(&out_dir.join("results.json")).unwrap();
    for key in ["AP", "AP50", "AP75", "AR@10"] {
        assert_eq!(results[key], 1.0, "{key}");
    }
    assert!(results["dataset_hash"].as_str().unwrap().len() == 64);
    assert!(results["config_echo"]["train"].is_object());
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vqlab(&["train", "--data", "nowhere", "--out", s(tmp.path()), "--set", "train.sampler.bps_enable=true"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.sampler.bps_enable") && err.contains("unknown field"), "{err}");

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[tracker]\nsimilarity_threshold = 0.5\nspeed = 2\n").unwrap();
    let out = vqlab(&["synthgen", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tracker.speed"));
}

#[test]
fn config_file_and_overrides_are_layered() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "test_fraction = 0.4\n[synthgen]\nnum_videos = 3\nframes_per_video = 50\nfps = 5.0\n").unwrap();
    let data = tmp.path().join("data");
    let stdout = ok(&vqlab(&[
        "synthgen",
        "--config",
        s(&cfg),
        "--set",
        "synthgen.num_videos=2",
        "--seed",
        "9",
        "--out",
        s(&data),
    ]));
    assert!(stdout.contains("wrote 2 videos"), "{stdout}");
    let resolved: toml::Table = toml::from_str(&fs::read_to_string(data.join("resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(resolved["test_fraction"].as_float(), Some(0.4));
    assert_eq!(resolved["synthgen"]["num_videos"].as_integer(), Some(2));
    assert_eq!(resolved["synthgen"]["frames_per_video"].as_integer(), Some(50));
    assert_eq!(resolved["synthgen"]["seed"].as_integer(), Some(9));
    assert_eq!(resolved["train"]["seed"].as_integer(), Some(9));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // Missing dataset: data error.
    let out = vqlab(&["pufs", "--data", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(3));
    // Invalid value: configuration error.
    let out = vqlab(&["synthgen", "--out", s(&tmp.path().join("g")), "--set", "synthgen.frames_per_video=3"]);
    assert_eq!(out.status.code(), Some(2));
    // A non-empty output directory needs --overwrite.
    let data = tmp.path().join("data");
    synthgen(&data);
    let mut again = vec!["synthgen", "--out", s(&data), "--seed", "4"];
    again.extend(SMALL);
    assert_eq!(vqlab(&again).status.code(), Some(2));
    again.push("--overwrite");
    ok(&vqlab(&again));
    // An exploding learning rate: numeric divergence.
    let out = vqlab(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("t")),
        "--set",
        "train.schedule.initial=1e200",
        "--set",
        "train.total_steps=10",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

/// synthgen, train, predict and eval-vq2d into `root`; returns the results
/// file.
fn recipe(root: &Path) -> Vec<u8> {
    let data = root.join("data");
    synthgen(&data);
    let train = root.join("train");
    let steps = ["--set", "train.total_steps=12", "--set", "train.schedule.decay_steps=[8]", "--seed", "4"];
    let mut args = vec!["train", "--data", s(&data), "--out", s(&train)];
    args.extend(steps);
    args.extend(SMALL);
    ok(&vqlab(&args));
    let pred = root.join("pred");
    let ckpt = train.join("checkpoint.ckpt");
    let mut args = vec!["predict", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&pred)];
    args.extend(steps);
    args.extend(SMALL);
    ok(&vqlab(&args));
    let eval = root.join("eval");
    let preds = pred.join("predictions.json");
    let mut args = vec!["eval-vq2d", "--data", s(&data), "--predictions", s(&preds), "--out", s(&eval)];
    args.extend(steps);
    args.extend(SMALL);
    ok(&vqlab(&args));
    fs::read(eval.join("results.json")).unwrap()
}

#[test]
fn fixed_seed_recipe_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = recipe(a.path());
    let rb = recipe(b.path());
    assert_eq!(ra, rb);
    let doc: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    for key in ["tAP25", "stAP25", "rec%", "Succ", "fp_rate_on_negatives", "dataset_hash", "config_echo"] {
        assert!(doc.get(key).is_some(), "{key}");
    }
    assert_eq!(
        fs::read(a.path().join("train/checkpoint.ckpt")).unwrap(),
        fs::read(b.path().join("train/checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn plot_timeline_outputs_match_the_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthgen(&data);
    let ann: Vec<AnnotationJson> = read_json(&data.join("annotations.json")).unwrap();
    let a = &ann[1];
    let q = a.query.frame_idx;
    let timeline: Vec<(usize, f64)> = (0..q).step_by(2).map(|f| (f, 0.25)).collect();
    let pred = PredictionRecord {
        video_id: a.video_id.clone(),
        query_index: 0,
        response_track: a.response_track.clone(),
        peak: PeakJson {
            frame: a.response_track.start,
            confidence: 0.25,
        },
        timeline: timeline.clone(),
        timeline_boxes: Vec::new(),
    };
    let preds = tmp.path().join("preds.json");
    fs::write(&preds, serde_json::to_string(&[pred]).unwrap()).unwrap();
    let out = tmp.path().join("plot");
    let query = format!("{}:0", a.video_id);
    ok(&vqlab(&["plot-timeline", "--data", s(&data), "--predictions", s(&preds), "--query", &query, "--out", s(&out)]));
    let stem = out.join(format!("timeline_{}_0", a.video_id));

    // CSV is a pass-through of the timeline.
    let csv = fs::read_to_string(stem.with_extension("csv")).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (f, v) = l.split_once(',').unwrap();
            (f.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows, timeline);

    // Shading covers exactly the GT frames on the frame axis.
    let meta: serde_json::Value = read_json(&stem.with_extension("json")).unwrap();
    let area = &meta["area"];
    let px = |k: &str| area[k].as_u64().unwrap() as u32;
    let (x0, x1, y0, y1) = (px("x0"), px("x1"), px("y0"), px("y1"));
    let (lo, hi) = (meta["frame_min"].as_u64().unwrap() as f64, meta["frame_max"].as_u64().unwrap() as f64);
    let x_of = |f: usize| x0 + (((f as f64 - lo) / (hi - lo)) * (x1 - x0) as f64).round() as u32;
    let gt_first = a.response_track.start;
    let gt_last = gt_first + a.response_track.boxes.len() - 1;
    assert_eq!(meta["gt_span"]["start_frame"].as_u64().unwrap() as usize, gt_first);
    assert_eq!(meta["gt_span"]["end_frame"].as_u64().unwrap() as usize, gt_last);
    let (xs, xe) = (x_of(gt_first), x_of(gt_last));
    assert_eq!(meta["gt_span"]["x_start"].as_u64().unwrap() as u32, xs);
    assert_eq!(meta["gt_span"]["x_end"].as_u64().unwrap() as u32, xe);
    assert_eq!(meta["points"].as_u64().unwrap() as usize, timeline.len());

    let img = image::open(stem.with_extension("png")).unwrap().to_rgb8();
    let shade = [200u8, 235, 200];
    let peak_x = meta["peak"]["x"].as_u64().unwrap() as u32;
    let row = y0 + 2;
    assert!(row < y1);
    for x in xs..=xe {
        if x != peak_x {
            assert_eq!(img.get_pixel(x, row).0, shade, "x = {x}");
        }
    }
    assert_ne!(img.get_pixel(xs - 1, row).0, shade);
    assert_ne!(img.get_pixel(xe + 1, row).0, shade);
    // The constant score is drawn as one flat line.
    let score_y = y1 - (0.25 * (y1 - y0) as f64).round() as u32;
    let first = x_of(timeline[0].0);
    let last = x_of(timeline.last().unwrap().0);
    for x in first..=last {
        let p = img.get_pixel(x, score_y).0;
        assert_eq!(p, [30, 80, 200], "score line missing at x = {x}");
    }

    let missing = vqlab(&["plot-timeline", "--data", s(&data), "--predictions", s(&preds), "--query", "vid9999:0", "--out", s(&out), "--overwrite"]);
    assert_eq!(missing.status.code(), Some(3));
}
