//! `vqlab` command-line front end.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for data
//! errors, 4 for numeric divergence during training.

mod config;
mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vqlab::dataset::{dataset_hash, load_dataset, read_json, write_json, AnnotationJson, Dataset};
use vqlab::experiment::{
    ablation_grid, detect_annotated, detection_frames, evaluate_predictions, predict, Benchmark, DetectionRecord,
    ExperimentConfig, Results,
};
use vqlab::features::{FeatureCache, FeatureExtractor};
use vqlab::localize::PredictionRecord;
use vqlab::metrics::{coco_thresholds, detection_ap};
use vqlab::sampling::{pufs_dataset, pufs_from_json, pufs_to_json};
use vqlab::train::{fit, Checkpoint};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "{m}"),
        }
    }
}

impl From<vqlab::Error> for CliError {
    fn from(e: vqlab::Error) -> Self {
        match e {
            vqlab::Error::Config(_) => CliError::Config(e.to_string()),
            vqlab::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "vqlab", version, about = "Visual query localization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.total_steps=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed of the generator and of training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark.
    Synthgen(Common),
    /// Train a head on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Pseudo pairs from `vqlab pufs` (mined on the fly when P-UFS is
        /// enabled and no file is given).
        #[arg(long)]
        pufs: Option<PathBuf>,
    },
    /// Mine P-UFS pseudo pairs from the training split.
    Pufs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a trained head: localization predictions and detections on
    /// annotated frames.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Detection AP on annotated frames from a detection file.
    EvalDet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// VQ2D metrics from a prediction file.
    EvalVq2d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Plot the score timeline of one query.
    PlotTimeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// `<video_id>:<query_index>`.
        #[arg(long)]
        query: String,
    },
    /// Train and evaluate the head variants and sampler combinations on one
    /// generated benchmark.
    Ablation(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synthgen(c) => cmd_synthgen(&c),
        Command::Train { common, data, pufs } => cmd_train(&common, &data, pufs.as_deref()),
        Command::Pufs { common, data } => cmd_pufs(&common, &data),
        Command::Predict {
            common,
            data,
            checkpoint,
            split,
        } => cmd_predict(&common, &data, &checkpoint, split),
        Command::EvalDet {
            common,
            data,
            predictions,
            split,
        } => cmd_eval_det(&common, &data, &predictions, split),
        Command::EvalVq2d {
            common,
            data,
            predictions,
            split,
        } => cmd_eval_vq2d(&common, &data, &predictions, split),
        Command::PlotTimeline {
            common,
            data,
            predictions,
            query,
        } => cmd_plot_timeline(&common, &data, &predictions, &query),
        Command::Ablation(c) => cmd_ablation(&c),
    }
}

/// Resolves the configuration, prepares the output directory and writes
/// the resolved-config echo.
fn setup(c: &Common) -> CliResult<ExperimentConfig> {
    let cfg = config::resolve(c.config.as_deref(), &c.overrides, c.seed)?;
    let occupied = fs::read_dir(&c.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !c.overwrite {
        return Err(CliError::Config(format!(
            "output directory {} is not empty (pass --overwrite to replace its files)",
            c.out.display()
        )));
    }
    fs::create_dir_all(&c.out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", c.out.display())))?;
    write_text(&c.out.join("resolved_config.toml"), &config::to_toml(&cfg)?)?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn select(dataset: &Dataset, split: Split, cfg: &ExperimentConfig) -> Dataset {
    let (train, test) = dataset.split(cfg.test_fraction);
    match split {
        Split::Train => train,
        Split::Test => test,
        Split::All => dataset.clone(),
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
        Split::All => "all",
    }
}

/// A results document: the metrics, the split, the resolved configuration
/// and the dataset hash.
#[derive(Serialize)]
struct ResultsDoc<'a, M: Serialize> {
    #[serde(flatten)]
    metrics: M,
    split: &'static str,
    dataset_hash: String,
    config_echo: &'a ExperimentConfig,
}

fn cmd_synthgen(c: &Common) -> CliResult {
    let cfg = setup(c)?;
    let videos = c.out.join("videos");
    if c.overwrite && videos.is_dir() {
        fs::remove_dir_all(&videos).map_err(|e| CliError::Data(format!("cannot clear {}: {e}", videos.display())))?;
    }
    let ds = vqlab::synthgen::generate(&cfg.synthgen, &c.out)?;
    println!(
        "wrote {} videos and {} queries to {} (dataset hash {})",
        ds.entries.len(),
        ds.num_records(),
        c.out.display(),
        dataset_hash(&ds)
    );
    Ok(())
}

fn cmd_train(c: &Common, data: &Path, pufs_file: Option<&Path>) -> CliResult {
    let cfg = setup(c)?;
    let dataset = load_dataset(data)?;
    let train = select(&dataset, Split::Train, &cfg);
    let cache = FeatureCache::new(FeatureExtractor::new(&cfg.features));
    let pufs = match (cfg.train.sampler.pufs_enabled, pufs_file) {
        (false, _) => Vec::new(),
        (true, Some(path)) => pufs_from_json(&train, &read_json::<Vec<AnnotationJson>>(path)?)?,
        (true, None) => pufs_dataset(&train, &cfg.train.effective_sampler(), &cfg.features.proposals)?,
    };
    let ckpt_dir = c.out.join("checkpoints");
    let outcome = fit(&train, &cache, &pufs, &cfg.train, |ckpt| {
        ckpt.save(&ckpt_dir.join(format!("step-{:06}.ckpt", ckpt.step)))
    })?;
    outcome.checkpoint.save(&c.out.join("checkpoint.ckpt"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{},{l:e}", i + 1).expect("write to string");
    }
    write_text(&c.out.join("losses.csv"), &csv)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps on {} queries ({} P-UFS pairs); last batch loss {last:.4}",
        cfg.train.head.variant,
        outcome.losses.len(),
        train.num_records(),
        pufs.len()
    );
    Ok(())
}

fn cmd_pufs(c: &Common, data: &Path) -> CliResult {
    let cfg = setup(c)?;
    let dataset = load_dataset(data)?;
    let train = select(&dataset, Split::Train, &cfg);
    let pairs = pufs_dataset(&train, &cfg.train.effective_sampler(), &cfg.features.proposals)?;
    let fps_of = |id: &str| train.clip(id).map_or(vqlab::dataset::DEFAULT_FPS, |c| c.fps);
    write_json(&c.out.join("pufs_pairs.json"), &pufs_to_json(fps_of, &pairs))?;
    println!("wrote {} P-UFS pairs to {}", pairs.len(), c.out.join("pufs_pairs.json").display());
    Ok(())
}

fn cmd_predict(c: &Common, data: &Path, checkpoint: &Path, split: Split) -> CliResult {
    let cfg = setup(c)?;
    let dataset = load_dataset(data)?;
    let part = select(&dataset, split, &cfg);
    let head = Checkpoint::load(checkpoint)?.head()?;
    let cache = FeatureCache::new(FeatureExtractor::new(&cfg.features));
    let preds = predict(&head, &cache, &part, &cfg.peak, &cfg.tracker)?;
    write_json(&c.out.join("predictions.json"), &preds)?;
    let dets = detect_annotated(&head, &cache, &part)?;
    write_json(&c.out.join("detections.json"), &dets)?;
    println!(
        "wrote {} predictions and {} annotated-frame detections to {}",
        preds.len(),
        dets.len(),
        c.out.display()
    );
    Ok(())
}

fn cmd_eval_det(c: &Common, data: &Path, predictions: &Path, split: Split) -> CliResult {
    let cfg = setup(c)?;
    let dataset = load_dataset(data)?;
    let part = select(&dataset, split, &cfg);
    let records: Vec<DetectionRecord> = read_json(predictions)?;
    let r = detection_ap(&detection_frames(&records, &part)?, &coco_thresholds())?;
    write_json(
        &c.out.join("results.json"),
        &ResultsDoc {
            metrics: r,
            split: split_name(split),
            dataset_hash: dataset_hash(&dataset),
            config_echo: &cfg,
        },
    )?;
    println!("AP = {:.4}  AP50 = {:.4}  AP75 = {:.4}  AR@10 = {:.4}", r.ap, r.ap50, r.ap75, r.ar10);
    Ok(())
}

fn cmd_eval_vq2d(c: &Common, data: &Path, predictions: &Path, split: Split) -> CliResult {
    let cfg = setup(c)?;
    let dataset = load_dataset(data)?;
    let part = select(&dataset, split, &cfg);
    let preds: Vec<PredictionRecord> = read_json(predictions)?;
    let r = evaluate_predictions(&preds, &part, &cfg.eval)?;
    write_json(
        &c.out.join("results.json"),
        &ResultsDoc {
            metrics: r,
            split: split_name(split),
            dataset_hash: dataset_hash(&dataset),
            config_echo: &cfg,
        },
    )?;
    let m = r.metrics;
    println!(
        "tAP25 = {:.4}  stAP25 = {:.4}  rec% = {:.2}  Succ = {:.2}  fp_rate@{} = {:.4}",
        m.tap25, m.stap25, m.rec_percent, m.succ, cfg.eval.fp_tau, r.fp_rate_on_negatives
    );
    Ok(())
}

fn cmd_plot_timeline(c: &Common, data: &Path, predictions: &Path, query: &str) -> CliResult {
    setup(c)?;
    let (video, index) = query
        .rsplit_once(':')
        .and_then(|(v, i)| Some((v, i.parse::<usize>().ok()?)))
        .ok_or_else(|| CliError::Config(format!("--query {query:?} must look like <video_id>:<query_index>")))?;
    let dataset = load_dataset(data)?;
    let preds: Vec<PredictionRecord> = read_json(predictions)?;
    let pred = preds
        .iter()
        .find(|p| p.video_id == video && p.query_index == index)
        .ok_or_else(|| CliError::Data(format!("query {query} is not in {}", predictions.display())))?;
    let (_, record) = dataset
        .records()
        .find(|(_, r)| &*r.video_id == video && r.query_index == index)
        .ok_or_else(|| CliError::Data(format!("query {query} is not annotated in {}", data.display())))?;
    let (img, meta) = plot::render(&plot::PlotInput {
        query: query.to_string(),
        timeline: &pred.timeline,
        gt_span: (record.gt_track.start, record.gt_track.last_frame()),
        peak_frame: pred.peak.frame,
        query_frame: record.query.query_frame,
    });
    let stem = format!("timeline_{video}_{index}");
    let mut csv = String::from("frame,score\n");
    for (f, s) in &pred.timeline {
        writeln!(csv, "{f},{s:?}").expect("write to string");
    }
    write_text(&c.out.join(format!("{stem}.csv")), &csv)?;
    let png = c.out.join(format!("{stem}.png"));
    img.save(&png).map_err(|e| CliError::Data(format!("cannot write {}: {e}", png.display())))?;
    write_json(&c.out.join(format!("{stem}.json")), &meta)?;
    println!("wrote {} ({} points)", png.display(), meta.points);
    Ok(())
}

fn cmd_ablation(c: &Common) -> CliResult {
    let cfg = setup(c)?;
    let bench = Benchmark::generate(&cfg)?;
    let runs_dir = c.out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", runs_dir.display())))?;
    let mut table = String::from("| run | AP | AP50 | AR@10 | tAP25 | stAP25 | rec% | Succ | fp_rate |\n");
    table.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let mut csv = String::from("run,AP,AP50,AR@10,tAP25,stAP25,rec%,Succ,fp_rate\n");
    for (i, (name, run_cfg)) in ablation_grid(&cfg).into_iter().enumerate() {
        let results: Results = bench.run(&run_cfg)?.results;
        write_json(&runs_dir.join(format!("{i:02}.json")), &results)?;
        let (d, v) = (results.detection, results.vq2d);
        let row = [
            d.ap,
            d.ap50,
            d.ar10,
            v.metrics.tap25,
            v.metrics.stap25,
            v.metrics.rec_percent,
            v.metrics.succ,
            v.fp_rate_on_negatives,
        ];
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.4}")).collect();
        writeln!(table, "| {name} | {} |", cells.join(" | ")).expect("write to string");
        writeln!(csv, "\"{name}\",{}", cells.join(",")).expect("write to string");
        println!("{name}: {}", cells.join(" "));
    }
    write_text(&c.out.join("ablation.md"), &table)?;
    write_text(&c.out.join("ablation.csv"), &csv)?;
    print!("{table}");
    Ok(())
}
