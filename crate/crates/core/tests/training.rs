use vqlab::experiment::{Benchmark, ExperimentConfig};
use vqlab::heads::Variant;
use vqlab::train::fit;

fn config(samplers: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synthgen.num_videos = 50;
    cfg.synthgen.seed = 3;
    cfg.train.seed = 3;
    cfg.train.head.variant = Variant::CocoCond;
    cfg.train.total_steps = 2000;
    cfg.train.sampler.bps_enabled = samplers;
    cfg.train.sampler.nufs_enabled = samplers;
    cfg
}

/// Mean batch loss over the last 100 of 2,000 steps.
fn final_loss(cfg: &ExperimentConfig) -> f64 {
    let bench = Benchmark::generate(cfg).unwrap();
    let outcome = fit(&bench.dataset, &bench.cache, &[], &cfg.train, |_| Ok(())).unwrap();
    assert_eq!(outcome.losses.len(), 2000);
    let tail = &outcome.losses[1900..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
fn coco_cond_halves_the_constant_predictor_loss() {
    let loss = final_loss(&config(true));
    let baseline = std::f64::consts::LN_2;
    assert!(loss < 0.5 * baseline, "final loss {loss} vs baseline {baseline}");
}

#[test]
fn coco_cond_fits_the_annotated_stream() {
    let loss = final_loss(&config(false));
    let baseline = std::f64::consts::LN_2;
    assert!(loss < 0.5 * baseline, "final loss {loss} vs baseline {baseline}");
}
