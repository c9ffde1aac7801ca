//! Training loop over the sampled stream.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, StreamState, CHECKPOINT_VERSION, MOMENTUM_PREFIX};
pub use loss::{class_weights, loss, set_loss, LossConfig};
pub use optim::{LrSchedule, Sgd};

use crate::autograd::{Graph, Tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureCache;
use crate::heads::{Head, HeadConfig};
use crate::localize::title_feature;
use crate::sampling::{build_epoch, EpochItem, SamplerConfig, TrainingPair};
use crate::seed::derive;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub sampler: SamplerConfig,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before each step (0 disables).
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Run seed, mixed into the head and sampler seeds.
    pub seed: u64,
    pub loss: LossConfig,
    /// Emit a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            sampler: SamplerConfig::default(),
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            batch_size: 8,
            total_steps: 5000,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.sampler.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.momentum must lie in [0, 1) and train.weight_decay must be non-negative"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("train.grad_clip must be non-negative (0 disables clipping)"));
        }
        Ok(())
    }

    /// Head configuration with the run seed mixed in.
    pub fn effective_head(&self) -> HeadConfig {
        HeadConfig {
            seed: derive(self.head.seed, self.seed),
            ..self.head.clone()
        }
    }

    /// Sampler configuration with the run seed mixed in.
    pub fn effective_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: derive(self.sampler.seed, self.seed),
            ..self.sampler.clone()
        }
    }
}

/// Lazily built epochs of the seeded training stream.
struct Stream<'a> {
    dataset: &'a Dataset,
    cache: &'a FeatureCache,
    sampler: SamplerConfig,
    pufs: &'a [TrainingPair],
    state: StreamState,
    items: Vec<EpochItem>,
}

impl<'a> Stream<'a> {
    fn next_batch(&mut self, size: usize) -> Result<Vec<EpochItem>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.items.is_empty() || self.state.cursor >= self.items.len() {
                if !self.items.is_empty() {
                    self.state.epoch += 1;
                    self.state.cursor = 0;
                }
                self.items = build_epoch(self.dataset, self.cache, &self.sampler, self.pufs, self.state.epoch)?;
                if self.items.is_empty() {
                    return Err(Error::Empty("training stream"));
                }
            }
            out.push(self.items[self.state.cursor].clone());
            self.state.cursor += 1;
        }
        Ok(out)
    }
}

/// Mean loss of a batch and its gradient for every head parameter.
pub fn batch_gradients(
    head: &Head,
    cache: &FeatureCache,
    batch: &[EpochItem],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let c = head.feature_dim();
    let mut g = Graph::new();
    let bound = head.params().bind(&mut g);
    let mut total = None;
    for item in batch {
        let query = item.pair.query();
        let q = cache.query(item.pair.query_key(), &query.crop)?;
        let title = title_feature(head, query.title.as_deref())?;
        let qv = g.constant(Tensor::matrix(1, c, q.0.clone()));
        let tv = title.map(|t| g.constant(Tensor::matrix(1, c, t.0)));
        let xv = g.constant(Tensor::matrix(item.set.len(), c, item.set.feature_matrix()));
        let out = head.forward(&mut g, &bound, qv, tv, xv);
        let l = set_loss(&mut g, &out, &item.labels, item.pair.gt_box(), &item.set, cfg);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let mean = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let value = g.value(mean).data[0];
    let mut grads = g.backward(mean);
    Ok((value, head.params().collect_grads(&bound, &mut grads)))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A ceiling of 0 leaves them unchanged.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// A trained head, its final checkpoint and the per-step batch losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: Head,
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

fn snapshot(cfg: &TrainConfig, head: &Head, opt: &Sgd, step: usize, stream: StreamState) -> Checkpoint {
    let mut arrays: Vec<(String, Tensor)> = head.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let momentum = head
        .params()
        .iter()
        .zip(opt.velocity())
        .map(|((n, t), v)| (format!("{MOMENTUM_PREFIX}{n}"), Tensor::new(t.shape.clone(), v.clone())))
        .collect::<Vec<_>>();
    arrays.extend(momentum);
    Checkpoint {
        config: cfg.clone(),
        feature_dim: head.feature_dim(),
        step,
        stream,
        arrays,
    }
}

/// Trains a head from its seeded initialization. `pufs` pairs are used
/// when the sampler enables P-UFS. `on_checkpoint` receives periodic
/// checkpoints. Training is single-threaded and bitwise deterministic for
/// a fixed configuration and dataset.
pub fn fit(
    dataset: &Dataset,
    cache: &FeatureCache,
    pufs: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut head = Head::new(cfg.effective_head(), cache.extractor().feature_dim())?;
    let mut opt = Sgd::new(head.params(), cfg.momentum, cfg.weight_decay);
    let sampler = cfg.effective_sampler();
    let mut stream = Stream {
        dataset,
        cache,
        state: StreamState {
            seed: sampler.seed,
            epoch: 0,
            cursor: 0,
        },
        sampler,
        pufs,
        items: Vec::new(),
    };
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch = stream.next_batch(cfg.batch_size)?;
        let (value, mut grads) = batch_gradients(&head, cache, &batch, &cfg.loss)?;
        if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(head.params_mut(), &grads, cfg.schedule.lr_at(step));
        losses.push(value);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.total_steps {
            on_checkpoint(&snapshot(cfg, &head, &opt, step + 1, stream.state))?;
        }
    }
    let checkpoint = snapshot(cfg, &head, &opt, cfg.total_steps, stream.state);
    Ok(TrainOutcome {
        head,
        checkpoint,
        losses,
    })
}
