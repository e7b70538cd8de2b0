use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{scene_loss, DetectorConfig, DetectorParams};
use super::optim::{Optimizer, OptimizerConfig};
use super::scene::{generate_scene, scene_set, SceneConfig, SyntheticScene};
use super::stats::{compute_stats, EpochStats};
use crate::error::{Error, Result};
use crate::instance::AbstractInstance;
use crate::sampler::{poll_count, score_features, top_n, PollRatioSchedule};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub scenes_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip applied to each batch gradient.
    pub grad_clip: Option<f64>,
    /// Share of the run after which the learning rate drops tenfold.
    pub lr_drop_at: Option<f64>,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    /// Poll ratio used when measuring sampler statistics.
    pub eval_alpha: f64,
    pub eval_scenes: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes_per_epoch: 128,
            batch_size: 4,
            optimizer: OptimizerConfig::adam(1e-3),
            grad_clip: Some(1.0),
            lr_drop_at: Some(2.0 / 3.0),
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            eval_alpha: 0.33,
            eval_scenes: 64,
            eval_seed: 0xE7A1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.transformer.validate()?;
        if self.scene.channels != self.detector.transformer.d_model {
            return Err(Error::contract(format!(
                "scene channels {} differ from d_model {}",
                self.scene.channels, self.detector.transformer.d_model
            )));
        }
        if self.scene.num_classes != self.detector.num_classes {
            return Err(Error::contract("scene and detector disagree on the number of classes"));
        }
        if self.scene.max_boxes > self.detector.transformer.n_queries {
            return Err(Error::contract("more boxes per scene than decoder queries"));
        }
        if self.scenes_per_epoch == 0 || self.batch_size == 0 || self.eval_scenes == 0 {
            return Err(Error::contract("scene and batch counts must be positive"));
        }
        Ok(())
    }

    pub fn eval_set(&self) -> Result<Vec<SyntheticScene>> {
        scene_set(self.eval_seed, self.eval_scenes, &self.scene)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Sampler statistics of the untrained model (epoch 0, loss not measured).
    pub initial: EpochStats,
    pub epochs: Vec<EpochStats>,
    pub params: DetectorParams,
}

/// Polled locations of every scene at poll ratio `alpha`. Only the scoring
/// network runs.
pub fn sample_indices(params: &DetectorParams, scenes: &[SyntheticScene], alpha: f64) -> Result<Vec<Vec<usize>>> {
    scenes
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let net = params.pnp.scoring.bind(&mut g);
            let fm = s.feature_map.bind(&mut g, false);
            let scores = score_features(&mut g, &fm, &net)?;
            let n = poll_count(alpha, fm.valid_len());
            Ok(top_n(&scores.ranking, n, fm.padding.as_deref()))
        })
        .collect()
}

/// Mean matched loss over `scenes` at poll ratio `alpha`.
pub fn evaluate_loss(params: &DetectorParams, scenes: &[SyntheticScene], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in scenes {
        let mut g = Graph::new();
        let net = params.bind(&mut g);
        let out = scene_loss(&mut g, &net, s, alpha)?;
        total += g.value(out.loss).item();
    }
    Ok(total / scenes.len() as f64)
}

/// Abstract set of one scene, as stored in an instance file.
pub fn snapshot_instance(params: &DetectorParams, scene: &SyntheticScene, alpha: f64) -> Result<AbstractInstance> {
    let mut g = Graph::new();
    let net = params.bind(&mut g);
    let bound = scene.feature_map.bind(&mut g, false);
    let abs = net.pnp.abstract_features(&mut g, &bound, alpha)?;
    Ok(AbstractInstance::from_abstract(&g, &abs))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
}

/// Trains from a fresh initialisation.
pub fn train(config: &TrainConfig, schedule: &mut PollRatioSchedule, epochs: usize) -> Result<TrainRun> {
    train_with_progress(config, schedule, epochs, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    schedule: &mut PollRatioSchedule,
    epochs: usize,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainRun> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = DetectorParams::init(config.detector.clone(), &mut init_rng)?;
    train_from(config, params, schedule, epochs, on_epoch)
}

/// Trains `params` for `epochs` epochs, calling `on_epoch` after each one.
pub fn train_from(
    config: &TrainConfig,
    mut params: DetectorParams,
    schedule: &mut PollRatioSchedule,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainRun> {
    config.validate()?;
    let eval = config.eval_set()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xDA7A_5EED);
    let mut optimizer = Optimizer::new(config.optimizer, &params.tensors());

    let mut previous = sample_indices(&params, &eval, config.eval_alpha)?;
    let initial = compute_stats(0, &previous, &eval, None, f64::NAN);
    let iterations = config.scenes_per_epoch.div_ceil(config.batch_size);
    let mut stats = Vec::with_capacity(epochs);
    let mut iteration = 0usize;
    let drop_after = config.lr_drop_at.map(|f| (f * epochs as f64).round() as usize);

    for epoch in 1..=epochs {
        if drop_after.is_some_and(|d| epoch == d + 1) {
            optimizer.set_lr(config.optimizer.lr() * 0.1);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for _ in 0..iterations {
            iteration += 1;
            let alpha = schedule.sample();
            let batch = config.batch_size.min(config.scenes_per_epoch - seen);
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for _ in 0..batch {
                let scene = generate_scene(&mut data_rng, &config.scene)?;
                let mut g = Graph::new();
                let net = params.bind(&mut g);
                let out = scene_loss(&mut g, &net, &scene, alpha)?;
                let loss = g.value(out.loss).item();
                if !loss.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite loss {loss} at iteration {iteration} (epoch {epoch}, alpha {alpha:.4})"
                    )));
                }
                loss_sum += loss;
                let back = g.backward(out.loss)?;
                for (acc, v) in grads.iter_mut().zip(net.vars()) {
                    let d = back.get(v);
                    acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b / batch as f64);
                }
            }
            seen += batch;
            if let Some(max_norm) = config.grad_clip {
                clip(&mut grads, max_norm);
            }
            optimizer.step(&mut params.tensors_mut(), &grads);
        }
        let current = sample_indices(&params, &eval, config.eval_alpha)?;
        let s = compute_stats(epoch, &current, &eval, Some(&previous), loss_sum / seen as f64);
        on_epoch(&s);
        stats.push(s);
        previous = current;
    }
    Ok(TrainRun {
        initial,
        epochs: stats,
        params,
    })
}

pub const STATS_HEADER: &str = "epoch,in_box_fraction,sample_iou,mean_loss";

pub fn write_stats_csv<W: Write>(stats: &[EpochStats], mut out: W) -> Result<()> {
    writeln!(out, "{STATS_HEADER}")?;
    for s in stats {
        writeln!(out, "{},{},{},{}", s.epoch, s.in_box_fraction, s.sample_iou, s.mean_loss)?;
    }
    Ok(())
}
