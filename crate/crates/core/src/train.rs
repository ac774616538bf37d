//! Batching, augmentation, class weighting, the training loop, metrics on
//! original-resolution clouds and the noise sweep.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Adam, EngineError, Graph, Real};
use crate::io::{generate_scene, CloudError, PointCloud, SceneError, SceneSpec, UNLABELED};
use crate::network::{argmax_rows, assemble_inputs, Model, NetworkError, NetworkSpec, PlanSet};
use crate::precompute::{build_hierarchy, Hierarchy, HierarchyConfig, PlanError};
use crate::par;
use crate::spatial::HashGrid;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("no labeled points")]
    NoLabels,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {source}; largest weight {max_weight:e}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        max_weight: f64,
        source: EngineError,
    },
    #[error("prediction {label} of point {index} is not below the class count {classes}")]
    Prediction { index: usize, label: u32, classes: usize },
    #[error("{predictions} predictions for {truth} ground-truth points")]
    Length { predictions: usize, truth: usize },
    #[error("{0}")]
    Callback(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchMode {
    WholeScene,
    /// All points within `radius` meters of a random labeled point.
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    NegLogHist,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch: BatchMode,
    pub rotations: usize,
    pub class_weights: ClassWeightMode,
    /// Noise added to synthetic scenes, in meters.
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            seed: 0,
            lr: 1e-4,
            batch: BatchMode::Sphere { radius: 6.0 },
            rotations: 8,
            class_weights: ClassWeightMode::NegLogHist,
            noise_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if let BatchMode::Sphere { radius } = self.batch {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(TrainError::Config(format!("sphere radius must be positive, got {radius}")));
            }
        }
        if self.rotations == 0 {
            return Err(TrainError::Config("at least one rotation is required".into()));
        }
        // lr = 0 is accepted: it makes a run that leaves the weights untouched
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TrainError::Config(format!("noise must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// `w_c = -ln(count_c / total)` over labeled points; an absent class is
/// treated as seen once.
pub fn class_weights(labels: &[u32], classes: usize) -> Result<Vec<f64>, TrainError> {
    let mut counts = vec![0u64; classes];
    for (index, &label) in labels.iter().enumerate().filter(|(_, &l)| l != UNLABELED) {
        let slot = counts
            .get_mut(label as usize)
            .ok_or(CloudError::LabelRange { index, label, classes })?;
        *slot += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(TrainError::NoLabels);
    }
    Ok(counts
        .iter()
        .map(|&c| -((c.max(1) as f64) / total as f64).ln())
        .collect())
}

/// Points of one batch in sphere mode: everything strictly within `radius`
/// of a uniformly drawn labeled point.
fn sphere_batch(cloud: &PointCloud, radius: f64, rng: &mut ChaCha8Rng) -> Result<PointCloud, TrainError> {
    let labels = cloud.labels().ok_or(TrainError::NoLabels)?;
    let labeled: Vec<usize> = (0..cloud.len()).filter(|&i| labels[i] != UNLABELED).collect();
    if labeled.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let center = cloud.positions()[labeled[rng.gen_range(0..labeled.len())]];
    let grid = HashGrid::build(cloud.positions(), radius.max(0.05));
    let members: Vec<usize> = grid.within(&center, radius).into_iter().map(|i| i as usize).collect();
    Ok(cloud.select(&members))
}

/// Training batches drawn from one labeled scene.
pub fn make_batches(cloud: &PointCloud, mode: BatchMode, seed: u64) -> Result<Vec<PointCloud>, TrainError> {
    if cloud.labels().is_none() {
        return Err(TrainError::NoLabels);
    }
    match mode {
        BatchMode::WholeScene => Ok(vec![cloud.clone()]),
        BatchMode::Sphere { radius } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(vec![sphere_batch(cloud, radius, &mut rng)?])
        }
    }
}

/// Copies rotated by `2πk / count` about the vertical axis through the centroid.
pub fn rotate_augment(cloud: &PointCloud, count: usize) -> Vec<PointCloud> {
    let c = cloud.centroid();
    (0..count)
        .map(|k| {
            if k == 0 {
                return cloud.clone();
            }
            let (s, co) = (std::f64::consts::TAU * k as f64 / count as f64).sin_cos();
            let pts = cloud
                .positions()
                .iter()
                .map(|p| {
                    let (x, y) = (p[0] - c[0], p[1] - c[1]);
                    [c[0] + co * x - s * y, c[1] + s * x + co * y, p[2]]
                })
                .collect();
            cloud.with_positions(pts).expect("rotation keeps points finite")
        })
        .collect()
}

/// One batch ready for the network: plans, inputs and level-0 labels.
pub struct Prepared<T> {
    pub hierarchy: Hierarchy,
    inputs: crate::engine::Tensor<T>,
    labels: Vec<u32>,
}

impl<T: Real> Prepared<T> {
    pub fn new(cloud: &PointCloud, hcfg: &HierarchyConfig, spec: &NetworkSpec) -> Result<Self, TrainError> {
        cloud.validate_labels(spec.classes)?;
        let hierarchy = build_hierarchy(cloud, hcfg)?;
        let inputs = assemble_inputs(&hierarchy.base_cloud, &hierarchy.levels[0].geometry.frames, spec)?;
        let labels = hierarchy.base_cloud.labels().ok_or(TrainError::NoLabels)?.to_vec();
        Ok(Self {
            hierarchy,
            inputs,
            labels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub seconds: f64,
}

/// One forward/backward/update step; returns the loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam,
    batch: &Prepared<T>,
    weights: &[T],
) -> Result<f64, EngineError> {
    let plans = PlanSet::new(&batch.hierarchy).map_err(|e| match e {
        NetworkError::Engine(e) => e,
        other => EngineError::Shape(other.to_string()),
    })?;
    let mut g = Graph::new();
    let step = (|| {
        let logits = model
            .forward(&mut g, &plans, batch.inputs.clone())
            .map_err(|e| match e {
                NetworkError::Engine(e) => e,
                other => EngineError::Shape(other.to_string()),
            })?;
        let loss = g.weighted_cross_entropy(logits, &batch.labels, weights)?;
        let grads = g.backward(loss)?;
        Ok::<_, EngineError>((g.value(loss).data[0].as_f64(), grads.params()))
    })();
    let (loss, grads) = step.map_err(|e| tag_activation(e, g.max_abs()))?;
    adam.step(&mut model.params, &grads)?;
    Ok(loss)
}

fn tag_activation(e: EngineError, max_abs: f64) -> EngineError {
    match e {
        EngineError::NonFinite { op, detail } => EngineError::NonFinite {
            op,
            detail: format!("{detail} (largest recorded magnitude {max_abs:e})"),
        },
        other => other,
    }
}

fn weights_for<T: Real>(scenes: &[PointCloud], classes: usize, mode: ClassWeightMode) -> Result<Vec<T>, TrainError> {
    let labels: Vec<u32> = scenes
        .iter()
        .flat_map(|s| s.labels().unwrap_or(&[]).iter().copied())
        .collect();
    let w = match mode {
        ClassWeightMode::NegLogHist => class_weights(&labels, classes)?,
        ClassWeightMode::Uniform => {
            if !labels.iter().any(|&l| l != UNLABELED) {
                return Err(TrainError::NoLabels);
            }
            vec![1.0; classes]
        }
    };
    Ok(w.into_iter().map(T::from_f64).collect())
}

/// Train for epochs `start_epoch + 1 ..= cfg.epochs`.
///
/// Every epoch visits each scene under each rotation once, in an order drawn
/// from the seed and epoch number, so a resumed run replays the same
/// sequence. Whole-scene plans are built once; sphere batches are rebuilt
/// every epoch. `on_epoch` runs after each epoch (checkpointing, logging).
pub fn train<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam,
    scenes: &[PointCloud],
    hcfg: &HierarchyConfig,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochStats, &Model<T>, &Adam) -> Result<(), TrainError>,
) -> Result<Vec<EpochStats>, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let spec = model.spec.clone();
    let weights = weights_for::<T>(scenes, spec.classes, cfg.class_weights)?;
    adam.lr = cfg.lr;
    let mut cached: Vec<Prepared<T>> = Vec::new();
    if cfg.batch == BatchMode::WholeScene {
        for scene in scenes {
            for rotated in rotate_augment(scene, cfg.rotations) {
                cached.push(Prepared::new(&rotated, hcfg, &spec)?);
            }
        }
    }
    let mut history = Vec::new();
    for epoch in start_epoch + 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let jobs: Vec<(usize, usize)> = (0..scenes.len())
            .flat_map(|s| (0..cfg.rotations).map(move |r| (s, r)))
            .collect();
        let mut order = jobs.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, &(s, r)) in order.iter().enumerate() {
            let fresh;
            let batch = match cfg.batch {
                BatchMode::WholeScene => &cached[s * cfg.rotations + r],
                BatchMode::Sphere { .. } => {
                    let sub = make_batches(&scenes[s], cfg.batch, rng.gen())?.remove(0);
                    let rotated = rotate_augment(&sub, cfg.rotations).swap_remove(r);
                    fresh = Prepared::new(&rotated, hcfg, &spec)?;
                    &fresh
                }
            };
            if !batch.labels.iter().any(|&l| l != UNLABELED) {
                continue;
            }
            let loss = train_step(model, adam, batch, &weights).map_err(|source| TrainError::NonFinite {
                epoch,
                batch: b,
                max_weight: model
                    .params
                    .iter()
                    .flat_map(|(_, p)| p.value.iter())
                    .fold(0.0, |m, x| m.max(x.as_f64().abs())),
                source,
            })?;
            total += loss;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / order.len() as f64,
            batches: order.len(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} ({:.1}s)", stats.mean_loss, stats.seconds);
        on_epoch(&stats, model, adam)?;
        history.push(stats);
    }
    Ok(history)
}

/// Labels for the original points `positions`: argmax over level-0 logits,
/// carried to each point from its nearest level-0 point.
pub fn predict_full<T: Real>(
    model: &Model<T>,
    hierarchy: &Hierarchy,
    positions: &[[f64; 3]],
) -> Result<Vec<u32>, TrainError> {
    let logits = model.predict_logits(hierarchy)?;
    let base = argmax_rows(&logits);
    let level0 = &hierarchy.levels[0].geometry.positions;
    let grid = HashGrid::build(level0, hierarchy.config.base_cell);
    Ok(par::map_range(positions.len(), |i| base[grid.nearest(&positions[i])]))
}

/// Counts with rows = ground truth and columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Mean over classes present in the ground truth.
    pub mean_accuracy: f64,
    /// Mean over classes that occur in the ground truth or the predictions.
    pub mean_iou: f64,
    /// `None` where a class never occurs in the ground truth.
    pub class_accuracy: Vec<Option<f64>>,
    /// `None` where a class occurs in neither truth nor predictions.
    pub class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Metrics over points with a ground-truth label.
pub fn evaluate(predictions: &[u32], truth: &[u32], classes: usize) -> Result<Metrics, TrainError> {
    if predictions.len() != truth.len() {
        return Err(TrainError::Length {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in predictions.iter().zip(truth).enumerate() {
        if t == UNLABELED {
            continue;
        }
        if t as usize >= classes {
            return Err(TrainError::Cloud(CloudError::LabelRange {
                index: i,
                label: t,
                classes,
            }));
        }
        if p as usize >= classes {
            return Err(TrainError::Prediction {
                index: i,
                label: p,
                classes,
            });
        }
        cm.counts[t as usize * classes + p as usize] += 1;
    }
    metrics_from(cm)
}

pub fn metrics_from(cm: ConfusionMatrix) -> Result<Metrics, TrainError> {
    let total = cm.total();
    if total == 0 {
        return Err(TrainError::NoLabels);
    }
    let n = cm.classes;
    let diag: u64 = (0..n).map(|c| cm.get(c, c)).sum();
    let mut class_accuracy = Vec::with_capacity(n);
    let mut class_iou = Vec::with_capacity(n);
    for c in 0..n {
        let (tp, row, col) = (cm.get(c, c) as f64, cm.row_sum(c) as f64, cm.col_sum(c) as f64);
        class_accuracy.push((row > 0.0).then(|| tp / row));
        class_iou.push((row + col > 0.0).then(|| tp / (row + col - tp)));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(Metrics {
        overall_accuracy: diag as f64 / total as f64,
        mean_accuracy: mean(&class_accuracy),
        mean_iou: mean(&class_iou),
        class_accuracy,
        class_iou,
        confusion: cm,
    })
}

/// Fixed train/test split of synthetic rooms.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub train: Vec<SceneSpec>,
    pub test: SceneSpec,
    /// Seed for point sampling; scene `i` uses `sample_seed + i`, the test scene the next one.
    pub sample_seed: u64,
}

impl Suite {
    /// Rooms laid out from `train_seeds` and `test_seed`, all with noise `sigma`.
    pub fn rooms(train_seeds: &[u64], test_seed: u64, sigma: f64) -> Self {
        Self {
            train: train_seeds.iter().map(|&s| SceneSpec::room(s, sigma)).collect(),
            test: SceneSpec::room(test_seed, sigma),
            sample_seed: 1000,
        }
    }

    pub fn with_noise(&self, sigma: f64) -> Self {
        Self {
            train: self.train.iter().cloned().map(|s| s.with_noise(sigma)).collect(),
            test: self.test.clone().with_noise(sigma),
            sample_seed: self.sample_seed,
        }
    }

    pub fn sample(&self) -> Result<(Vec<PointCloud>, PointCloud), TrainError> {
        let train = self
            .train
            .iter()
            .enumerate()
            .map(|(i, s)| generate_scene(s, self.sample_seed + i as u64))
            .collect::<Result<Vec<_>, _>>()?;
        let test = generate_scene(&self.test, self.sample_seed + self.train.len() as u64)?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub metrics: Metrics,
    pub losses: Vec<EpochStats>,
    pub seconds: f64,
}

/// Train a fresh model on the suite's training rooms and score it on the
/// original points of the test room.
pub fn run_suite<T: Real>(
    suite: &Suite,
    spec: &NetworkSpec,
    hcfg: &HierarchyConfig,
    cfg: &TrainConfig,
) -> Result<SuiteResult, TrainError> {
    let start = Instant::now();
    let (train_scenes, test) = suite.sample()?;
    let mut model = Model::<T>::new(spec.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.lr);
    let losses = train(&mut model, &mut adam, &train_scenes, hcfg, cfg, 0, |_, _, _| Ok(()))?;
    let h = build_hierarchy(&test, hcfg)?;
    let pred = predict_full(&model, &h, test.positions())?;
    let metrics = evaluate(&pred, test.labels().ok_or(TrainError::NoLabels)?, spec.classes)?;
    Ok(SuiteResult {
        metrics,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct NoiseRow {
    pub sigma: f64,
    pub result: SuiteResult,
}

/// One full train/evaluate run per noise level.
pub fn noise_harness<T: Real>(
    suite: &Suite,
    sigmas: &[f64],
    spec: &NetworkSpec,
    hcfg: &HierarchyConfig,
    cfg: &TrainConfig,
) -> Result<Vec<NoiseRow>, TrainError> {
    sigmas
        .iter()
        .map(|&sigma| {
            log::info!("noise sweep: sigma = {sigma}");
            let run_cfg = TrainConfig {
                noise_sigma: sigma,
                ..*cfg
            };
            Ok(NoiseRow {
                sigma,
                result: run_suite::<T>(&suite.with_noise(sigma), spec, hcfg, &run_cfg)?,
            })
        })
        .collect()
}
