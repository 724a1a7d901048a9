//! Training orchestration: three parameter sets with their update rules,
//! optimizer and learning-rate schedules, and bit-exact checkpoints.
//!
//! Each step: sample two augmented views per image, discover segments on the
//! spanning view with the discovery parameters (or the cache under the
//! discrete schedule), warp them into both views, run the online (gradient)
//! and target (frozen) paths, take the contrastive loss, update the online
//! parameters with the optimizer, then mix the target and discovery sets
//! toward the online one with their respective rates.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_augmentation, crop_resize, sample_augmentation, spanning_view, warp_masks,
    AugmentConfig, AugmentationSample, CropRect, DistId, ViewGeometry,
};
use crate::autodiff::GraphOf;
use crate::data::{epoch_order, LoadedScene};
use crate::discovery::{discover, DiscoverySource, KMeansConfig, SegmentationCache};
use crate::error::{Error, Result};
use crate::model::{model_gradients, ModelNodes, ModelParamsOf, ModelShape};
use crate::objective::{contrastive_loss, forward_view, ImagePair, NegativePolicy};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, TensorOf};
use crate::util::{parallel_map, substream, worker_threads};

/// How the discovery parameters track the online ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiscoverySchedule {
    /// EMA with a small rate every step; segmentations are never cached.
    Continuous { lambda_tau: f64 },
    /// Bitwise copy every `period_epochs`; segmentations cached in between.
    Discrete { period_epochs: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

/// Discovery-side knobs shared by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscoverySettings {
    pub k: usize,
    pub source: DiscoverySource,
    pub kmeans: KMeansConfig,
    pub schedule: DiscoverySchedule,
}

impl Default for DiscoverySettings {
    fn default() -> Self {
        DiscoverySettings {
            k: 16,
            source: DiscoverySource::Projection,
            kmeans: KMeansConfig::default(),
            schedule: DiscoverySchedule::Continuous { lambda_tau: 1e-3 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Target mixing rate: target <- (1 - lambda) target + lambda online.
    pub lambda_xi: f64,
    /// Optionally decay lambda_xi to zero along a half-cosine.
    pub lambda_xi_cosine_ramp: bool,
    /// Contrastive temperature.
    pub alpha: f64,
    pub negative_policy: NegativePolicy,
    /// Checkpoint every this many steps (0 = only final).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_steps: 2000,
            warmup_steps: 100,
            base_lr: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 1e-6,
            lambda_xi: 0.99,
            lambda_xi_cosine_ramp: false,
            alpha: 0.1,
            negative_policy: NegativePolicy::WithinAndAcrossImages,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::config("batch_size and total_steps must be >= 1"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps cannot exceed total_steps"));
        }
        if !(0.0..=1.0).contains(&self.lambda_xi) {
            return Err(Error::config("lambda_xi must lie in [0, 1]"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One optimizer update over a flat list of parameter tensors.
///
/// sgd_momentum: v <- m v + g + wd p; p <- p - lr v.
/// lars: the same momentum update with lr additionally scaled per tensor by
/// the trust ratio |p| / (|g + wd p| + 1e-9); one-dimensional tensors
/// (biases) are exempt from weight decay and trust scaling.
pub fn optimizer_step<S: Scalar>(
    params: Vec<&mut TensorOf<S>>,
    velocity: &mut [TensorOf<S>],
    grads: &[TensorOf<S>],
    kind: OptimizerKind,
    lr: S,
    weight_decay: S,
    momentum: S,
) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient; optimizer step rejected"));
    }
    let eps = S::lit(1e-9);
    for ((p, v), g) in params.into_iter().zip(velocity).zip(grads) {
        let exempt = kind == OptimizerKind::Lars && p.shape().len() == 1;
        let wd = if exempt { S::zero() } else { weight_decay };
        let update = g.zip_map(p, |gv, pv| gv + wd * pv)?;
        let scale = match kind {
            OptimizerKind::SgdMomentum => lr,
            OptimizerKind::Lars if exempt => lr,
            OptimizerKind::Lars => lr * p.norm() / (update.norm() + eps),
        };
        for (vv, &uv) in v.data_mut().iter_mut().zip(update.data()) {
            *vv = momentum * *vv + uv;
        }
        for (pv, &vv) in p.data_mut().iter_mut().zip(v.data()) {
            *pv = *pv - scale * vv;
        }
    }
    Ok(())
}

/// Online (theta), target (xi) or discovery/teacher (tau) parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSelector {
    Online,
    Target,
    Teacher,
}

impl std::str::FromStr for ParamSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(ParamSelector::Online),
            "target" => Ok(ParamSelector::Target),
            "teacher" => Ok(ParamSelector::Teacher),
            other => Err(Error::config(format!(
                "unknown parameter set '{other}' (expected online|target|teacher)"
            ))),
        }
    }
}

/// Three parameter sets plus optimizer state and counters.
#[derive(Clone, Debug)]
pub struct TrainerState<S> {
    pub online: ModelParamsOf<S>,
    pub target: ModelParamsOf<S>,
    pub discovery: ModelParamsOf<S>,
    /// Momentum buffers aligned with `online.named_tensors()`.
    pub velocity: Vec<TensorOf<S>>,
    pub step: usize,
    pub epoch: usize,
    /// Root seed every stream derives from.
    pub seed: u64,
    /// Bumped whenever the discovery parameters change discretely.
    pub cache_stamp: u64,
}

impl<S: Scalar> TrainerState<S> {
    /// Fresh state: target and discovery start as exact copies of online.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        let online = ModelParamsOf::init(shape, seed)?;
        let velocity = online
            .named_tensors()
            .iter()
            .map(|(_, t)| TensorOf::zeros(t.shape().to_vec()))
            .collect();
        Ok(TrainerState {
            target: online.clone(),
            discovery: online.clone(),
            online,
            velocity,
            step: 0,
            epoch: 0,
            seed,
            cache_stamp: 0,
        })
    }

    pub fn params_of(&self, which: ParamSelector) -> &ModelParamsOf<S> {
        match which {
            ParamSelector::Online => &self.online,
            ParamSelector::Target => &self.target,
            ParamSelector::Teacher => &self.discovery,
        }
    }
}

/// Per-step metrics; one JSON line each in metrics.jsonl. `loss` and
/// `grad_norm` are null when the step was skipped as degenerate.
#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

/// Pure per-image preparation: augmented views plus their warped masks.
struct PreparedImage<S> {
    view1: TensorOf<S>,
    view2: TensorOf<S>,
    masks1: Vec<Mask>,
    masks2: Vec<Mask>,
}

/// Spatial grid a conv stack produces for a square input of `side`.
pub fn feature_grid(shape: &ModelShape, side: usize) -> usize {
    shape.conv_strides.iter().fold(side, |s, &stride| s.div_ceil(stride))
}

/// Per-image pipeline shared by the sequential and parallel paths. `cache`
/// is used only under the discrete schedule.
#[allow(clippy::too_many_arguments)]
fn prepare_image<S: Scalar>(
    scene: &LoadedScene<S>,
    dataset_index: usize,
    seed: u64,
    step: usize,
    augment: &AugmentConfig,
    model_shape: &ModelShape,
    dcfg: &DiscoverySettings,
    dparams: &ModelParamsOf<S>,
    mut cache: Option<(&mut SegmentationCache, u64)>,
    forced_samples: Option<(AugmentationSample, AugmentationSample)>,
) -> Result<PreparedImage<S>> {
    let (img_h, img_w) = (scene.image.shape()[0], scene.image.shape()[1]);
    let (s1, s2) = match forced_samples {
        Some(pair) => pair,
        None => {
            let mut rng = substream(seed, 0xa7_0000 ^ step as u64, dataset_index as u64);
            (
                sample_augmentation(&mut rng, DistId::T1, augment, img_h, img_w),
                sample_augmentation(&mut rng, DistId::T2, augment, img_h, img_w),
            )
        }
    };
    let disc_side = augment.discovery_side();
    // Under the discrete schedule the discovery view must not depend on the
    // step's crops, otherwise caching by image id would be unsound. The full
    // image spans every crop, so it is a valid (if not minimal) spanning
    // view; the continuous schedule uses the smallest one.
    let v0 = if cache.is_some() {
        ViewGeometry {
            crop: CropRect::full(img_h, img_w),
            hflip: false,
            out_size: (disc_side, disc_side),
        }
    } else {
        spanning_view(&s1.geometry, &s2.geometry, disc_side)
    };
    let dseed: u64 = substream(seed, 0xd15c, dataset_index as u64).random();
    let image_v0 = crop_resize(&scene.image, &v0)?;
    let compute = || discover(&image_v0, dparams, dcfg.k, dcfg.source, dseed, &dcfg.kmeans);
    let labels: LabelMap = match cache.as_mut() {
        Some((cache, stamp)) => cache.get_or_compute(&scene.id, *stamp, compute)?,
        None => compute()?,
    };

    let grid = feature_grid(model_shape, augment.view_size);
    let masks1 = warp_masks(&labels, dcfg.k, &v0, &s1.geometry, (grid, grid))?;
    let masks2 = warp_masks(&labels, dcfg.k, &v0, &s2.geometry, (grid, grid))?;
    let view1 = apply_augmentation(&scene.image, &s1, augment.blur_kernel)?;
    let view2 = apply_augmentation(&scene.image, &s2, augment.blur_kernel)?;
    Ok(PreparedImage { view1, view2, masks1, masks2 })
}

pub struct Trainer<S> {
    pub state: TrainerState<S>,
    pub model_shape: ModelShape,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub discovery: DiscoverySettings,
    cache: SegmentationCache,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        model_shape: ModelShape,
        augment: AugmentConfig,
        train: TrainConfig,
        discovery: DiscoverySettings,
        seed: u64,
    ) -> Result<Self> {
        model_shape.validate()?;
        augment.validate()?;
        train.validate()?;
        if discovery.k == 0 {
            return Err(Error::config("discovery k must be >= 1"));
        }
        let grid = feature_grid(&model_shape, augment.discovery_side());
        if grid * grid < discovery.k {
            return Err(Error::config(format!(
                "discovery grid {grid}x{grid} has fewer cells than k = {}",
                discovery.k
            )));
        }
        Ok(Trainer {
            state: TrainerState::init(&model_shape, seed)?,
            model_shape,
            augment,
            train,
            discovery,
            cache: SegmentationCache::new(),
        })
    }

    /// Rebuild a trainer around restored state (checkpoint resume).
    pub fn from_state(
        state: TrainerState<S>,
        augment: AugmentConfig,
        train: TrainConfig,
        discovery: DiscoverySettings,
    ) -> Self {
        let model_shape = state.online.shape.clone();
        Trainer { state, model_shape, augment, train, discovery, cache: SegmentationCache::new() }
    }

    /// Discovery computations that actually ran (cache instrumentation).
    pub fn discovery_computes(&self) -> u64 {
        self.cache.computes()
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.state.step, self.train.base_lr, self.train.warmup_steps, self.train.total_steps)
    }

    fn lambda_xi(&self) -> f64 {
        if self.train.lambda_xi_cosine_ramp {
            let p = self.state.step as f64 / self.train.total_steps.max(1) as f64;
            self.train.lambda_xi * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            self.train.lambda_xi
        }
    }

    fn prepare_batch(&mut self, batch: &[(usize, &LoadedScene<S>)]) -> Result<Vec<PreparedImage<S>>> {
        let discrete = matches!(self.discovery.schedule, DiscoverySchedule::Discrete { .. });
        let threads = worker_threads();
        if threads > 1 && !discrete {
            let state = &self.state;
            let (augment, shape, dcfg) = (&self.augment, &self.model_shape, &self.discovery);
            let results = parallel_map(batch.len(), threads, |i| {
                let (idx, scene) = batch[i];
                prepare_image(
                    scene,
                    idx,
                    state.seed,
                    state.step,
                    augment,
                    shape,
                    dcfg,
                    &state.discovery,
                    None,
                    None,
                )
            });
            return results.into_iter().collect();
        }
        let stamp = self.state.cache_stamp;
        batch
            .iter()
            .map(|(idx, scene)| {
                prepare_image(
                    scene,
                    *idx,
                    self.state.seed,
                    self.state.step,
                    &self.augment,
                    &self.model_shape,
                    &self.discovery,
                    &self.state.discovery,
                    discrete.then_some((&mut self.cache, stamp)),
                    None,
                )
            })
            .collect()
    }

    /// One optimization step over a batch of `(dataset_index, scene)`.
    /// Degenerate batches advance the step counter but change nothing else.
    pub fn train_step(&mut self, batch: &[(usize, &LoadedScene<S>)]) -> Result<StepMetrics> {
        let prepared = self.prepare_batch(batch)?;
        let lr = self.lr();
        let step = self.state.step;

        let mut graph = GraphOf::new();
        let nodes = ModelNodes::register(&mut graph, &self.state.online);
        let mut pairs: Vec<ImagePair<S>> = Vec::with_capacity(prepared.len());
        for prep in &prepared {
            let view1 =
                forward_view(&mut graph, &prep.view1, &nodes, &self.state.target, &prep.masks1)?;
            let view2 =
                forward_view(&mut graph, &prep.view2, &nodes, &self.state.target, &prep.masks2)?;
            pairs.push(ImagePair { view1, view2 });
        }

        let loss_node = match contrastive_loss(
            &mut graph,
            &pairs,
            S::lit(self.train.alpha),
            self.train.negative_policy,
        ) {
            Ok(node) => node,
            Err(Error::Numeric(msg)) => {
                log::warn!("step {step} skipped: {msg}");
                self.state.step += 1;
                return Ok(StepMetrics { step, loss: None, lr, grad_norm: None });
            }
            Err(e) => return Err(e),
        };
        let loss = graph.value(loss_node).item().to_f64_lossy();
        let grads_map = graph.backward(loss_node)?;
        let grads = model_gradients(&grads_map, &nodes, &self.state.online);
        let grad_norm =
            grads.iter().map(|g| g.squared_norm().to_f64_lossy()).sum::<f64>().sqrt();

        optimizer_step(
            self.state.online.tensors_mut(),
            &mut self.state.velocity,
            &grads,
            self.train.optimizer,
            S::lit(lr),
            S::lit(self.train.weight_decay),
            S::lit(self.train.momentum),
        )?;

        let lambda_xi = self.lambda_xi();
        self.state.target.ema_from(&self.state.online, S::lit(lambda_xi));
        if let DiscoverySchedule::Continuous { lambda_tau } = self.discovery.schedule {
            self.state.discovery.ema_from(&self.state.online, S::lit(lambda_tau));
        }
        self.state.step += 1;

        Ok(StepMetrics { step, loss: Some(loss), lr, grad_norm: Some(grad_norm) })
    }

    /// Discrete schedule: copy online into discovery bitwise and invalidate
    /// the segmentation cache.
    pub fn discrete_discovery_copy(&mut self) {
        self.state.discovery.ema_from(&self.state.online, S::one());
        self.state.cache_stamp += 1;
    }
}

/// Run the trainer against a scene dataset until `total_steps`, calling
/// `on_step` after every step. Batch order reshuffles every epoch; under the
/// discrete schedule the discovery copy fires at period boundaries.
pub fn train_loop<S: Scalar>(
    trainer: &mut Trainer<S>,
    scenes: &[LoadedScene<S>],
    mut on_step: impl FnMut(&Trainer<S>, &StepMetrics) -> Result<()>,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let epoch_len = scenes.len().div_ceil(trainer.train.batch_size);
    while trainer.state.step < trainer.train.total_steps {
        let step = trainer.state.step;
        let epoch = step / epoch_len;
        trainer.state.epoch = epoch;
        let within = step % epoch_len;
        let order = epoch_order(trainer.state.seed, epoch as u64, scenes.len());
        let lo = within * trainer.train.batch_size;
        let hi = (lo + trainer.train.batch_size).min(scenes.len());
        let batch: Vec<(usize, &LoadedScene<S>)> =
            order[lo..hi].iter().map(|&i| (i, &scenes[i])).collect();

        let metrics = trainer.train_step(&batch)?;

        if let DiscoverySchedule::Discrete { period_epochs } = trainer.discovery.schedule {
            let period_steps = epoch_len * period_epochs.max(1);
            if trainer.state.step % period_steps == 0 {
                trainer.discrete_discovery_copy();
            }
        }
        on_step(trainer, &metrics)?;
    }
    Ok(())
}

// ── Checkpoints ─────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8] = b"ODIN1\n";

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    epoch: usize,
    seed: u64,
    cache_stamp: u64,
    model_shape: ModelShape,
    tensors: Vec<TensorInfo>,
    config: serde_json::Value,
}

fn ordered_tensors(state: &TrainerState<f64>) -> Vec<(String, TensorOf<f64>)> {
    let mut out = Vec::new();
    for (prefix, params) in [
        ("online", &state.online),
        ("target", &state.target),
        ("discovery", &state.discovery),
    ] {
        for (name, tensor) in params.named_tensors() {
            out.push((format!("{prefix}.{name}"), tensor.clone()));
        }
    }
    for ((name, _), v) in state.online.named_tensors().iter().zip(&state.velocity) {
        out.push((format!("velocity.{name}"), v.clone()));
    }
    out
}

/// Serialize the full trainer state: magic, one-line JSON header, then a
/// little-endian f64 payload in header order. Byte-identical across runs.
pub fn checkpoint_save(
    state: &TrainerState<f64>,
    config: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let tensors = ordered_tensors(state);
    let header = CheckpointHeader {
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        cache_stamp: state.cache_stamp,
        model_shape: state.online.shape.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        config: config.clone(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    bytes.push(b'\n');
    for (_, tensor) in &tensors {
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Restore a checkpoint; shape or name mismatches name the offending field.
pub fn checkpoint_load(path: &Path) -> Result<(TrainerState<f64>, serde_json::Value)> {
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(Error::parse(0, "bad checkpoint magic (expected ODIN1)"));
    }
    let header_start = CHECKPOINT_MAGIC.len();
    let newline = bytes[header_start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(bytes.len(), "missing header terminator"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[header_start..header_start + newline])?;
    let payload = &bytes[header_start + newline + 1..];

    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(Error::parse(
            header_start + newline + 1 + payload.len(),
            format!("payload holds {} bytes, want {}", payload.len(), expected * 8),
        ));
    }

    // Template state gives the expected tensor names and shapes.
    let mut state = TrainerState::<f64>::init(&header.model_shape, header.seed)?;
    state.step = header.step;
    state.epoch = header.epoch;
    state.cache_stamp = header.cache_stamp;

    let expected_names: Vec<(String, Vec<usize>)> = ordered_tensors(&state)
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected_names.len() != header.tensors.len() {
        return Err(Error::checkpoint(format!(
            "tensor count {} does not match model ({})",
            header.tensors.len(),
            expected_names.len()
        )));
    }
    for ((name, shape), info) in expected_names.iter().zip(&header.tensors) {
        if name != &info.name || shape != &info.shape {
            return Err(Error::checkpoint(format!(
                "field {}: expected {name} with shape {shape:?}, found shape {:?}",
                info.name, info.shape
            )));
        }
    }

    let mut cursor = 0usize;
    let mut read_into = |tensor: &mut TensorOf<f64>| {
        for v in tensor.data_mut() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[cursor..cursor + 8]);
            *v = f64::from_le_bytes(buf);
            cursor += 8;
        }
    };
    for params in [&mut state.online, &mut state.target, &mut state.discovery] {
        for tensor in params.tensors_mut() {
            read_into(tensor);
        }
    }
    for v in &mut state.velocity {
        read_into(v);
    }
    Ok((state, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenes_in_memory, SceneConfig};

    fn tiny_setup() -> (ModelShape, AugmentConfig, TrainConfig, DiscoverySettings) {
        let model = ModelShape {
            conv_channels: vec![6, 8],
            conv_strides: vec![2, 2],
            proj_hidden: 8,
            proj_dim: 4,
            pred_hidden: 8,
            ..ModelShape::default()
        };
        let augment = AugmentConfig { view_size: 16, ..AugmentConfig::default() };
        let train = TrainConfig {
            batch_size: 2,
            total_steps: 12,
            warmup_steps: 0, // lr > 0 from the first step
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let discovery = DiscoverySettings { k: 4, ..DiscoverySettings::default() };
        (model, augment, train, discovery)
    }

    fn tiny_scenes(n: usize) -> Vec<LoadedScene<f64>> {
        let cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
        generate_scenes_in_memory(11, n, &cfg).unwrap()
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 0.2, 100, 1000), 0.0);
        assert_eq!(lr_at(100, 0.2, 100, 1000), 0.2);
        // Halfway through the cosine span: base * cos^2(pi/4) = base / 2.
        let mid = 100 + (1000 - 100) / 2;
        assert!((lr_at(mid, 0.2, 100, 1000) - 0.1).abs() < 1e-12);
        assert_eq!(lr_at(1000, 0.2, 100, 1000), 0.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = TensorOf::<f64>::scalar(1.0);
        let mut v = vec![TensorOf::zeros(vec![1])];
        let g = vec![TensorOf::scalar(2.0)];
        optimizer_step(vec![&mut p], &mut v, &g, OptimizerKind::SgdMomentum, 0.1, 0.0, 0.0)
            .unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);

        // lr = 0 leaves parameters untouched.
        let mut q = TensorOf::<f64>::scalar(3.0);
        let mut v2 = vec![TensorOf::zeros(vec![1])];
        optimizer_step(vec![&mut q], &mut v2, &g, OptimizerKind::SgdMomentum, 0.0, 0.0, 0.9)
            .unwrap();
        assert_eq!(q.item(), 3.0);
    }

    #[test]
    fn lars_trust_ratio_scales_the_learning_rate() {
        // |p| = 2, |g| = 1, wd = 0: trust ratio 2 / (1 + 1e-9).
        let mut p = TensorOf::<f64>::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let mut v = vec![TensorOf::zeros(vec![2, 1])];
        let g = vec![TensorOf::new(vec![2, 1], vec![1.0, 0.0]).unwrap()];
        optimizer_step(vec![&mut p], &mut v, &g, OptimizerKind::Lars, 0.1, 0.0, 0.0).unwrap();
        let eta = 2.0 / (1.0 + 1e-9);
        let expect = 2.0 - 0.1 * eta;
        assert!((p.data()[0] - expect).abs() < 1e-15, "{} vs {expect}", p.data()[0]);

        // A bias (1-d) is exempt: plain sgd update.
        let mut b = TensorOf::<f64>::from_vec(vec![2.0]);
        let mut vb = vec![TensorOf::zeros(vec![1])];
        let gb = vec![TensorOf::from_vec(vec![1.0])];
        optimizer_step(vec![&mut b], &mut vb, &gb, OptimizerKind::Lars, 0.1, 0.5, 0.0).unwrap();
        assert!((b.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_reject_the_step() {
        let mut p = TensorOf::<f64>::scalar(1.0);
        let mut v = vec![TensorOf::zeros(vec![1])];
        let g = vec![TensorOf::scalar(f64::NAN)];
        let err = optimizer_step(vec![&mut p], &mut v, &g, OptimizerKind::SgdMomentum, 0.1, 0.0, 0.0);
        assert!(err.is_err());
        assert_eq!(p.item(), 1.0, "rejected step must not touch parameters");
    }

    #[test]
    fn zero_rates_leave_target_and_discovery_bit_identical() {
        let (model, augment, mut train, mut discovery) = tiny_setup();
        train.lambda_xi = 0.0;
        discovery.schedule = DiscoverySchedule::Continuous { lambda_tau: 0.0 };
        let mut trainer = Trainer::new(model, augment, train, discovery, 1).unwrap();
        let scenes = tiny_scenes(2);
        let before_target = trainer.state.target.clone();
        let before_discovery = trainer.state.discovery.clone();
        let batch: Vec<(usize, &LoadedScene<f64>)> = scenes.iter().enumerate().collect();
        trainer.train_step(&batch).unwrap();
        assert!(trainer.state.target.bit_equal(&before_target));
        assert!(trainer.state.discovery.bit_equal(&before_discovery));
        assert!(!trainer.state.online.bit_equal(&before_target));
    }

    #[test]
    fn discrete_copy_is_bitwise_and_bumps_the_stamp() {
        let (model, augment, train, mut discovery) = tiny_setup();
        discovery.schedule = DiscoverySchedule::Discrete { period_epochs: 1 };
        let mut trainer = Trainer::new(model, augment, train, discovery, 2).unwrap();
        let scenes = tiny_scenes(2);
        let batch: Vec<(usize, &LoadedScene<f64>)> = scenes.iter().enumerate().collect();
        trainer.train_step(&batch).unwrap();
        assert!(!trainer.state.discovery.bit_equal(&trainer.state.online));
        let stamp = trainer.state.cache_stamp;
        trainer.discrete_discovery_copy();
        assert!(trainer.state.discovery.bit_equal(&trainer.state.online));
        assert_eq!(trainer.state.cache_stamp, stamp + 1);
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = tiny_scenes(4);
        let run = || {
            let (model, augment, train, discovery) = tiny_setup();
            let mut trainer = Trainer::new(model, augment, train, discovery, 7).unwrap();
            let mut losses = Vec::new();
            train_loop(&mut trainer, &scenes, |_, m| {
                losses.push(m.loss);
                Ok(())
            })
            .unwrap();
            (losses, trainer.state)
        };
        let (la, sa) = run();
        let (lb, sb) = run();
        assert_eq!(la, lb);
        assert!(sa.online.bit_equal(&sb.online));
        assert!(sa.target.bit_equal(&sb.target));
        assert!(sa.discovery.bit_equal(&sb.discovery));
    }

    #[test]
    fn discrete_schedule_caches_between_copies() {
        let scenes = tiny_scenes(4);
        let (model, augment, mut train, mut discovery) = tiny_setup();
        train.total_steps = 8; // 4 epochs of 2 steps at batch 2
        discovery.schedule = DiscoverySchedule::Discrete { period_epochs: 2 };
        let mut trainer = Trainer::new(model, augment, train, discovery, 3).unwrap();
        train_loop(&mut trainer, &scenes, |_, _| Ok(())).unwrap();
        // 8 steps x 2 images = 16 discovery requests; 4 images computed per
        // stamp era, with stamp bumps after epochs 2 and 4.
        assert_eq!(trainer.discovery_computes(), 8);
        assert_eq!(trainer.state.cache_stamp, 2);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical_and_resume_matches() {
        let scenes = tiny_scenes(4);
        let (model, augment, train, discovery) = tiny_setup();
        let mut trainer =
            Trainer::new(model.clone(), augment.clone(), train.clone(), discovery.clone(), 5)
                .unwrap();

        // Train 6 steps, checkpoint, then 6 more.
        let mut full_losses = Vec::new();
        let total = trainer.train.total_steps;
        trainer.train.total_steps = 6;
        train_loop(&mut trainer, &scenes, |_, m| {
            full_losses.push(m.loss);
            Ok(())
        })
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.odin");
        let config = serde_json::json!({"train.total_steps": total});
        checkpoint_save(&trainer.state, &config, &path).unwrap();

        // Byte-identical save -> load -> save.
        let (restored, config2) = checkpoint_load(&path).unwrap();
        let path2 = dir.path().join("mid2.odin");
        checkpoint_save(&restored, &config2, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        // Resumed run reproduces the unresumed trajectory exactly.
        trainer.train.total_steps = total;
        let mut direct_losses = Vec::new();
        train_loop(&mut trainer, &scenes, |_, m| {
            direct_losses.push(m.loss);
            Ok(())
        })
        .unwrap();

        let mut resumed = Trainer::from_state(restored, augment, trainer.train.clone(), discovery);
        let mut resumed_losses = Vec::new();
        train_loop(&mut resumed, &scenes, |_, m| {
            resumed_losses.push(m.loss);
            Ok(())
        })
        .unwrap();
        assert_eq!(direct_losses, resumed_losses);
        assert!(resumed.state.online.bit_equal(&trainer.state.online));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (model, _, _, _) = tiny_setup();
        let state = TrainerState::<f64>::init(&model, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.odin");
        checkpoint_save(&state, &serde_json::json!({}), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::Parse { .. })));

        fs::write(&path, b"NOPE1\njunk").unwrap();
        assert!(checkpoint_load(&path).is_err());
    }

    #[test]
    fn loss_trends_down_on_a_tiny_dataset() {
        let scenes = tiny_scenes(6);
        let (model, augment, mut train, discovery) = tiny_setup();
        train.total_steps = 60;
        train.warmup_steps = 5;
        let mut trainer = Trainer::new(model, augment, train, discovery, 9).unwrap();
        let mut losses = Vec::new();
        train_loop(&mut trainer, &scenes, |_, m| {
            losses.push(m.loss.expect("no degenerate steps expected"));
            Ok(())
        })
        .unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: head {head} vs tail {tail}");
    }
}
