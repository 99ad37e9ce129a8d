//! Loss, optimizer and the training loop.
//!
//! Each step samples a clip per scene, expands it with person permutations,
//! noises the ground truth to a uniformly drawn diffusion step and regresses
//! the clean sample. Every expanded clip is an independent batch item.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use ndarray::{concatenate, s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{expand_sample, PermutationPlan};
use crate::diffusion::{forward_noise, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Denoiser, Mode, ModelConfig};
use crate::pose::{fit_root_norm, normalize_2d, to_representation, PoseSeq2D, PoseSeq3D, RootNormStats, Scene};
use crate::synthdata::occlude_visibility;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Scenes per optimizer step (before permutation expansion).
    pub batch_size: usize,
    pub frames_per_clip: usize,
    pub lambda: f64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub n_sup: usize,
    pub n_sub: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Maximum joints hidden per (frame, person) in the 2D input; 0 disables.
    pub occlusion_max: usize,
    /// Clips drawn from each scene per epoch.
    pub clips_per_scene: usize,
    /// Validation loss is logged every this many epochs; 0 disables.
    pub val_every: usize,
    /// A checkpoint is written every this many epochs when an output
    /// directory is given; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            base_lr: 6e-5,
            lr_decay: 0.997,
            batch_size: 4,
            frames_per_clip: 243,
            lambda: 0.5,
            diffusion_steps: 1000,
            schedule: ScheduleKind::Cosine,
            n_sup: 6,
            n_sub: 6,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            occlusion_max: 0,
            clips_per_scene: 1,
            val_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 || self.frames_per_clip == 0 || self.diffusion_steps == 0 || self.clips_per_scene == 0 {
            return Err(Error::Config("batch size, clip length, diffusion steps and clips per scene must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate must be non-negative and decay positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer moments".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }

    pub fn plan(&self) -> PermutationPlan {
        PermutationPlan::new(self.n_sup, self.n_sub, self.seed)
    }
}

/// `base_lr * lr_decay^epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.lr_decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub abs_term: f64,
    pub rel_term: f64,
    pub visible_roots: usize,
    pub visible_joints: usize,
    /// Set when a term had no visible joints and was defined as 0.
    pub empty: bool,
}

fn check_loss_shapes(pred: (usize, usize, usize, usize), gt: (usize, usize, usize, usize), mask: (usize, usize, usize), root: usize) -> Result<()> {
    if pred != gt || (pred.0, pred.1, pred.2) != mask || pred.3 != 3 {
        return Err(Error::invalid(format!(
            "loss shapes disagree: pred {pred:?}, gt {gt:?}, mask {mask:?}"
        )));
    }
    if root >= pred.2 {
        return Err(Error::invalid(format!("root index {root} out of range")));
    }
    Ok(())
}

/// Weighted loss on the normalized representation: mean Euclidean error of
/// visible roots (absolute term) and of visible non-root joints (relative term).
pub fn mpjpe_loss(pred: ArrayView4<f64>, gt: ArrayView4<f64>, mask: ArrayView3<bool>, root: usize, lambda: f64) -> Result<LossReport> {
    check_loss_shapes(pred.dim(), gt.dim(), mask.dim(), root)?;
    let (mut abs_sum, mut rel_sum) = (0.0, 0.0);
    let (mut n_abs, mut n_rel) = (0usize, 0usize);
    for ((t, p, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let d = (0..3)
            .map(|c| (pred[[t, p, j, c]] - gt[[t, p, j, c]]).powi(2))
            .sum::<f64>()
            .sqrt();
        if j == root {
            abs_sum += d;
            n_abs += 1;
        } else {
            rel_sum += d;
            n_rel += 1;
        }
    }
    let abs_term = if n_abs > 0 { abs_sum / n_abs as f64 } else { 0.0 };
    let rel_term = if n_rel > 0 { rel_sum / n_rel as f64 } else { 0.0 };
    Ok(LossReport {
        total: lambda * abs_term + (1.0 - lambda) * rel_term,
        abs_term,
        rel_term,
        visible_roots: n_abs,
        visible_joints: n_rel,
        empty: n_abs == 0 || n_rel == 0,
    })
}

// keeps the distance differentiable at exactly zero error
const DIST_FLOOR: f64 = 1e-24;

fn mean_distance(pred: &Tensor, gt: &Tensor, idx: &[u32]) -> Result<Option<Tensor>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let ids = Tensor::from_slice(idx, idx.len(), &Device::Cpu)?;
    let a = pred.index_select(&ids, 0)?;
    let b = gt.index_select(&ids, 0)?;
    let d = (a - b)?.sqr()?.sum(1)?.maximum(DIST_FLOOR)?.sqrt()?;
    Ok(Some(d.mean_all()?))
}

/// Differentiable form of [`mpjpe_loss`]. Masked joints are gathered out
/// before any arithmetic, so they never enter the graph.
pub fn loss_tensor(pred: &Tensor, gt: &Tensor, mask: ArrayView3<bool>, root: usize, lambda: f64) -> Result<(Tensor, LossReport)> {
    let (t, p, j, c) = pred.dims4()?;
    check_loss_shapes((t, p, j, c), gt.dims4()?, mask.dim(), root)?;
    let mut roots = Vec::new();
    let mut others = Vec::new();
    for ((ti, pi, ji), &m) in mask.indexed_iter() {
        if m {
            let flat = ((ti * p + pi) * j + ji) as u32;
            if ji == root {
                roots.push(flat);
            } else {
                others.push(flat);
            }
        }
    }
    let pred = pred.reshape((t * p * j, 3))?;
    let gt = gt.to_dtype(pred.dtype())?.reshape((t * p * j, 3))?;
    let zero = || Tensor::zeros((), pred.dtype(), &Device::Cpu);
    let abs = mean_distance(&pred, &gt, &roots)?;
    let rel = mean_distance(&pred, &gt, &others)?;
    let scalar = |x: &Option<Tensor>| -> Result<f64> {
        Ok(match x {
            Some(v) => v.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            None => 0.0,
        })
    };
    let (abs_term, rel_term) = (scalar(&abs)?, scalar(&rel)?);
    let total = (abs.map_or_else(zero, Ok)?.affine(lambda, 0.0)? + rel.map_or_else(zero, Ok)?.affine(1.0 - lambda, 0.0)?)?;
    let report = LossReport {
        total: lambda * abs_term + (1.0 - lambda) * rel_term,
        abs_term,
        rel_term,
        visible_roots: roots.len(),
        visible_joints: others.len(),
        empty: roots.is_empty() || others.is_empty(),
    };
    Ok((total, report))
}

/// One model input/target pair in the normalized representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    /// Normalized 2D condition `[T, P, J, 2]`.
    pub cond: Array4<f64>,
    /// Clean target `[T, P, J, 3]`.
    pub target: Array4<f64>,
    /// Joints that count towards the loss.
    pub mask: Array3<bool>,
    pub root: usize,
}

impl TrainItem {
    /// Builds an item from a scene with ground truth. `frame_valid` marks
    /// real (non-padding) frames; the input visibility may be narrowed by
    /// `input_visibility` without affecting the loss mask.
    pub fn from_scene(scene: &Scene, stats: &RootNormStats, frame_valid: &[bool], input_visibility: Option<&Array3<bool>>) -> Result<Self> {
        let gt = scene
            .pose3d
            .as_ref()
            .ok_or_else(|| Error::invalid("training scenes need 3D ground truth"))?;
        let target = to_representation(gt, &scene.skeleton, stats)?;
        let cond = match input_visibility {
            None => normalize_2d(&scene.pose2d, scene.camera.image_size),
            Some(vis) => {
                let occluded = PoseSeq2D::new(scene.pose2d.data.clone(), vis.clone())?;
                normalize_2d(&occluded, scene.camera.image_size)
            }
        };
        let mut mask = scene.pose2d.visibility.clone();
        for (t, valid) in frame_valid.iter().enumerate() {
            if !valid {
                mask.slice_mut(s![t, .., ..]).fill(false);
            }
        }
        Ok(TrainItem { cond, target, mask, root: scene.skeleton.root_index })
    }

    pub fn persons(&self) -> usize {
        self.cond.dim().1
    }
}

/// Loss of the model on `item` after noising its target to `step` with `eps`.
pub fn item_loss(
    model: &Denoiser,
    item: &TrainItem,
    step: usize,
    eps: ArrayView4<f64>,
    schedule: &NoiseSchedule,
    lambda: f64,
    mode: &mut Mode,
) -> Result<(Tensor, LossReport)> {
    let y_n = forward_noise(item.target.view(), step, eps, schedule)?;
    let z = concatenate(Axis(3), &[item.cond.view(), y_n.view()]).expect("matching shapes");
    let z = Tensor::from_vec(z.iter().copied().collect::<Vec<f64>>(), z.shape(), &Device::Cpu)?;
    let slots: Vec<usize> = (0..item.persons()).collect();
    let pred = model.forward(&z, step, &slots, mode)?;
    let target = Tensor::from_vec(item.target.iter().copied().collect::<Vec<f64>>(), item.target.shape(), &Device::Cpu)?;
    loss_tensor(&pred, &target, item.mask.view(), item.root, lambda)
}

/// Parameter gradients by name; parameters outside the graph are absent.
pub fn collect_grads(model: &Denoiser, grads: &GradStore) -> BTreeMap<String, Tensor> {
    model
        .params()
        .iter()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.to_string(), g.detach())))
        .collect()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok(norm)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, steps: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        AdamW::new(config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, model: &Denoiser, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for (name, var) in model.params().iter() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            let v = (v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let update = m.affine(1.0 / c1, 0.0)?.div(&(v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?)?;
            let w = var.as_tensor().detach();
            let w = (w.affine(1.0 - lr * self.weight_decay, 0.0)? - update.affine(lr, 0.0)?)?;
            var.set(&w)?;
            self.moments.insert(name.to_string(), (m.detach(), v.detach()));
        }
        Ok(())
    }
}

/// A `len`-frame window of the scene starting at a random frame. Shorter
/// scenes are padded by repeating their last frame; the returned flags mark
/// real frames.
pub fn sample_clip(scene: &Scene, len: usize, rng: &mut impl Rng) -> Result<(Scene, Vec<bool>)> {
    let t = scene.frames();
    if t >= len {
        let start = rng.random_range(0..=t - len);
        return Ok((scene.slice_frames(start, len)?, vec![true; len]));
    }
    let pad = len - t;
    let rep4 = |a: &Array4<f64>| {
        let last = a.slice(s![t - 1..t, .., .., ..]);
        let reps: Vec<_> = std::iter::once(a.view()).chain(std::iter::repeat_n(last, pad)).collect();
        concatenate(Axis(0), &reps).expect("matching shapes")
    };
    let vis = &scene.pose2d.visibility;
    let last = vis.slice(s![t - 1..t, .., ..]);
    let vis_views: Vec<_> = std::iter::once(vis.view()).chain(std::iter::repeat_n(last, pad)).collect();
    let mut clip = scene.clone();
    clip.pose2d = PoseSeq2D::new(rep4(&scene.pose2d.data), concatenate(Axis(0), &vis_views).expect("matching shapes"))?;
    clip.pose3d = scene.pose3d.as_ref().map(|g| PoseSeq3D::new(rep4(&g.data))).transpose()?;
    let mut valid = vec![true; t];
    valid.resize(len, false);
    Ok((clip, valid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub split: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub abs: f64,
    pub rel: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub records: Vec<TrainRecord>,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

fn check_scenes(scenes: &[Scene], model: &ModelConfig) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        s.validate()?;
        if s.pose3d.is_none() {
            return Err(Error::invalid(format!("scene {i} has no 3D ground truth")));
        }
        if s.joints() != model.joints {
            return Err(Error::invalid(format!(
                "scene {i} has {} joints, model expects {}",
                s.joints(),
                model.joints
            )));
        }
        if s.persons() > model.max_persons {
            return Err(Error::Capacity(format!(
                "scene {i} has {} persons, model capacity is {}",
                s.persons(),
                model.max_persons
            )));
        }
    }
    Ok(())
}

fn standard_normal(dim: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// Trains a freshly initialized model. Root statistics are fitted on the
/// training scenes.
pub fn train(config: &TrainConfig, model_config: &ModelConfig, train_scenes: &[Scene], val_scenes: &[Scene], out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    check_scenes(train_scenes, model_config)?;
    let stats = fit_root_norm(train_scenes)?;
    let model = Denoiser::new(model_config.clone(), stats, DType::F32, config.seed)?;
    train_from(model, config, train_scenes, val_scenes, out)
}

/// Continues training `model` with its current weights and root statistics.
pub fn train_from(mut model: Denoiser, config: &TrainConfig, train_scenes: &[Scene], val_scenes: &[Scene], out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    check_scenes(train_scenes, model.config())?;
    check_scenes(val_scenes, model.config())?;
    if train_scenes.is_empty() && config.epochs > 0 {
        return Err(Error::invalid("no training scenes"));
    }
    if config.frames_per_clip > model.config().max_frames {
        return Err(Error::Config(format!(
            "clip length {} exceeds the model's maximum of {} frames",
            config.frames_per_clip,
            model.config().max_frames
        )));
    }
    let schedule = NoiseSchedule::new(config.diffusion_steps, config.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut opt = AdamW::from_config(config);
    let plan = config.plan();
    let stats = *model.root_norm();

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_LOG);
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut emit = |rec: TrainRecord, log: &mut Option<BufWriter<File>>| -> Result<()> {
        if let Some(w) = log {
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(METRICS_LOG, e))?;
        }
        records.push(rec);
        Ok(())
    };

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut order: Vec<usize> = (0..train_scenes.len())
            .flat_map(|i| std::iter::repeat_n(i, config.clips_per_scene))
            .collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut items = Vec::new();
            for &i in batch {
                let (clip, valid) = sample_clip(&train_scenes[i], config.frames_per_clip, &mut rng)?;
                for sc in expand_sample(&clip, &plan, &mut rng) {
                    let vis = if config.occlusion_max > 0 {
                        let mut v = sc.pose2d.visibility.clone();
                        occlude_visibility(&mut v, config.occlusion_max.min(sc.joints()), &mut rng)?;
                        Some(v)
                    } else {
                        None
                    };
                    items.push(TrainItem::from_scene(&sc, &stats, &valid, vis.as_ref())?);
                }
            }
            let mut total: Option<Tensor> = None;
            let (mut sum_loss, mut sum_abs, mut sum_rel) = (0.0, 0.0, 0.0);
            for item in &items {
                let n = rng.random_range(1..=schedule.steps());
                let eps = standard_normal(item.target.dim(), &mut rng);
                let (loss, rep) = item_loss(&model, item, n, eps.view(), &schedule, config.lambda, &mut Mode::Train(&mut dropout_rng))?;
                sum_loss += rep.total;
                sum_abs += rep.abs_term;
                sum_rel += rep.rel_term;
                total = Some(match total {
                    None => loss,
                    Some(acc) => (acc + loss)?,
                });
            }
            let k = items.len() as f64;
            let total = total.expect("every batch has at least one item").affine(1.0 / k, 0.0)?;
            let grads = total.backward()?;
            let mut grads = collect_grads(&model, &grads);
            if let Some(max) = config.grad_clip {
                clip_grad_norm(&mut grads, max)?;
            }
            opt.step(&model, &grads, lr)?;
            step += 1;
            emit(
                TrainRecord { split: "train".into(), epoch, step, loss: sum_loss / k, abs: sum_abs / k, rel: sum_rel / k, lr },
                &mut log,
            )?;
        }
        if config.val_every > 0 && !val_scenes.is_empty() && (epoch + 1) % config.val_every == 0 {
            let rep = validation_loss(&model, config, val_scenes, &schedule)?;
            emit(
                TrainRecord { split: "val".into(), epoch, step, loss: rep.total, abs: rep.abs_term, rel: rep.rel_term, lr },
                &mut log,
            )?;
        }
        if let (Some(dir), true) = (out, config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
            save_checkpoint(dir.join(format!("checkpoint_epoch{:04}.safetensors", epoch + 1)), &model, training_meta(config, epoch + 1, step))?;
        }
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io(METRICS_LOG, e))?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(dir.join(CHECKPOINT_FILE), &model, training_meta(config, config.epochs, step))?;
    }
    model.set_root_norm(stats)?;
    Ok(TrainOutcome { model, records })
}

fn training_meta(config: &TrainConfig, epochs: usize, steps: usize) -> serde_json::Value {
    serde_json::json!({ "train_config": config, "epochs_run": epochs, "steps": steps, "seed": config.seed })
}

/// Mean loss over the first clip of each scene at fixed, seeded noise.
pub fn validation_loss(model: &Denoiser, config: &TrainConfig, scenes: &[Scene], schedule: &NoiseSchedule) -> Result<LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let (mut total, mut abs, mut rel) = (0.0, 0.0, 0.0);
    let (mut roots, mut joints) = (0, 0);
    for scene in scenes {
        let len = config.frames_per_clip.min(scene.frames());
        let clip = scene.slice_frames(0, len)?;
        let item = TrainItem::from_scene(&clip, model.root_norm(), &vec![true; len], None)?;
        let n = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(item.target.dim(), &mut rng);
        let (_, rep) = item_loss(model, &item, n, eps.view(), schedule, config.lambda, &mut Mode::Eval)?;
        total += rep.total;
        abs += rep.abs_term;
        rel += rep.rel_term;
        roots += rep.visible_roots;
        joints += rep.visible_joints;
    }
    let k = scenes.len().max(1) as f64;
    Ok(LossReport {
        total: total / k,
        abs_term: abs / k,
        rel_term: rel / k,
        visible_roots: roots,
        visible_joints: joints,
        empty: roots == 0 || joints == 0,
    })
}

/// Parameters tied to joint identity; re-initialized when the skeleton changes.
pub const JOINT_SPECIFIC_PARAMS: [&str; 3] = ["joint_embed", "head.weight", "head.bias"];

/// Moves a model to a skeleton with `joints` joints, keeping every weight
/// that does not depend on joint identity.
pub fn adapt_to_skeleton(model: &Denoiser, joints: usize, seed: u64) -> Result<Denoiser> {
    if joints == model.config().joints {
        return Ok(model.clone());
    }
    let mut cfg = model.config().clone();
    cfg.joints = joints;
    let fresh = Denoiser::new(cfg, *model.root_norm(), model.dtype(), seed)?;
    for (name, var) in fresh.params().iter() {
        if JOINT_SPECIFIC_PARAMS.contains(&name) {
            continue;
        }
        var.set(&model.params().var(name)?.as_tensor().detach())?;
    }
    Ok(fresh)
}

/// Continues training from a checkpoint at half the base learning rate.
/// A different skeleton re-initializes the joint-specific parameters.
pub fn finetune(model: &Denoiser, config: &TrainConfig, scenes: &[Scene], val_scenes: &[Scene], out: Option<&Path>) -> Result<TrainOutcome> {
    let p_max = model.config().max_persons;
    if let Some(s) = scenes.iter().chain(val_scenes).find(|s| s.persons() > p_max) {
        return Err(Error::Capacity(format!(
            "scene with {} persons exceeds the checkpoint's capacity of {p_max}",
            s.persons()
        )));
    }
    let joints = scenes.first().map_or(model.config().joints, |s| s.joints());
    let start = adapt_to_skeleton(model, joints, config.seed)?;
    let mut cfg = config.clone();
    cfg.base_lr *= 0.5;
    train_from(start, &cfg, scenes, val_scenes, out)
}
