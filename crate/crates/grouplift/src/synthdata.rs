//! Synthetic group-interaction scenes: people standing in a circle, moving to
//! a shared rhythm, seen by one pinhole camera.
//!
//! Every person is a forward-kinematics rig. One group signal drives root
//! bob, radial sway, yaw, torso lean and arm gestures for all persons with
//! small per-person phase offsets, so an occluded person is partly
//! predictable from the others.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pose::{project_to_2d, save_scene, scene_to_json, Camera, PoseSeq3D, Scene, Skeleton};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPreset {
    /// Horizontal distance from the formation center, meters.
    pub distance: f64,
    pub height: f64,
    /// Azimuth of the camera around the group, radians.
    pub azimuth: f64,
    pub focal: f64,
    pub image_size: (u32, u32),
}

impl Default for CameraPreset {
    fn default() -> Self {
        CameraPreset {
            distance: 6.0,
            height: 2.0,
            azimuth: 0.0,
            focal: 1000.0,
            image_size: (1280, 720),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Inclusive range of group sizes.
    pub persons: (usize, usize),
    pub frames: usize,
    pub fps: f64,
    pub skeleton: String,
    /// Formation radius, meters. Roots stay within it of the group centroid.
    pub radius: f64,
    /// Radial sway amplitude, meters.
    pub sway: f64,
    /// Scale of the shared gestures (0 freezes the group signal).
    pub amplitude: f64,
    /// Group signal frequency, Hz.
    pub frequency: f64,
    /// Per-person phase offsets are drawn from `[-phase_spread, phase_spread]`.
    pub phase_spread: f64,
    /// Amplitude of independent per-person joint-angle motion, radians.
    pub noise: f64,
    /// Gaussian pixel noise added to the 2D input.
    pub pixel_noise: f64,
    pub camera: CameraPreset,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            persons: (3, 5),
            frames: 120,
            fps: 30.0,
            skeleton: "mpi15".into(),
            radius: 1.2,
            sway: 0.12,
            amplitude: 1.0,
            frequency: 0.4,
            phase_spread: 0.15,
            noise: 0.05,
            pixel_noise: 0.0,
            camera: CameraPreset::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.persons;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid person range {lo}..={hi}")));
        }
        if self.frames == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("frames and fps must be positive".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("formation radius must be positive".into()));
        }
        if !(self.sway >= 0.0 && 2.0 * self.sway < self.radius) {
            return Err(Error::Config("sway must be non-negative and below half the radius".into()));
        }
        if !(self.noise >= 0.0 && self.pixel_noise >= 0.0 && self.phase_spread >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.amplitude >= 0.0 && self.frequency >= 0.0) {
            return Err(Error::Config("amplitude and frequency must be non-negative".into()));
        }
        Skeleton::by_name(&self.skeleton).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the config's JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

const HIP_HEIGHT: f64 = 0.95;

/// Rest-pose offset of each joint from its parent in the body frame
/// (x forward, y left, z up), meters.
fn rest_offset(name: &str) -> Vector3<f64> {
    let (side, base) = match name.split_once('_') {
        Some(("l", rest)) => (1.0, rest),
        Some(("r", rest)) => (-1.0, rest),
        _ => (1.0, name),
    };
    let v = match base {
        "neck" => [0.0, 0.0, 0.55],
        "nose" => [0.09, 0.0, 0.14],
        "shoulder" => [0.0, 0.18, -0.03],
        "elbow" => [0.0, 0.0, -0.28],
        "wrist" => [0.0, 0.0, -0.25],
        "hip" => [0.0, 0.1, 0.0],
        "knee" => [0.0, 0.0, -0.45],
        "ankle" => [0.0, 0.0, -0.42],
        "eye" => [-0.01, 0.035, 0.04],
        "ear" => [-0.08, 0.075, 0.01],
        _ => [0.0, 0.0, 0.0],
    };
    Vector3::new(v[0], side * v[1], v[2])
}

struct PersonMotion {
    base: Vector3<f64>,
    facing: f64,
    phase: f64,
    height: f64,
    /// Independent joint-angle wobble: (frequency Hz, phase) per joint and axis.
    wobble: Vec<[(f64, f64); 3]>,
}

fn joint_rotation(name: &str, g: f64, g2: f64, amp: f64) -> Rotation3<f64> {
    let (side, base) = match name.split_once('_') {
        Some(("l", rest)) => (1.0, rest),
        Some(("r", rest)) => (-1.0, rest),
        _ => (1.0, name),
    };
    let (roll, pitch) = match base {
        // pitch about +y swings a limb forward, roll about +x lifts it sideways
        "shoulder" => (side * (0.25 + 0.35 * amp * (1.0 + side * g) / 2.0), -0.5 * amp * side * g2),
        "elbow" => (0.0, -(0.35 + 0.5 * amp * (1.0 + g2) / 2.0)),
        "hip" => (0.0, -0.08 * amp * (1.0 + g2) / 2.0),
        "knee" => (0.0, 0.16 * amp * (1.0 + g2) / 2.0),
        "neck" => (0.0, 0.12 * amp * g2),
        _ => (0.0, 0.0),
    };
    Rotation3::from_euler_angles(roll, pitch, 0.0)
}

/// One animated scene. The 2D input is the projection of the 3D ground truth
/// (plus optional pixel noise); joints outside the image are invisible.
pub fn generate_group_scene(config: &SynthConfig, rng: &mut impl Rng) -> Result<Scene> {
    config.validate()?;
    let skeleton = Skeleton::by_name(&config.skeleton)?;
    let p = rng.random_range(config.persons.0..=config.persons.1);
    let (t_len, j_len) = (config.frames, skeleton.joint_count());
    let omega = TAU * config.frequency;
    let group_phase = rng.random_range(0.0..TAU);
    let rotation0 = rng.random_range(0.0..TAU);
    let ring = config.radius - 2.0 * config.sway;

    let persons: Vec<PersonMotion> = (0..p)
        .map(|i| {
            let angle = rotation0 + TAU * i as f64 / p as f64;
            let base = if p == 1 {
                Vector3::zeros()
            } else {
                Vector3::new(ring * angle.cos(), ring * angle.sin(), 0.0)
            };
            // facing the formation center
            let facing = angle + PI;
            let phase = group_phase + rng.random_range(-1.0..=1.0) * config.phase_spread;
            let height = rng.random_range(0.9..=1.1);
            let wobble = (0..j_len)
                .map(|_| std::array::from_fn(|_| (rng.random_range(0.2..1.5), rng.random_range(0.0..TAU))))
                .collect();
            PersonMotion { base, facing, phase, height, wobble }
        })
        .collect();

    let order = skeleton.topological_order();
    let offsets: Vec<Vector3<f64>> = skeleton.joint_names.iter().map(|n| rest_offset(n)).collect();
    let mut data = Array4::zeros((t_len, p, j_len, 3));
    let amp = config.amplitude;
    for t in 0..t_len {
        let time = t as f64 / config.fps;
        for (pi, person) in persons.iter().enumerate() {
            let g = (omega * time + person.phase).sin();
            let g2 = (2.0 * omega * time + person.phase + 0.7).sin();
            let inward = Vector3::new(person.facing.cos(), person.facing.sin(), 0.0);
            let radial = if p == 1 { Vector3::zeros() } else { inward * (config.sway * g) };
            let root = person.base
                + radial
                + Vector3::new(0.0, 0.0, HIP_HEIGHT * person.height + 0.03 * amp * g2);
            let root_rot = Rotation3::from_euler_angles(0.0, 0.0, person.facing + 0.25 * amp * g)
                * Rotation3::from_euler_angles(0.0, 0.08 * amp * g, 0.0);

            let mut global = vec![Rotation3::identity(); j_len];
            let mut pos = vec![Vector3::zeros(); j_len];
            for &j in &order {
                let wob = |axis: usize| {
                    let (f, ph) = person.wobble[j][axis];
                    config.noise * (TAU * f * time + ph).sin()
                };
                let local = joint_rotation(&skeleton.joint_names[j], g, g2, amp)
                    * Rotation3::from_euler_angles(wob(0), wob(1), wob(2));
                match skeleton.parents[j] {
                    None => {
                        pos[j] = root;
                        global[j] = root_rot * local;
                    }
                    Some(par) => {
                        pos[j] = pos[par] + global[par] * (offsets[j] * person.height);
                        global[j] = global[par] * local;
                    }
                }
            }
            for (j, v) in pos.iter().enumerate() {
                for c in 0..3 {
                    data[[t, pi, j, c]] = v[c];
                }
            }
        }
    }

    let pose3d = PoseSeq3D::new(data)?;
    let cam = &config.camera;
    let eye = Vector3::new(cam.distance * cam.azimuth.cos(), cam.distance * cam.azimuth.sin(), cam.height);
    let camera = Camera::look_at(eye, Vector3::new(0.0, 0.0, 1.0), Vector3::z(), cam.focal, cam.image_size)?;
    let mut pose2d = project_to_2d(&pose3d, &camera)?;
    if config.pixel_noise > 0.0 {
        let normal = Normal::new(0.0, config.pixel_noise).expect("validated noise level");
        for v in pose2d.data.iter_mut() {
            *v += normal.sample(rng);
        }
        pose2d.apply_sentinel();
    }
    let scene = Scene {
        skeleton,
        pose2d,
        pose3d: Some(pose3d),
        camera,
        fps: config.fps,
        person_ids: (0..p).map(|i| format!("person_{i}")).collect(),
        meta: None,
    };
    scene.validate()?;
    Ok(scene)
}

/// Hides a uniform count in `[0, n_max]` of joints per (frame, person).
pub fn occlude_visibility(visibility: &mut Array3<bool>, n_max: usize, rng: &mut impl Rng) -> Result<()> {
    let (t, p, j) = visibility.dim();
    if n_max > j {
        return Err(Error::invalid(format!("cannot occlude {n_max} of {j} joints")));
    }
    if n_max == 0 {
        return Ok(());
    }
    let mut idx: Vec<usize> = (0..j).collect();
    for ti in 0..t {
        for pi in 0..p {
            let k = rng.random_range(0..=n_max);
            let (chosen, _) = idx.partial_shuffle(rng, k);
            for &ji in chosen.iter() {
                visibility[[ti, pi, ji]] = false;
            }
        }
    }
    Ok(())
}

/// Applies [`occlude_visibility`] to the 2D input; 3D ground truth is untouched.
pub fn apply_occlusion(scene: &Scene, n_max: usize, rng: &mut impl Rng) -> Result<Scene> {
    let mut out = scene.clone();
    occlude_visibility(&mut out.pose2d.visibility, n_max, rng)?;
    out.pose2d.apply_sentinel();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: PathBuf,
    pub split: String,
    pub seed: u64,
    pub persons: usize,
    pub frames: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub config_hash: String,
    pub seed: u64,
    pub split_ratio: f64,
    pub scenes: Vec<DatasetEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

/// Number of training scenes for `count` scenes at `ratio`; both splits stay non-empty.
pub fn train_count(count: usize, ratio: f64) -> usize {
    ((count as f64 * ratio).round() as usize).clamp(1, count - 1)
}

/// Writes `count` scenes into `out/train` and `out/test` plus `out/manifest.json`.
pub fn make_dataset(config: &SynthConfig, count: usize, split_ratio: f64, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    if count < 2 {
        return Err(Error::Config("a dataset needs at least two scenes".into()));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }
    let out = out.as_ref();
    let n_train = train_count(count, split_ratio);
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let seed: u64 = master.random();
        let mut scene = generate_group_scene(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        scene.meta = Some(serde_json::json!({ "generator": "synthdata", "seed": seed }));
        let split = if i < n_train { "train" } else { "test" };
        let file = PathBuf::from(split).join(format!("scene_{i:04}.json"));
        save_scene(&scene, out.join(&file))?;
        scenes.push(DatasetEntry {
            file,
            split: split.to_string(),
            seed,
            persons: scene.persons(),
            frames: scene.frames(),
            sha256: hex::encode(Sha256::digest(scene_to_json(&scene)?.as_bytes())),
        });
    }
    let manifest = DatasetManifest {
        config: config.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        split_ratio,
        scenes,
    };
    let path = out.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
