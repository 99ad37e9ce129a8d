//! Pose data model: skeletons, 2D/3D pose sequences, cameras, scenes and the
//! root/relative decomposition the denoiser is trained on.
//!
//! All 3D quantities are in meters in a world frame with +z up. Arrays are
//! indexed `[frame, person, joint, coordinate]`.

mod camera;
mod io;
mod skeleton;

use nalgebra::Vector3;
use ndarray::{s, Array3, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

pub use camera::Camera;
pub(crate) use camera::in_image;
pub use io::{load_scene, save_scene, scene_from_json, scene_to_json, SCENE_VERSION};
pub use skeleton::Skeleton;

use crate::error::{Error, Result};

/// Lower bound applied to every root-normalization standard deviation.
pub const ROOT_STD_FLOOR: f64 = 1e-6;

/// Detected or projected 2D joints, `[T, P, J, 2]` pixels, plus the observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSeq2D {
    pub data: Array4<f64>,
    /// `[T, P, J]`; true when the joint is observed and inside the frame.
    pub visibility: Array3<bool>,
}

/// 3D joints in world coordinates, `[T, P, J, 3]` meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSeq3D {
    pub data: Array4<f64>,
}

impl PoseSeq2D {
    pub fn new(data: Array4<f64>, visibility: Array3<bool>) -> Result<Self> {
        let (t, p, j, c) = data.dim();
        if c != 2 {
            return Err(Error::invalid(format!("2D poses need 2 coordinates, got {c}")));
        }
        if t == 0 || p == 0 || j == 0 {
            return Err(Error::invalid("2D pose sequence must have T, P, J >= 1"));
        }
        if visibility.dim() != (t, p, j) {
            return Err(Error::invalid(format!(
                "visibility shape {:?} does not match poses {:?}",
                visibility.dim(),
                (t, p, j)
            )));
        }
        let mut out = PoseSeq2D { data, visibility };
        out.apply_sentinel();
        Ok(out)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.visibility.dim()
    }

    /// Zeroes every invisible entry.
    pub fn apply_sentinel(&mut self) {
        for ((t, p, j), vis) in self.visibility.indexed_iter() {
            if !vis {
                self.data[[t, p, j, 0]] = 0.0;
                self.data[[t, p, j, 1]] = 0.0;
            }
        }
    }
}

impl PoseSeq3D {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (t, p, j, c) = data.dim();
        if c != 3 {
            return Err(Error::invalid(format!("3D poses need 3 coordinates, got {c}")));
        }
        if t == 0 || p == 0 || j == 0 {
            return Err(Error::invalid("3D pose sequence must have T, P, J >= 1"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("3D poses contain non-finite values"));
        }
        Ok(PoseSeq3D { data })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        let (t, p, j, _) = self.data.dim();
        (t, p, j)
    }

    pub fn joint(&self, t: usize, p: usize, j: usize) -> Vector3<f64> {
        Vector3::new(
            self.data[[t, p, j, 0]],
            self.data[[t, p, j, 1]],
            self.data[[t, p, j, 2]],
        )
    }
}

/// Training-set statistics of the absolute root positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootNormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl RootNormStats {
    pub fn identity() -> Self {
        RootNormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::invalid("root normalization needs finite mean and std > 0"));
        }
        Ok(())
    }
}

/// One recording: synchronized 2D input, optional 3D ground truth, camera and person slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub skeleton: Skeleton,
    pub pose2d: PoseSeq2D,
    pub pose3d: Option<PoseSeq3D>,
    pub camera: Camera,
    pub fps: f64,
    pub person_ids: Vec<String>,
    /// Free-form provenance (seeds, source files). Never interpreted.
    pub meta: Option<serde_json::Value>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.pose2d.dim().0
    }

    pub fn persons(&self) -> usize {
        self.pose2d.dim().1
    }

    pub fn joints(&self) -> usize {
        self.pose2d.dim().2
    }

    pub fn validate(&self) -> Result<()> {
        let (t, p, j) = self.pose2d.dim();
        if p == 0 || self.person_ids.is_empty() {
            return Err(Error::invalid("scene has no persons"));
        }
        if j != self.skeleton.joint_count() {
            return Err(Error::invalid(format!(
                "scene has {j} joints but skeleton `{}` has {}",
                self.skeleton.name,
                self.skeleton.joint_count()
            )));
        }
        if self.person_ids.len() != p {
            return Err(Error::invalid(format!(
                "{} person ids for {p} persons",
                self.person_ids.len()
            )));
        }
        let mut ids = self.person_ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != p {
            return Err(Error::invalid("person ids must be unique"));
        }
        if let Some(gt) = &self.pose3d {
            if gt.dim() != (t, p, j) {
                return Err(Error::invalid(format!(
                    "3D shape {:?} does not match 2D shape {:?}",
                    gt.dim(),
                    (t, p, j)
                )));
            }
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::invalid("fps must be positive"));
        }
        self.camera.validate()
    }

    /// New scene holding the given persons, in the given order.
    pub fn select_persons(&self, order: &[usize]) -> Result<Scene> {
        let p = self.persons();
        if order.is_empty() || order.iter().any(|&i| i >= p) {
            return Err(Error::invalid(format!("person selection {order:?} invalid for P={p}")));
        }
        Ok(Scene {
            skeleton: self.skeleton.clone(),
            pose2d: PoseSeq2D {
                data: self.pose2d.data.select(Axis(1), order),
                visibility: self.pose2d.visibility.select(Axis(1), order),
            },
            pose3d: self.pose3d.as_ref().map(|g| PoseSeq3D {
                data: g.data.select(Axis(1), order),
            }),
            camera: self.camera.clone(),
            fps: self.fps,
            person_ids: order.iter().map(|&i| self.person_ids[i].clone()).collect(),
            meta: self.meta.clone(),
        })
    }

    /// Frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Scene> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::invalid(format!(
                "frame window {start}..{} outside 0..{}",
                start + len,
                self.frames()
            )));
        }
        let r = start..start + len;
        Ok(Scene {
            skeleton: self.skeleton.clone(),
            pose2d: PoseSeq2D {
                data: self.pose2d.data.slice(s![r.clone(), .., .., ..]).to_owned(),
                visibility: self.pose2d.visibility.slice(s![r.clone(), .., ..]).to_owned(),
            },
            pose3d: self.pose3d.as_ref().map(|g| PoseSeq3D {
                data: g.data.slice(s![r.clone(), .., .., ..]).to_owned(),
            }),
            camera: self.camera.clone(),
            fps: self.fps,
            person_ids: self.person_ids.clone(),
            meta: self.meta.clone(),
        })
    }
}

fn check_root(skeleton: &Skeleton, joints: usize) -> Result<()> {
    if skeleton.root_index >= joints || joints != skeleton.joint_count() {
        return Err(Error::invalid(format!(
            "pose has {joints} joints, skeleton `{}` expects {} with root {}",
            skeleton.name,
            skeleton.joint_count(),
            skeleton.root_index
        )));
    }
    Ok(())
}

/// Splits absolute poses into per-person root trajectories `[T, P, 3]` and
/// root-relative joints `[T, P, J, 3]` (zero at the root joint).
pub fn split_root_relative(pose3d: &PoseSeq3D, skeleton: &Skeleton) -> Result<(Array3<f64>, Array4<f64>)> {
    let (t, p, j) = pose3d.dim();
    check_root(skeleton, j)?;
    let roots = pose3d
        .data
        .index_axis(Axis(2), skeleton.root_index)
        .to_owned();
    let mut rel = pose3d.data.clone();
    for ti in 0..t {
        for pi in 0..p {
            for ji in 0..j {
                for c in 0..3 {
                    rel[[ti, pi, ji, c]] -= roots[[ti, pi, c]];
                }
            }
        }
    }
    rel.index_axis_mut(Axis(2), skeleton.root_index).fill(0.0);
    Ok((roots, rel))
}

/// Inverse of [`split_root_relative`].
pub fn compose_absolute(roots: &Array3<f64>, rel: &Array4<f64>, skeleton: &Skeleton) -> Result<PoseSeq3D> {
    let (t, p, j, c) = rel.dim();
    check_root(skeleton, j)?;
    if c != 3 || roots.dim() != (t, p, 3) {
        return Err(Error::invalid(format!(
            "roots {:?} and relative poses {:?} are inconsistent",
            roots.dim(),
            rel.dim()
        )));
    }
    if rel.index_axis(Axis(2), skeleton.root_index).iter().any(|v| *v != 0.0) {
        return Err(Error::invalid("relative poses must be zero at the root joint"));
    }
    let mut out = rel.clone();
    for ti in 0..t {
        for pi in 0..p {
            for ji in 0..j {
                for ci in 0..3 {
                    out[[ti, pi, ji, ci]] += roots[[ti, pi, ci]];
                }
            }
        }
    }
    PoseSeq3D::new(out)
}

/// Population mean/std of every root joint position across the training scenes.
pub fn fit_root_norm(train_scenes: &[Scene]) -> Result<RootNormStats> {
    let mut count = 0usize;
    let mut sum = [0.0f64; 3];
    for scene in train_scenes {
        if let Some(gt) = &scene.pose3d {
            let roots = gt.data.index_axis(Axis(2), scene.skeleton.root_index);
            for v in roots.lanes(Axis(2)) {
                for c in 0..3 {
                    sum[c] += v[c];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("no root positions to fit normalization statistics"));
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0f64; 3];
    for scene in train_scenes {
        if let Some(gt) = &scene.pose3d {
            let roots = gt.data.index_axis(Axis(2), scene.skeleton.root_index);
            for v in roots.lanes(Axis(2)) {
                for c in 0..3 {
                    sq[c] += (v[c] - mean[c]).powi(2);
                }
            }
        }
    }
    let std = sq.map(|s| (s / count as f64).sqrt().max(ROOT_STD_FLOOR));
    Ok(RootNormStats { mean, std })
}

/// `(roots - mean) / std` on the trailing coordinate axis.
pub fn normalize_root(roots: &Array3<f64>, stats: &RootNormStats) -> Result<Array3<f64>> {
    stats.validate()?;
    check_coords(roots.dim().2)?;
    let mut out = roots.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        for c in 0..3 {
            lane[c] = (lane[c] - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(out)
}

pub fn denormalize_root(normalized: &Array3<f64>, stats: &RootNormStats) -> Result<Array3<f64>> {
    stats.validate()?;
    check_coords(normalized.dim().2)?;
    let mut out = normalized.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        for c in 0..3 {
            lane[c] = lane[c] * stats.std[c] + stats.mean[c];
        }
    }
    Ok(out)
}

fn check_coords(c: usize) -> Result<()> {
    if c != 3 {
        return Err(Error::invalid(format!("root arrays need 3 coordinates, got {c}")));
    }
    Ok(())
}

/// Pinhole projection of every joint. Joints behind the camera or outside the
/// image are marked invisible and carry the zero sentinel.
pub fn project_to_2d(pose3d: &PoseSeq3D, camera: &Camera) -> Result<PoseSeq2D> {
    camera.validate()?;
    let (t, p, j) = pose3d.dim();
    let mut data = Array4::zeros((t, p, j, 2));
    let mut vis = Array3::from_elem((t, p, j), false);
    for ti in 0..t {
        for pi in 0..p {
            for ji in 0..j {
                if let Some(uv) = camera.project_world_point(&pose3d.joint(ti, pi, ji)) {
                    if camera.in_image(uv) {
                        data[[ti, pi, ji, 0]] = uv[0];
                        data[[ti, pi, ji, 1]] = uv[1];
                        vis[[ti, pi, ji]] = true;
                    }
                }
            }
        }
    }
    Ok(PoseSeq2D { data, visibility: vis })
}

/// Maps pixel coordinates into roughly `[-1, 1]`: `x / w * 2 - 1` and
/// `y / w * 2 - h / w` (aspect preserving). Invisible joints map to 0.
pub fn normalize_2d(pose2d: &PoseSeq2D, image_size: (u32, u32)) -> Array4<f64> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Array4::zeros(pose2d.data.dim());
    for ((t, p, j), &vis) in pose2d.visibility.indexed_iter() {
        if vis {
            out[[t, p, j, 0]] = pose2d.data[[t, p, j, 0]] / w * 2.0 - 1.0;
            out[[t, p, j, 1]] = pose2d.data[[t, p, j, 1]] / w * 2.0 - h / w;
        }
    }
    out
}

/// The representation the diffusion model operates on: the root joint slot
/// holds the normalized absolute root, every other joint its root-relative offset.
pub fn to_representation(pose3d: &PoseSeq3D, skeleton: &Skeleton, stats: &RootNormStats) -> Result<Array4<f64>> {
    let (roots, mut rel) = split_root_relative(pose3d, skeleton)?;
    let norm = normalize_root(&roots, stats)?;
    rel.index_axis_mut(Axis(2), skeleton.root_index).assign(&norm);
    Ok(rel)
}

/// Inverse of [`to_representation`].
pub fn from_representation(repr: ArrayView4<f64>, skeleton: &Skeleton, stats: &RootNormStats) -> Result<PoseSeq3D> {
    check_root(skeleton, repr.dim().2)?;
    let norm = repr.index_axis(Axis(2), skeleton.root_index).to_owned();
    let roots = denormalize_root(&norm, stats)?;
    let mut rel = repr.to_owned();
    rel.index_axis_mut(Axis(2), skeleton.root_index).fill(0.0);
    compose_absolute(&roots, &rel, skeleton)
}

/// Per-bone lengths `[T, P, bones]` following `skeleton.edges`.
pub fn bone_lengths(pose3d: &PoseSeq3D, skeleton: &Skeleton) -> Array3<f64> {
    let (t, p, _) = pose3d.dim();
    let mut out = Array3::zeros((t, p, skeleton.edges.len()));
    for ti in 0..t {
        for pi in 0..p {
            for (b, &(a, c)) in skeleton.edges.iter().enumerate() {
                out[[ti, pi, b]] = (pose3d.joint(ti, pi, a) - pose3d.joint(ti, pi, c)).norm();
            }
        }
    }
    out
}
