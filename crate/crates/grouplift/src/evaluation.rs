//! MPJPE metrics, in-frame filtering, model runners and the occlusion study.
//!
//! All metrics are a single flat mean over the counted (frame, person, joint)
//! triples, in millimeters.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{aggregate, sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::pose::{in_image, PoseSeq2D, PoseSeq3D, Scene};
use crate::synthdata::apply_occlusion;

/// A metric value with the number of joints it averages over; a count of 0
/// marks an empty metric (value 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mm: f64,
    pub count: usize,
}

impl Metric {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn from_sum(sum: f64, count: usize) -> Self {
        Metric {
            mm: if count > 0 { sum / count as f64 * 1000.0 } else { 0.0 },
            count,
        }
    }
}

fn check_shapes(pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> Result<()> {
    if pred.dim() != gt.dim() || pred.dim() != mask.dim() {
        return Err(Error::invalid(format!(
            "metric shapes disagree: pred {:?}, gt {:?}, mask {:?}",
            pred.dim(),
            gt.dim(),
            mask.dim()
        )));
    }
    if root >= pred.dim().2 {
        return Err(Error::invalid(format!("root index {root} out of range")));
    }
    Ok(())
}

fn dist(a: &Array4<f64>, b: &Array4<f64>, t: usize, p: usize, j: usize, offset_a: [f64; 3], offset_b: [f64; 3]) -> f64 {
    (0..3)
        .map(|c| ((a[[t, p, j, c]] - offset_a[c]) - (b[[t, p, j, c]] - offset_b[c])).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn root_of(a: &Array4<f64>, t: usize, p: usize, root: usize) -> [f64; 3] {
    [a[[t, p, root, 0]], a[[t, p, root, 1]], a[[t, p, root, 2]]]
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    rel: (f64, usize),
    abs: (f64, usize),
    root: (f64, usize),
}

fn sums(pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> Result<Sums> {
    check_shapes(pred, gt, mask, root)?;
    let (a, b) = (&pred.data, &gt.data);
    let mut s = Sums::default();
    for ((t, p, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let d = dist(a, b, t, p, j, [0.0; 3], [0.0; 3]);
        s.abs.0 += d;
        s.abs.1 += 1;
        if j == root {
            s.root.0 += d;
            s.root.1 += 1;
        } else {
            s.rel.0 += dist(a, b, t, p, j, root_of(a, t, p, root), root_of(b, t, p, root));
            s.rel.1 += 1;
        }
    }
    Ok(s)
}

/// Root-aligned error over visible non-root joints.
pub fn mpjpe_rel(pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> Result<Metric> {
    let s = sums(pred, gt, mask, root)?;
    Ok(Metric::from_sum(s.rel.0, s.rel.1))
}

/// World-frame error over all visible joints.
pub fn mpjpe_abs(pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> Result<Metric> {
    let s = sums(pred, gt, mask, root)?;
    Ok(Metric::from_sum(s.abs.0, s.abs.1))
}

/// World-frame error over visible root joints.
pub fn mpjpe_root(pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> Result<Metric> {
    let s = sums(pred, gt, mask, root)?;
    Ok(Metric::from_sum(s.root.0, s.root.1))
}

/// Visible joints whose pixel coordinates lie in `[0, w) x [0, h)`.
pub fn in_frame_mask(pose2d: &PoseSeq2D, image_size: (u32, u32)) -> Array3<bool> {
    let mut mask = pose2d.visibility.clone();
    for ((t, p, j), m) in mask.indexed_iter_mut() {
        *m = *m && in_image([pose2d.data[[t, p, j, 0]], pose2d.data[[t, p, j, 1]]], image_size);
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRow {
    pub n: usize,
    pub mpjpe_rel_mm: f64,
    pub mpjpe_abs_mm: f64,
    pub joints_counted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_rel: f64,
    pub mpjpe_abs: f64,
    pub mpjpe_root: f64,
    pub count_rel: usize,
    pub count_abs: usize,
    pub count_root: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<Vec<OcclusionRow>>,
}

/// Running sums for merging several scenes into one report.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sums: Sums,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> Result<()> {
        let s = sums(pred, gt, mask, root)?;
        for (acc, x) in [(&mut self.sums.rel, s.rel), (&mut self.sums.abs, s.abs), (&mut self.sums.root, s.root)] {
            acc.0 += x.0;
            acc.1 += x.1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let rel = Metric::from_sum(self.sums.rel.0, self.sums.rel.1);
        let abs = Metric::from_sum(self.sums.abs.0, self.sums.abs.1);
        let root = Metric::from_sum(self.sums.root.0, self.sums.root.1);
        MetricsReport {
            mpjpe_rel: rel.mm,
            mpjpe_abs: abs.mm,
            mpjpe_root: root.mm,
            count_rel: rel.count,
            count_abs: abs.count,
            count_root: root.count,
            occlusion: None,
        }
    }
}

/// Anything that maps a scene's 2D input to absolute 3D poses.
pub trait ModelRunner {
    fn lift(&self, scene: &Scene) -> Result<PoseSeq3D>;
}

/// Adapts a closure into a runner.
pub struct FnRunner<F>(pub F);

impl<F: Fn(&Scene) -> Result<PoseSeq3D>> ModelRunner for FnRunner<F> {
    fn lift(&self, scene: &Scene) -> Result<PoseSeq3D> {
        (self.0)(scene)
    }
}

impl<R: ModelRunner + ?Sized> ModelRunner for &R {
    fn lift(&self, scene: &Scene) -> Result<PoseSeq3D> {
        (**self).lift(scene)
    }
}

/// Diffusion sampling followed by hypothesis averaging.
#[derive(Debug, Clone)]
pub struct DiffusionLifter {
    pub model: Denoiser,
    pub sampler: SamplerConfig,
    pub schedule: NoiseSchedule,
}

impl DiffusionLifter {
    pub fn new(model: Denoiser, sampler: SamplerConfig, schedule: NoiseSchedule) -> Result<Self> {
        sampler.validate(&schedule)?;
        Ok(DiffusionLifter { model, sampler, schedule })
    }
}

impl ModelRunner for DiffusionLifter {
    fn lift(&self, scene: &Scene) -> Result<PoseSeq3D> {
        aggregate(&sample(scene, &self.model, &self.sampler, &self.schedule)?)
    }
}

/// Lifts every person on their own, as a one-person scene.
#[derive(Debug, Clone)]
pub struct SinglePersonMode<R> {
    pub inner: R,
}

pub fn single_person_mode<R: ModelRunner>(runner: R) -> SinglePersonMode<R> {
    SinglePersonMode { inner: runner }
}

impl<R: ModelRunner> ModelRunner for SinglePersonMode<R> {
    fn lift(&self, scene: &Scene) -> Result<PoseSeq3D> {
        let (t, p, j) = scene.pose2d.dim();
        let mut out = Array4::zeros((t, p, j, 3));
        for person in 0..p {
            let pred = self.inner.lift(&scene.select_persons(&[person])?)?;
            if pred.dim() != (t, 1, j) {
                return Err(Error::invalid("runner changed the scene shape"));
            }
            out.index_axis_mut(Axis(1), person).assign(&pred.data.index_axis(Axis(1), 0));
        }
        PoseSeq3D::new(out)
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Evaluates `runner` on scenes whose 2D input has up to `occlusion` joints
/// per (frame, person) hidden. Metrics count every in-frame joint of the
/// unoccluded input, so hidden joints are scored too.
pub fn evaluate<R: ModelRunner>(runner: &R, scenes: &[Scene], occlusion: usize, seed: u64) -> Result<MetricsReport> {
    let mut acc = MetricAccumulator::default();
    for (i, scene) in scenes.iter().enumerate() {
        let gt = scene
            .pose3d
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("scene {i} has no 3D ground truth")))?;
        let mask = in_frame_mask(&scene.pose2d, scene.camera.image_size);
        let input = if occlusion == 0 {
            scene.clone()
        } else {
            apply_occlusion(scene, occlusion, &mut scene_rng(seed, i))?
        };
        let pred = runner.lift(&input)?;
        acc.add(&pred, gt, &mask, scene.skeleton.root_index)?;
    }
    Ok(acc.report())
}

/// One [`evaluate`] per occlusion level, rows sorted by level.
pub fn occlusion_study<R: ModelRunner>(runner: &R, scenes: &[Scene], levels: &[usize], seed: u64) -> Result<Vec<OcclusionRow>> {
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels
        .into_iter()
        .map(|n| {
            let r = evaluate(runner, scenes, n, seed)?;
            Ok(OcclusionRow {
                n,
                mpjpe_rel_mm: r.mpjpe_rel,
                mpjpe_abs_mm: r.mpjpe_abs,
                joints_counted: r.count_abs,
            })
        })
        .collect()
}

/// Writes rows with the header `n,mpjpe_rel_mm,mpjpe_abs_mm,joints_counted`.
pub fn write_occlusion_csv(rows: &[OcclusionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_group_scene, SynthConfig};
    use ndarray::Array;
    use rand::Rng;

    fn rand_pose(rng: &mut ChaCha8Rng, t: usize, p: usize, j: usize) -> PoseSeq3D {
        PoseSeq3D::new(Array::from_shape_fn((t, p, j, 3), |_| rng.random_range(-2.0..2.0))).unwrap()
    }

    fn brute(pred: &PoseSeq3D, gt: &PoseSeq3D, mask: &Array3<bool>, root: usize) -> (f64, f64, f64) {
        let (t, p, j) = pred.dim();
        let (mut r, mut nr, mut a, mut na, mut o, mut no) = (0.0, 0, 0.0, 0, 0.0, 0);
        for ti in 0..t {
            for pi in 0..p {
                let pr = pred.joint(ti, pi, root);
                let gr = gt.joint(ti, pi, root);
                for ji in 0..j {
                    if !mask[[ti, pi, ji]] {
                        continue;
                    }
                    let e = (pred.joint(ti, pi, ji) - gt.joint(ti, pi, ji)).norm();
                    a += e;
                    na += 1;
                    if ji == root {
                        o += e;
                        no += 1;
                    } else {
                        r += ((pred.joint(ti, pi, ji) - pr) - (gt.joint(ti, pi, ji) - gr)).norm();
                        nr += 1;
                    }
                }
            }
        }
        let f = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 * 1000.0 };
        (f(r, nr), f(a, na), f(o, no))
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (t, p, j) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..6));
            let pred = rand_pose(&mut rng, t, p, j);
            let gt = rand_pose(&mut rng, t, p, j);
            let mask = Array3::from_shape_fn((t, p, j), |_| rng.random_bool(0.7));
            let root = rng.random_range(0..j);
            let (r, a, o) = brute(&pred, &gt, &mask, root);
            assert!((mpjpe_rel(&pred, &gt, &mask, root).unwrap().mm - r).abs() < 1e-9);
            assert!((mpjpe_abs(&pred, &gt, &mask, root).unwrap().mm - a).abs() < 1e-9);
            assert!((mpjpe_root(&pred, &gt, &mask, root).unwrap().mm - o).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = rand_pose(&mut rng, 2, 2, 4);
        let mask = Array3::from_elem((2, 2, 4), true);
        for f in [mpjpe_rel, mpjpe_abs, mpjpe_root] {
            assert_eq!(f(&gt, &gt, &mask, 0).unwrap().mm, 0.0);
        }
        // per-person translation leaves the relative error at zero; dyadic
        // values keep the float arithmetic exact
        let gt = PoseSeq3D::new(gt.data.mapv(|v| (v * 1024.0).round() / 1024.0)).unwrap();
        let mut moved = gt.clone();
        for p in 0..2 {
            let shift = [0.25 * p as f64 + 0.125, -0.5, 1.375];
            for t in 0..2 {
                for j in 0..4 {
                    for c in 0..3 {
                        moved.data[[t, p, j, c]] += shift[c];
                    }
                }
            }
        }
        assert_eq!(mpjpe_rel(&moved, &gt, &mask, 0).unwrap().mm, 0.0);
        let mut shifted = gt.clone();
        shifted.data.index_axis_mut(Axis(3), 0).mapv_inplace(|v| v + 0.003);
        shifted.data.index_axis_mut(Axis(3), 1).mapv_inplace(|v| v + 0.004);
        assert!((mpjpe_abs(&shifted, &gt, &mask, 0).unwrap().mm - 5.0).abs() < 1e-9);
        let mut root_off = gt.clone();
        root_off.data.index_axis_mut(Axis(2), 0).index_axis_mut(Axis(2), 2).mapv_inplace(|v| v + 0.02);
        assert!((mpjpe_root(&root_off, &gt, &mask, 0).unwrap().mm - 20.0).abs() < 1e-9);
        let mut one = gt.clone();
        one.data[[0, 0, 2, 0]] += 0.01;
        let counted = 2 * 2 * 3;
        assert!((mpjpe_rel(&one, &gt, &mask, 0).unwrap().mm - 10.0 / counted as f64).abs() < 1e-9);
        let empty = Array3::from_elem((2, 2, 4), false);
        assert!(mpjpe_abs(&one, &gt, &empty, 0).unwrap().is_empty());
    }

    #[test]
    fn metrics_ignore_joint_person_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = rand_pose(&mut rng, 3, 4, 5);
        let gt = rand_pose(&mut rng, 3, 4, 5);
        let mask = Array3::from_shape_fn((3, 4, 5), |_| rng.random_bool(0.6));
        let order = [2, 0, 3, 1];
        let pp = PoseSeq3D::new(pred.data.select(Axis(1), &order)).unwrap();
        let gp = PoseSeq3D::new(gt.data.select(Axis(1), &order)).unwrap();
        let mp = mask.select(Axis(1), &order);
        for f in [mpjpe_rel, mpjpe_abs, mpjpe_root] {
            let a = f(&pred, &gt, &mask, 1).unwrap();
            let b = f(&pp, &gp, &mp, 1).unwrap();
            assert!((a.mm - b.mm).abs() < 1e-9 && a.count == b.count);
        }
    }

    #[test]
    fn in_frame_boundaries() {
        let data = Array::from_shape_vec((1, 1, 4, 2), vec![-1.0, 10.0, 0.0, 0.0, 639.9, 479.9, 640.0, 10.0]).unwrap();
        let pose = PoseSeq2D { data, visibility: Array3::from_elem((1, 1, 4), true) };
        let m = in_frame_mask(&pose, (640, 480));
        assert_eq!(m.iter().copied().collect::<Vec<_>>(), vec![false, true, true, false]);
    }

    fn gt_runner(scene: &Scene) -> Result<PoseSeq3D> {
        Ok(scene.pose3d.clone().unwrap())
    }

    #[test]
    fn occlusion_study_rows() {
        let cfg = SynthConfig { frames: 6, ..Default::default() };
        let scenes: Vec<Scene> = (0..2)
            .map(|i| generate_group_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(i)).unwrap())
            .collect();
        // a runner that only sees the 2D input: visible joints of the input
        // keep their ground truth, hidden ones collapse to the origin
        let runner = FnRunner(|s: &Scene| -> Result<PoseSeq3D> {
            let mut out = s.pose3d.clone().unwrap();
            for ((t, p, j), &v) in s.pose2d.visibility.indexed_iter() {
                if !v {
                    for c in 0..3 {
                        out.data[[t, p, j, c]] = 0.0;
                    }
                }
            }
            Ok(out)
        });
        let rows = occlusion_study(&runner, &scenes, &[3, 0, 1], 5).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![0, 1, 3]);
        let clean = evaluate(&runner, &scenes, 0, 5).unwrap();
        assert_eq!(rows[0].mpjpe_abs_mm, clean.mpjpe_abs);
        assert_eq!(rows[0].mpjpe_abs_mm, 0.0);
        assert!(rows[2].mpjpe_abs_mm > 0.0);
        assert!(rows.iter().all(|r| r.joints_counted == clean.count_abs));
        assert_eq!(rows, occlusion_study(&runner, &scenes, &[3, 0, 1], 5).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("occ.csv");
        write_occlusion_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,mpjpe_rel_mm,mpjpe_abs_mm,joints_counted");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn single_person_mode_keeps_shapes_and_splits_persons() {
        let cfg = SynthConfig { frames: 4, persons: (3, 3), ..Default::default() };
        let sc = generate_group_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let seen = std::cell::RefCell::new(Vec::new());
        let runner = FnRunner(|s: &Scene| -> Result<PoseSeq3D> {
            seen.borrow_mut().push(s.persons());
            gt_runner(s)
        });
        let single = single_person_mode(&runner);
        let out = single.lift(&sc).unwrap();
        assert_eq!(out, sc.pose3d.clone().unwrap());
        assert_eq!(*seen.borrow(), vec![1, 1, 1]);
        let one = sc.select_persons(&[1]).unwrap();
        assert_eq!(single.lift(&one).unwrap(), gt_runner(&one).unwrap());
    }
}
