//! Frame-to-frame identity assignment for per-frame 2D detections.
//!
//! Detections are matched to live tracks by optimal assignment on the mean
//! pixel distance between joints visible in both poses.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{PoseSeq2D, Skeleton};

/// Minimum-cost assignment for a rectangular matrix of finite costs.
/// Returns, for every row, the matched column; when there are more rows than
/// columns some rows stay unmatched.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let transposed: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = hungarian(&transposed);
        let mut out = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // shortest augmenting paths with row/column potentials; 1-based with a
    // virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// One person's 2D joints in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub joints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Mean distance over joints visible in both poses; infinite when none overlap.
pub fn pose_distance(a: &Detection, b: &Detection) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for k in 0..a.joints.len().min(b.joints.len()) {
        if a.visible[k] && b.visible[k] {
            sum += (a.joints[k][0] - b.joints[k][0]).hypot(a.joints[k][1] - b.joints[k][1]);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// (detection, track, cost)
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Optimal detection-to-track assignment. Pairs costing more than `gate`
/// (or with no overlapping joints) are never matched.
pub fn match_persons(detections: &[Detection], tracks: &[&Detection], gate: f64) -> Assignment {
    let costs: Vec<Vec<f64>> = detections
        .iter()
        .map(|d| tracks.iter().map(|t| pose_distance(d, t)).collect())
        .collect();
    let feasible = |c: f64| c.is_finite() && c <= gate;
    // forbidden pairs get a cost above any sum of feasible ones, so the
    // solver only uses them when nothing else is left
    let big = 1.0 + costs.iter().flatten().filter(|c| feasible(**c)).sum::<f64>() * 2.0 + gate;
    let padded: Vec<Vec<f64>> = costs
        .iter()
        .map(|r| r.iter().map(|&c| if feasible(c) { c } else { big }).collect())
        .collect();
    let rows = hungarian(&padded);
    let mut out = Assignment::default();
    let mut track_used = vec![false; tracks.len()];
    for (d, col) in rows.into_iter().enumerate() {
        match col {
            Some(t) if feasible(costs[d][t]) => {
                out.pairs.push((d, t, costs[d][t]));
                track_used[t] = true;
            }
            _ => out.unmatched_detections.push(d),
        }
    }
    out.unmatched_tracks = (0..tracks.len()).filter(|&t| !track_used[t]).collect();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Gate in pixels; `None` uses 10% of the image diagonal.
    pub gate: Option<f64>,
    /// Frames a track may go unmatched before it ends.
    pub patience: usize,
    /// Tracks with fewer detected frames are dropped at ingestion.
    pub min_length: usize,
    /// Joints with confidence at or below this are invisible.
    pub min_confidence: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { gate: None, patience: 10, min_length: 25, min_confidence: 0.0 }
    }
}

impl TrackerConfig {
    pub fn gate_for(&self, image_size: (u32, u32)) -> f64 {
        self.gate
            .unwrap_or_else(|| 0.1 * (image_size.0 as f64).hypot(image_size.1 as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub birth: usize,
    /// Last frame with a matched detection.
    pub last_seen: usize,
    /// Per frame, the matched detection (absent frames are `None`).
    pub poses: Vec<Option<Detection>>,
}

impl Track {
    pub fn length(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }

    fn last_pose(&self) -> &Detection {
        self.poses[self.last_seen].as_ref().expect("last_seen frame holds a pose")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub frames: usize,
    pub tracks: Vec<Track>,
}

/// Runs the tracker over all frames.
pub fn track(frames: &[Vec<Detection>], gate: f64, patience: usize) -> TrackSet {
    let n_frames = frames.len();
    let mut tracks: Vec<Track> = Vec::new();
    for (f, dets) in frames.iter().enumerate() {
        let live: Vec<usize> = (0..tracks.len())
            .filter(|&i| f - tracks[i].last_seen <= patience + 1)
            .collect();
        let refs: Vec<&Detection> = live.iter().map(|&i| tracks[i].last_pose()).collect();
        let a = match_persons(dets, &refs, gate);
        for &(d, t, _) in &a.pairs {
            let tr = &mut tracks[live[t]];
            tr.poses[f] = Some(dets[d].clone());
            tr.last_seen = f;
        }
        for &d in &a.unmatched_detections {
            let mut poses = vec![None; n_frames];
            poses[f] = Some(dets[d].clone());
            tracks.push(Track { id: tracks.len(), birth: f, last_seen: f, poses });
        }
    }
    TrackSet { frames: n_frames, tracks }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonDetection {
    pub joints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub people: Vec<PersonDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub frames: Vec<FrameDetections>,
}

impl DetectionFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("frames", e.to_string()))
    }

    fn detections(&self, skeleton: &Skeleton, min_confidence: f64) -> Result<Vec<Vec<Detection>>> {
        let j = skeleton.joint_count();
        self.frames
            .iter()
            .enumerate()
            .map(|(f, frame)| {
                frame
                    .people
                    .iter()
                    .enumerate()
                    .map(|(k, person)| {
                        if person.joints.len() != j {
                            return Err(Error::parse(
                                format!("frames[{f}].people[{k}].joints"),
                                format!("expected {j} joints for skeleton `{}`, got {}", skeleton.name, person.joints.len()),
                            ));
                        }
                        let visible = match &person.conf {
                            Some(c) if c.len() != j => {
                                return Err(Error::parse(
                                    format!("frames[{f}].people[{k}].conf"),
                                    format!("expected {j} confidences, got {}", c.len()),
                                ))
                            }
                            Some(c) => c.iter().map(|&v| v > min_confidence).collect(),
                            None => vec![true; j],
                        };
                        let visible = visible
                            .into_iter()
                            .zip(&person.joints)
                            .map(|(v, p)| v && p[0].is_finite() && p[1].is_finite())
                            .collect();
                        Ok(Detection { joints: person.joints.clone(), visible })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Tracks the detections and lays the retained tracks out as person slots,
/// ordered by first appearance.
pub fn ingest_detections(file: &DetectionFile, skeleton: &Skeleton, image_size: (u32, u32), config: &TrackerConfig) -> Result<PoseSeq2D> {
    let frames = file.detections(skeleton, config.min_confidence)?;
    let set = track(&frames, config.gate_for(image_size), config.patience);
    let kept: Vec<&Track> = set.tracks.iter().filter(|t| t.length() >= config.min_length).collect();
    let (t_len, p, j) = (set.frames, kept.len(), skeleton.joint_count());
    let mut data = Array4::zeros((t_len, p, j, 2));
    let mut vis = Array3::from_elem((t_len, p, j), false);
    for (slot, tr) in kept.iter().enumerate() {
        for (f, pose) in tr.poses.iter().enumerate() {
            if let Some(d) = pose {
                for k in 0..j {
                    data[[f, slot, k, 0]] = d.joints[k][0];
                    data[[f, slot, k, 1]] = d.joints[k][1];
                    vis[[f, slot, k]] = d.visible[k];
                }
            }
        }
    }
    PoseSeq2D::new(data, vis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_group_scene, SynthConfig};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_min(cost: &[Vec<f64>]) -> f64 {
        let (n, m) = (cost.len(), cost[0].len());
        let k = n.min(m);
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
            if left == 0 {
                *best = best.min(acc);
                return;
            }
            if row == cost.len() {
                return;
            }
            // rows may be skipped only when there are more rows than columns
            if cost.len() - row > left {
                rec(cost, row + 1, used, left, acc, best);
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, left - 1, acc + cost[row][j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; m], k, 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (n, m) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
            let asg = hungarian(&cost);
            let used: Vec<usize> = asg.iter().flatten().copied().collect();
            let mut dedup = used.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), used.len());
            assert_eq!(used.len(), n.min(m));
            let total: f64 = asg.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[i][j])).sum();
            assert!((total - brute_min(&cost)).abs() < 1e-9);
        }
    }

    fn det(points: &[[f64; 2]]) -> Detection {
        Detection { joints: points.to_vec(), visible: vec![true; points.len()] }
    }

    #[test]
    fn match_examples() {
        let a = det(&[[10.0, 10.0], [20.0, 20.0]]);
        let r = match_persons(&[a.clone()], &[&a], 50.0);
        assert_eq!(r.pairs, vec![(0, 0, 0.0)]);
        // greedy would take the cheapest pair (d0, t0) = 1 and leave 100;
        // the optimum is 10 + 10
        let d0 = det(&[[0.0, 0.0]]);
        let d1 = det(&[[11.0, 0.0]]);
        let t0 = det(&[[1.0, 0.0]]);
        let t1 = det(&[[-10.0, 0.0]]);
        let costs = [[1.0, 10.0], [10.0, 21.0]];
        assert_eq!(pose_distance(&d0, &t0), costs[0][0]);
        let r = match_persons(&[d0.clone(), d1.clone()], &[&t1, &t0], 1000.0);
        let total: f64 = r.pairs.iter().map(|p| p.2).sum();
        assert_eq!(total, 20.0);
        let far = det(&[[500.0, 500.0]]);
        let r = match_persons(&[far], &[&t0], 50.0);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_detections, vec![0]);
        let mut hidden = t0.clone();
        hidden.visible = vec![false];
        assert_eq!(pose_distance(&d0, &hidden), f64::INFINITY);
    }

    fn file_from(frames: Vec<Vec<Vec<[f64; 2]>>>) -> DetectionFile {
        DetectionFile {
            frames: frames
                .into_iter()
                .map(|people| FrameDetections {
                    people: people.into_iter().map(|joints| PersonDetection { joints, conf: None }).collect(),
                })
                .collect(),
        }
    }

    fn skel3() -> Skeleton {
        Skeleton::new("tri", &[("a", None), ("b", Some(0)), ("c", Some(0))]).unwrap()
    }

    #[test]
    fn ingest_examples() {
        let cfg = TrackerConfig { min_length: 5, ..Default::default() };
        let pose = vec![[100.0, 100.0], [110.0, 100.0], [90.0, 100.0]];
        let f = file_from(vec![vec![pose.clone()]; 30]);
        let out = ingest_detections(&f, &skel3(), (640, 480), &cfg).unwrap();
        assert_eq!(out.dim(), (30, 1, 3));
        assert!(out.visibility.iter().all(|v| *v));

        let other = vec![[400.0, 300.0], [410.0, 300.0], [390.0, 300.0]];
        let frames: Vec<_> = (0..30).map(|f| if f < 15 { vec![pose.clone()] } else { vec![other.clone()] }).collect();
        let out = ingest_detections(&file_from(frames), &skel3(), (640, 480), &cfg).unwrap();
        assert_eq!(out.dim().1, 2);
        for t in 0..30 {
            assert_ne!(out.visibility[[t, 0, 0]], out.visibility[[t, 1, 0]]);
        }

        let bad = file_from(vec![vec![vec![[0.0, 0.0]; 2]]]);
        match ingest_detections(&bad, &skel3(), (640, 480), &cfg) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "frames[0].people[0].joints"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn confidence_controls_visibility() {
        let mut f = file_from(vec![vec![vec![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]]]);
        f.frames[0].people[0].conf = Some(vec![0.9, 0.0, 0.5]);
        let cfg = TrackerConfig { min_length: 1, ..Default::default() };
        let out = ingest_detections(&f, &skel3(), (640, 480), &cfg).unwrap();
        assert_eq!(out.visibility.iter().copied().collect::<Vec<_>>(), vec![true, false, true]);
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<DetectionFile>(&text).unwrap(), f);
    }

    #[test]
    fn synthetic_round_trip() {
        let cfg = SynthConfig { frames: 90, persons: (3, 5), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..4 {
            let sc = generate_group_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (t_len, p, j) = sc.pose2d.dim();
            let mut truth = Vec::new();
            let frames: Vec<FrameDetections> = (0..t_len)
                .map(|t| {
                    let mut order: Vec<usize> = (0..p)
                        .filter(|&i| (0..j).any(|k| sc.pose2d.visibility[[t, i, k]]))
                        .collect();
                    order.shuffle(&mut rng);
                    truth.push(order.clone());
                    FrameDetections {
                        people: order
                            .iter()
                            .map(|&i| PersonDetection {
                                joints: (0..j).map(|k| [sc.pose2d.data[[t, i, k, 0]], sc.pose2d.data[[t, i, k, 1]]]).collect(),
                                conf: Some((0..j).map(|k| if sc.pose2d.visibility[[t, i, k]] { 1.0 } else { 0.0 }).collect()),
                            })
                            .collect(),
                    }
                })
                .collect();
            let file = DetectionFile { frames };
            let out = ingest_detections(&file, &sc.skeleton, sc.camera.image_size, &TrackerConfig::default()).unwrap();
            assert_eq!(out.dim().1, p);
            // each slot maps to the ground-truth person it matches on most frames
            let (mut correct, mut total) = (0usize, 0usize);
            for slot in 0..p {
                let mut votes = vec![0usize; p];
                let mut frames_seen = 0;
                for t in 0..t_len {
                    if !(0..j).any(|k| out.visibility[[t, slot, k]]) {
                        continue;
                    }
                    frames_seen += 1;
                    for i in 0..p {
                        let same = (0..j).all(|k| out.data[[t, slot, k, 0]] == sc.pose2d.data[[t, i, k, 0]] && out.data[[t, slot, k, 1]] == sc.pose2d.data[[t, i, k, 1]]);
                        if same {
                            votes[i] += 1;
                        }
                    }
                }
                correct += votes.iter().max().unwrap();
                total += frames_seen;
            }
            assert!(correct as f64 >= 0.99 * total as f64, "{correct}/{total}");
        }
    }
}
