use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A joint layout: joint names, the kinematic tree and the root (hip-center) joint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub name: String,
    pub joint_names: Vec<String>,
    pub root_index: usize,
    /// Parent of each joint; `None` only for the root.
    pub parents: Vec<Option<usize>>,
    /// Bones as `(parent, child)` pairs, used for plotting and bone-length checks.
    pub edges: Vec<(usize, usize)>,
}

// Panoptic-style 15 joint layout. Index 2 is the body center (hip center).
const MPI15_JOINTS: [(&str, Option<usize>); 15] = [
    ("neck", Some(2)),
    ("nose", Some(0)),
    ("body_center", None),
    ("l_shoulder", Some(0)),
    ("l_elbow", Some(3)),
    ("l_wrist", Some(4)),
    ("l_hip", Some(2)),
    ("l_knee", Some(6)),
    ("l_ankle", Some(7)),
    ("r_shoulder", Some(0)),
    ("r_elbow", Some(9)),
    ("r_wrist", Some(10)),
    ("r_hip", Some(2)),
    ("r_knee", Some(12)),
    ("r_ankle", Some(13)),
];

const COCO19_EXTRA: [(&str, Option<usize>); 4] = [
    ("l_eye", Some(1)),
    ("l_ear", Some(1)),
    ("r_eye", Some(1)),
    ("r_ear", Some(1)),
];

impl Skeleton {
    pub fn new(name: impl Into<String>, joints: &[(&str, Option<usize>)]) -> Result<Self> {
        let joint_names: Vec<String> = joints.iter().map(|(n, _)| n.to_string()).collect();
        let parents: Vec<Option<usize>> = joints.iter().map(|(_, p)| *p).collect();
        let roots: Vec<usize> = parents
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_none())
            .map(|(i, _)| i)
            .collect();
        if roots.len() != 1 {
            return Err(Error::invalid(format!(
                "skeleton needs exactly one root joint, found {}",
                roots.len()
            )));
        }
        let j = joints.len();
        let mut edges = Vec::with_capacity(j.saturating_sub(1));
        for (child, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                if p >= j || p == child {
                    return Err(Error::invalid(format!(
                        "joint {child} has invalid parent {p}"
                    )));
                }
                edges.push((p, child));
            }
        }
        let skeleton = Skeleton {
            name: name.into(),
            joint_names,
            root_index: roots[0],
            parents,
            edges,
        };
        // every joint must reach the root
        for start in 0..j {
            let mut cur = start;
            for _ in 0..=j {
                match skeleton.parents[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            if cur != skeleton.root_index {
                return Err(Error::invalid(format!("joint {start} is part of a cycle")));
            }
        }
        Ok(skeleton)
    }

    /// The 15 joint MPI/Panoptic layout.
    pub fn mpi15() -> Self {
        Self::new("mpi15", &MPI15_JOINTS).expect("built-in skeleton is valid")
    }

    /// The 19 joint COCO19 layout (MPI15 plus eyes and ears).
    pub fn coco19() -> Self {
        let joints: Vec<_> = MPI15_JOINTS.iter().chain(COCO19_EXTRA.iter()).copied().collect();
        Self::new("coco19", &joints).expect("built-in skeleton is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mpi15" => Ok(Self::mpi15()),
            "coco19" => Ok(Self::coco19()),
            other => Err(Error::parse(
                "skeleton",
                format!("unknown skeleton `{other}` (expected `coco19` or `mpi15`)"),
            )),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    /// Joints in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root_index];
        let mut i = 0;
        while i < order.len() {
            let cur = order[i];
            for (child, parent) in self.parents.iter().enumerate() {
                if *parent == Some(cur) {
                    order.push(child);
                }
            }
            i += 1;
        }
        order
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }
}
