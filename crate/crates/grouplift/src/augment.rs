//! Person-order permutations that expand one training sample into several.
//!
//! Person encodings are assigned by output position, so every reordering
//! presents the same group to the model under a different slot assignment.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pose::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermutationPlan {
    pub n_sup: usize,
    pub n_sub: usize,
    pub seed: u64,
}

impl PermutationPlan {
    pub fn new(n_sup: usize, n_sub: usize, seed: u64) -> Self {
        PermutationPlan { n_sup, n_sub, seed }
    }
}

/// Reorders the person axis of every per-person field.
pub fn permute_scene(scene: &Scene, order: &[usize]) -> Scene {
    scene
        .select_persons(order)
        .expect("permutation indices come from the scene itself")
}

/// `n_sup` copies of the scene, each under an independent uniform person order.
pub fn superset_permutations(scene: &Scene, n_sup: usize, rng: &mut impl Rng) -> Vec<Scene> {
    let p = scene.persons();
    (0..n_sup)
        .map(|_| {
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(rng);
            permute_scene(scene, &order)
        })
        .collect()
}

/// Sizes of the subsets drawn for `n_sub` with `p` persons: the larger size
/// `p - 1` gets the odd extra draw. When `p - 2` is empty its share moves to
/// `p - 1`; when `p - 1` is empty too, nothing is drawn.
pub fn subset_sizes(p: usize, n_sub: usize) -> Vec<usize> {
    let big = p.saturating_sub(1);
    let small = p.saturating_sub(2);
    if big == 0 {
        if n_sub > 0 {
            log::warn!("scene with {p} person(s) has no non-empty subsets; dropping {n_sub} subset permutations");
        }
        return Vec::new();
    }
    if small == 0 {
        return vec![big; n_sub];
    }
    let n_big = n_sub.div_ceil(2);
    let mut sizes = vec![big; n_big];
    sizes.extend(std::iter::repeat_n(small, n_sub - n_big));
    sizes
}

/// Random subsets of persons in random order, sized per [`subset_sizes`].
pub fn subset_permutations(scene: &Scene, n_sub: usize, rng: &mut impl Rng) -> Vec<Scene> {
    let p = scene.persons();
    subset_sizes(p, n_sub)
        .into_iter()
        .map(|k| {
            let mut all: Vec<usize> = (0..p).collect();
            // partial Fisher-Yates: the first k entries are a uniform
            // ordered draw without replacement
            let (chosen, _) = all.partial_shuffle(rng, k);
            permute_scene(scene, chosen)
        })
        .collect()
}

/// The original scene followed by its superset and subset permutations.
pub fn expand_sample(scene: &Scene, plan: &PermutationPlan, rng: &mut impl Rng) -> Vec<Scene> {
    let mut out = Vec::with_capacity(1 + plan.n_sup + plan.n_sub);
    out.push(scene.clone());
    out.extend(superset_permutations(scene, plan.n_sup, rng));
    out.extend(subset_permutations(scene, plan.n_sub, rng));
    out
}
