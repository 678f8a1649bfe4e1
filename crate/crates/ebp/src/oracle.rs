//! Offline ground truth: explicit crossing trees built top-down, the
//! martingale refinement of durations, lattice walks read off a tree, and a
//! pruned sampler for the leaf durations of the first coarse crossing.
//!
//! Where the on-line engine grows the tree upward from the origin with
//! reversed chains, the oracle builds the same laws downward from a root.
//! For two-state orientation chains the two constructions induce identical
//! joint laws, which is what makes engine/oracle comparisons exact.

use crate::model::{ModelError, ModelSpec, OffspringPattern, Orientation, SpectralSummary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("tree of depth {depth} exceeds the node cap {cap}")]
    CapExceeded { depth: usize, cap: u64 },
    #[error("walk level {level} exceeds tree depth {depth}")]
    LevelTooDeep { level: usize, depth: usize },
}

/// The family below one crossing: pattern, weights, and child nodes in slot
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFamily {
    pub pattern: OffspringPattern,
    pub weights: Vec<f64>,
    pub children: Vec<CrossingNode>,
}

/// One crossing in an explicit tree. Nodes at the tree's finest depth carry
/// no family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingNode {
    pub orientation: Orientation,
    pub family: Option<NodeFamily>,
}

/// An explicit crossing tree of fixed depth, with the spectral quantities of
/// its model attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTree {
    pub root: CrossingNode,
    pub depth: usize,
    pub spectral: SpectralSummary,
    pub seed: u64,
    model: ModelSpec,
}

/// Time convention for walks read off a tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WalkMode {
    /// Counting time: every crossing at walk level n lasts mu^-n.
    Cebp,
    /// Multifractal time: a crossing lasts its path weight times the
    /// martingale value of its subtree.
    Mebp,
}

/// One step of a walk read off a tree: time and position after the step,
/// in units of the root crossing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkPoint {
    pub t: f64,
    pub y: f64,
    pub o: Orientation,
    pub d: f64,
}

/// Builds a tree whose root orientation is drawn from the stationary
/// first-crossing law.
pub fn build_tree(
    model: &ModelSpec,
    depth: usize,
    seed: u64,
    cap: u64,
) -> Result<OracleTree, OracleError> {
    let spectral = model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root_orientation = if rng.random::<f64>() < spectral.fixed_point_a {
        Orientation::Up
    } else {
        Orientation::Down
    };
    build_with(
        model,
        spectral,
        depth,
        seed,
        root_orientation,
        &mut rng,
        cap,
    )
}

/// Builds a tree with a prescribed root orientation.
pub fn build_tree_with_root(
    model: &ModelSpec,
    depth: usize,
    seed: u64,
    cap: u64,
    root_orientation: Orientation,
) -> Result<OracleTree, OracleError> {
    let spectral = model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_with(
        model,
        spectral,
        depth,
        seed,
        root_orientation,
        &mut rng,
        cap,
    )
}

fn build_with(
    model: &ModelSpec,
    spectral: SpectralSummary,
    depth: usize,
    seed: u64,
    root_orientation: Orientation,
    rng: &mut ChaCha8Rng,
    cap: u64,
) -> Result<OracleTree, OracleError> {
    // Mean node count mu^depth; refuse upfront when even the mean is over
    // budget, then enforce the cap exactly during construction.
    if spectral.mu.powi(depth as i32) > cap as f64 {
        return Err(OracleError::CapExceeded { depth, cap });
    }
    let mut budget = cap;
    let root = build_node(model, root_orientation, depth, rng, &mut budget)
        .ok_or(OracleError::CapExceeded { depth, cap })?;
    Ok(OracleTree {
        root,
        depth,
        spectral,
        seed,
        model: model.clone(),
    })
}

/// Depth-first construction: family (pattern then weights), then children
/// left to right. Returns None when the node budget runs out.
fn build_node<R: Rng + ?Sized>(
    model: &ModelSpec,
    orientation: Orientation,
    depth_left: usize,
    rng: &mut R,
    budget: &mut u64,
) -> Option<CrossingNode> {
    if *budget == 0 {
        return None;
    }
    *budget -= 1;
    if depth_left == 0 {
        return Some(CrossingNode {
            orientation,
            family: None,
        });
    }
    let (pattern, weights) = model.draw_family(orientation, rng);
    let mut children = Vec::with_capacity(pattern.size());
    for slot in 1..=pattern.size() {
        children.push(build_node(
            model,
            pattern.entry(slot),
            depth_left - 1,
            rng,
            budget,
        )?);
    }
    Some(CrossingNode {
        orientation,
        family: Some(NodeFamily {
            pattern,
            weights,
            children,
        }),
    })
}

/// Martingale value of a subtree: v(orientation) at the finest depth, else
/// the weight-weighted sum over children, accumulated in slot order.
fn node_w(node: &CrossingNode, v: [f64; 2]) -> f64 {
    match &node.family {
        None => v[node.orientation.index()],
        Some(fam) => {
            let mut acc = 0.0;
            for (w, child) in fam.weights.iter().zip(&fam.children) {
                acc += w * node_w(child, v);
            }
            acc
        }
    }
}

impl OracleTree {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Martingale value of the whole tree; unbiased for v(root orientation).
    pub fn refine_w(&self) -> f64 {
        node_w(&self.root, self.spectral.right_v)
    }

    /// Reads off the lattice walk at `level` subcrossing scales below the
    /// root: positions move by 2^-level per step starting from (0, 0).
    pub fn walk(&self, level: usize, mode: WalkMode) -> Result<Vec<WalkPoint>, OracleError> {
        if level > self.depth {
            return Err(OracleError::LevelTooDeep {
                level,
                depth: self.depth,
            });
        }
        let dy = 2f64.powi(-(level as i32));
        let cebp_d = self.spectral.mu.powi(-(level as i32));
        let mut points = Vec::new();
        let mut t = 0.0;
        let mut y = 0.0;
        visit_level(&self.root, level, 0.0, &mut |node, log_path| {
            let d = match mode {
                WalkMode::Cebp => cebp_d,
                WalkMode::Mebp => log_path.exp() * node_w(node, self.spectral.right_v),
            };
            t += d;
            y += dy * node.orientation.sign() as f64;
            points.push(WalkPoint {
                t,
                y,
                o: node.orientation,
                d,
            });
        });
        Ok(points)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Total number of crossings in the tree.
    pub fn node_count(&self) -> u64 {
        fn count(node: &CrossingNode) -> u64 {
            1 + node
                .family
                .iter()
                .flat_map(|f| f.children.iter())
                .map(count)
                .sum::<u64>()
        }
        count(&self.root)
    }
}

fn visit_level<F: FnMut(&CrossingNode, f64)>(
    node: &CrossingNode,
    level: usize,
    log_path: f64,
    f: &mut F,
) {
    if level == 0 {
        f(node, log_path);
        return;
    }
    let fam = node
        .family
        .as_ref()
        .expect("levels above the finest have families");
    for (w, child) in fam.weights.iter().zip(&fam.children) {
        visit_level(child, level - 1, log_path + w.ln(), f);
    }
}

/// Streaming equivalent of building a tree and refining it: one fresh
/// random tree's martingale value, drawn in the identical order but without
/// materializing nodes. Root orientation from the stationary law.
pub fn sample_root_w(
    model: &ModelSpec,
    depth: usize,
    seed: u64,
) -> Result<(Orientation, f64), OracleError> {
    let spectral = model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = if rng.random::<f64>() < spectral.fixed_point_a {
        Orientation::Up
    } else {
        Orientation::Down
    };
    let w = stream_w(model, spectral.right_v, root, depth, &mut rng);
    Ok((root, w))
}

/// Streaming martingale value with a prescribed root orientation.
pub fn sample_root_w_with_root(
    model: &ModelSpec,
    depth: usize,
    seed: u64,
    root_orientation: Orientation,
) -> Result<f64, OracleError> {
    let spectral = model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(stream_w(
        model,
        spectral.right_v,
        root_orientation,
        depth,
        &mut rng,
    ))
}

fn stream_w<R: Rng + ?Sized>(
    model: &ModelSpec,
    v: [f64; 2],
    orientation: Orientation,
    depth_left: usize,
    rng: &mut R,
) -> f64 {
    if depth_left == 0 {
        return v[orientation.index()];
    }
    let (pattern, weights) = model.draw_family(orientation, rng);
    let mut acc = 0.0;
    for (slot, w) in weights.iter().enumerate() {
        acc += w * stream_w(model, v, pattern.entry(slot + 1), depth_left - 1, rng);
    }
    acc
}

/// Leaf durations of the first crossing at `level` scales up, built
/// root-first: root orientation from the stationary law, families
/// unconditioned, leftmost branches only, pruned after `count` leaves.
/// Durations are normalized by the left-spine weights, matching the on-line
/// engine's first `count` emitted durations in law (whenever
/// count <= 2^level, so all leaves lie inside the first coarse crossing).
pub fn sample_first_subtree_leaf_durations<R: Rng + ?Sized>(
    model: &ModelSpec,
    spectral: &SpectralSummary,
    level: usize,
    count: usize,
    rng: &mut R,
) -> Vec<(Orientation, f64)> {
    let root = if rng.random::<f64>() < spectral.fixed_point_a {
        Orientation::Up
    } else {
        Orientation::Down
    };
    let mut out = Vec::with_capacity(count);
    let mut denoms: Vec<Option<f64>> = vec![None; level];
    descend(
        model,
        spectral.right_v,
        root,
        level,
        0.0,
        &mut denoms,
        count,
        &mut out,
        rng,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn descend<R: Rng + ?Sized>(
    model: &ModelSpec,
    v: [f64; 2],
    orientation: Orientation,
    depth_left: usize,
    log_ratio: f64,
    denoms: &mut [Option<f64>],
    count: usize,
    out: &mut Vec<(Orientation, f64)>,
    rng: &mut R,
) {
    if out.len() == count {
        return;
    }
    if depth_left == 0 {
        out.push((orientation, v[orientation.index()] * log_ratio.exp()));
        return;
    }
    let (pattern, weights) = model.draw_family(orientation, rng);
    // The first family drawn at each depth is the left-spine one; its first
    // slot is the duration denominator for that scale.
    let denom = *denoms[depth_left - 1].get_or_insert(weights[0]);
    for (slot, w) in weights.iter().enumerate() {
        if out.len() == count {
            return;
        }
        descend(
            model,
            v,
            pattern.entry(slot + 1),
            depth_left - 1,
            log_ratio + w.ln() - denom.ln(),
            denoms,
            count,
            out,
            rng,
        );
    }
}

/// Two matched duration samples with clustered standard errors and their
/// discrepancy z-score.
#[derive(Clone, Copy, Debug)]
pub struct DurationComparison {
    pub engine_mean: f64,
    pub engine_se: f64,
    pub oracle_mean: f64,
    pub oracle_se: f64,
    pub z: f64,
}

/// Compares mean emitted durations: `replicas` engine runs of `count` steps
/// each against `trees` pruned first-subtree samplers of `count` leaves
/// each, clustering standard errors by run and by tree. The engine model and
/// the oracle model may differ (negative controls).
pub fn compare_with_engine(
    engine_model: &ModelSpec,
    oracle_model: &ModelSpec,
    level: usize,
    count: usize,
    replicas: usize,
    trees: usize,
    seed: u64,
) -> Result<DurationComparison, OracleError> {
    assert!(
        count <= 1usize << level,
        "all {count} leaves must fit in one level-{level} crossing"
    );
    let mut engine_means = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let mut state =
            crate::engine::initialize(engine_model.clone(), seed.wrapping_add(r as u64)).map_err(
                |e| match e {
                    crate::engine::EngineError::Model(m) => OracleError::Model(m),
                    other => OracleError::Model(ModelError::InvalidLaw(other.to_string())),
                },
            )?;
        let mut sum = 0.0;
        state
            .run(count as u64, |p| sum += p.d)
            .map_err(|e| OracleError::Model(ModelError::InvalidLaw(e.to_string())))?;
        engine_means.push(sum / count as f64);
    }
    let oracle_spectral = oracle_model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut oracle_means = Vec::with_capacity(trees);
    for _ in 0..trees {
        let leaves = sample_first_subtree_leaf_durations(
            oracle_model,
            &oracle_spectral,
            level,
            count,
            &mut rng,
        );
        oracle_means.push(leaves.iter().map(|(_, d)| d).sum::<f64>() / leaves.len() as f64);
    }
    let (engine_mean, engine_se) = mean_se(&engine_means);
    let (oracle_mean, oracle_se) = mean_se(&oracle_means);
    let denom = (engine_se * engine_se + oracle_se * oracle_se).sqrt();
    // Two degenerate samples (zero spread on both sides) agree iff their
    // means coincide exactly.
    let z = if denom > 0.0 {
        (engine_mean - oracle_mean) / denom
    } else if engine_mean == oracle_mean {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(DurationComparison {
        engine_mean,
        engine_se,
        oracle_mean,
        oracle_se,
        z,
    })
}

pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
