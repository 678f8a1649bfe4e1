//! Estimation from simulated paths: rebuilding the crossing tree of a unit
//! lattice walk, offspring-count estimators per scale, and a scale-invariance
//! diagnostic on crossing durations.

use crate::model::{ModelError, ModelSpec, OffspringPattern, Orientation, WeightLaw};
use crate::record::SamplePoint;

#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error("empty path")]
    EmptyPath,
    #[error("malformed path at record {index}: {reason}")]
    MalformedPath { index: usize, reason: String },
    #[error("insufficient crossings at level {level}: found {found}, need {required}")]
    Insufficient {
        level: usize,
        found: usize,
        required: usize,
    },
}

/// One reconstructed crossing: orientation, the half-open range of its
/// children in the next finer level (input records for level 0), and its
/// time interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractedCrossing {
    pub orientation: Orientation,
    pub start: usize,
    pub end: usize,
    pub t0: f64,
    pub t1: f64,
}

impl ExtractedCrossing {
    /// Number of children (subcrossings one scale down).
    pub fn z(&self) -> usize {
        self.end - self.start
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Reassembles the children's orientation sequence into a pattern; the
    /// construction guarantees validity, so failure indicates a corrupted
    /// extraction.
    pub fn pattern_of(&self, finer: &[ExtractedCrossing]) -> Result<OffspringPattern, ModelError> {
        let seq: Vec<Orientation> = finer[self.start..self.end]
            .iter()
            .map(|c| c.orientation)
            .collect();
        OffspringPattern::from_orientations(&seq)
    }
}

/// The crossing tree of a path: `levels[0]` are the unit crossings, each
/// coarser level groups the previous one. `discarded[n]` counts the finer
/// crossings left in the final incomplete crossing at level n.
#[derive(Clone, Debug)]
pub struct ExtractedTree {
    pub levels: Vec<Vec<ExtractedCrossing>>,
    pub discarded: Vec<usize>,
}

/// Rebuilds the crossing tree of a unit-lattice path starting at (0, 0).
/// Extraction climbs until a level completes no crossing, or to `max_level`.
pub fn extract_crossing_tree(
    points: &[SamplePoint],
    max_level: Option<usize>,
) -> Result<ExtractedTree, AnalyzeError> {
    if points.is_empty() {
        return Err(AnalyzeError::EmptyPath);
    }
    let mut level0 = Vec::with_capacity(points.len());
    let mut y = 0i64;
    let mut t = 0.0;
    for (index, p) in points.iter().enumerate() {
        if p.y - y != p.o.sign() {
            return Err(AnalyzeError::MalformedPath {
                index,
                reason: format!(
                    "position {} does not follow {} by one {} crossing",
                    p.y, y, p.o
                ),
            });
        }
        if p.t <= t {
            return Err(AnalyzeError::MalformedPath {
                index,
                reason: format!("time {} does not increase past {}", p.t, t),
            });
        }
        level0.push(ExtractedCrossing {
            orientation: p.o,
            start: index,
            end: index + 1,
            t0: t,
            t1: p.t,
        });
        y = p.y;
        t = p.t;
    }

    let mut levels = vec![level0];
    let mut discarded = vec![0usize];
    loop {
        let n = levels.len();
        if let Some(cap) = max_level {
            if n > cap {
                break;
            }
        }
        let prev = levels.last().expect("at least level 0");
        if prev.len() < 2 {
            break;
        }
        let child_step = 1i64 << (n - 1);
        let modulus = 1i64 << n;
        let mut out = Vec::new();
        let mut pos = 0i64;
        let mut start_idx = 0usize;
        let mut start_pos = 0i64;
        let mut t0 = 0.0;
        for (ci, child) in prev.iter().enumerate() {
            pos += child.orientation.sign() * child_step;
            if pos % modulus == 0 && pos != start_pos {
                let orientation = if pos > start_pos {
                    Orientation::Up
                } else {
                    Orientation::Down
                };
                out.push(ExtractedCrossing {
                    orientation,
                    start: start_idx,
                    end: ci + 1,
                    t0,
                    t1: child.t1,
                });
                start_idx = ci + 1;
                start_pos = pos;
                t0 = child.t1;
            }
        }
        if out.is_empty() {
            break;
        }
        discarded.push(prev.len() - start_idx);
        levels.push(out);
    }
    Ok(ExtractedTree { levels, discarded })
}

impl ExtractedTree {
    /// Complete-crossing durations per level.
    pub fn durations_by_level(&self) -> Vec<Vec<f64>> {
        self.levels
            .iter()
            .map(|lvl| lvl.iter().map(|c| c.duration()).collect())
            .collect()
    }

    /// True iff every crossing above level 0 has an even child count of at
    /// least two.
    pub fn child_counts_valid(&self) -> bool {
        self.levels[1..]
            .iter()
            .all(|lvl| lvl.iter().all(|c| c.z() >= 2 && c.z() % 2 == 0))
    }
}

/// Offspring statistics for one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelEstimate {
    pub level: usize,
    pub crossings: usize,
    pub mean_z: f64,
    pub se_z: f64,
    pub mean_duration: f64,
}

/// Mean offspring count with a standard error, over some crossing set.
#[derive(Clone, Copy, Debug)]
pub struct PooledEstimate {
    pub crossings: usize,
    pub mean_z: f64,
    pub se_z: f64,
}

/// Offspring-count estimates per level and pooled over levels >= 1, with
/// parent-orientation-resolved pools.
#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub per_level: Vec<LevelEstimate>,
    pub pooled: PooledEstimate,
    pub pooled_up: PooledEstimate,
    pub pooled_down: PooledEstimate,
}

fn pool<'a, I: Iterator<Item = &'a ExtractedCrossing>>(crossings: I) -> PooledEstimate {
    let zs: Vec<f64> = crossings.map(|c| c.z() as f64).collect();
    let n = zs.len();
    if n == 0 {
        return PooledEstimate {
            crossings: 0,
            mean_z: f64::NAN,
            se_z: f64::NAN,
        };
    }
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    PooledEstimate {
        crossings: n,
        mean_z: mean,
        se_z: (var / n as f64).sqrt(),
    }
}

/// Estimates mean offspring counts from an extracted tree; requires at least
/// one complete crossing above level 0.
pub fn estimate(tree: &ExtractedTree) -> Result<EstimateReport, AnalyzeError> {
    if tree.levels.len() < 2 {
        return Err(AnalyzeError::Insufficient {
            level: 1,
            found: 0,
            required: 1,
        });
    }
    let per_level = tree
        .levels
        .iter()
        .enumerate()
        .skip(1)
        .map(|(level, crossings)| {
            let p = pool(crossings.iter());
            let mean_duration =
                crossings.iter().map(|c| c.duration()).sum::<f64>() / crossings.len() as f64;
            LevelEstimate {
                level,
                crossings: p.crossings,
                mean_z: p.mean_z,
                se_z: p.se_z,
                mean_duration,
            }
        })
        .collect();
    let all = tree.levels[1..].iter().flatten();
    let up = tree.levels[1..]
        .iter()
        .flatten()
        .filter(|c| c.orientation == Orientation::Up);
    let down = tree.levels[1..]
        .iter()
        .flatten()
        .filter(|c| c.orientation == Orientation::Down);
    Ok(EstimateReport {
        per_level,
        pooled: pool(all),
        pooled_up: pool(up),
        pooled_down: pool(down),
    })
}

/// Duration scale-invariance diagnostic between two levels.
#[derive(Clone, Debug)]
pub struct ScaleInvarianceReport {
    pub n1: usize,
    pub n2: usize,
    /// Mean log-duration increase per level between n1 and n2.
    pub shift_per_level: f64,
    pub shift_se: f64,
    pub log_mu: f64,
    /// Discrepancy of the shift from log mu in standard errors.
    pub z_vs_log_mu: f64,
    /// Per-level fraction of durations sharing the most common exact value.
    pub atom_fraction: Vec<f64>,
    pub counts: Vec<usize>,
    /// Both compared levels hold at least `min_count` crossings.
    pub sufficient: bool,
}

/// Compares mean log durations at levels n1 < n2 against the growth rate
/// log mu. The shift converges to the model's log-weight drift from below as
/// levels coarsen, so treat small discrepancies at shallow levels as bias,
/// not error.
pub fn scale_invariance_check(
    durations_by_level: &[Vec<f64>],
    mu: f64,
    n1: usize,
    n2: usize,
    min_count: usize,
) -> Result<ScaleInvarianceReport, AnalyzeError> {
    assert!(n1 < n2, "levels must satisfy n1 < n2");
    for level in [n1, n2] {
        if level >= durations_by_level.len() {
            return Err(AnalyzeError::Insufficient {
                level,
                found: 0,
                required: min_count,
            });
        }
    }
    let (m1, se1, c1) = mean_log(&durations_by_level[n1]);
    let (m2, se2, c2) = mean_log(&durations_by_level[n2]);
    let span = (n2 - n1) as f64;
    let shift = (m2 - m1) / span;
    let se = (se1 * se1 + se2 * se2).sqrt() / span;
    let log_mu = mu.ln();
    let atom_fraction = durations_by_level
        .iter()
        .map(|d| atom_fraction(d))
        .collect();
    let counts = durations_by_level.iter().map(|d| d.len()).collect();
    Ok(ScaleInvarianceReport {
        n1,
        n2,
        shift_per_level: shift,
        shift_se: se,
        log_mu,
        z_vs_log_mu: if se > 0.0 {
            (shift - log_mu) / se
        } else {
            f64::INFINITY
        },
        atom_fraction,
        counts,
        sufficient: c1 >= min_count && c2 >= min_count,
    })
}

fn mean_log(xs: &[f64]) -> (f64, f64, usize) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    (mean, (var / n as f64).sqrt(), n)
}

/// Fraction of values equal (bit for bit) to the most common value.
fn atom_fraction(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut bits: Vec<u64> = xs.iter().map(|x| x.to_bits()).collect();
    bits.sort_unstable();
    let mut best = 1usize;
    let mut run = 1usize;
    for w in bits.windows(2) {
        if w[0] == w[1] {
            run += 1;
            best = best.max(run);
        } else {
            run = 1;
        }
    }
    best as f64 / xs.len() as f64
}

/// Predicted per-level mean log-duration shift of the model: minus the
/// stationary-type-weighted mean log weight of one slot. Equals log mu for
/// constant weights.
pub fn predicted_log_duration_shift(model: &ModelSpec) -> Result<f64, ModelError> {
    let u = model.m_theta(1.0)?.left;
    let mean_log_for = |parent: Orientation| -> f64 {
        match model.weight_law() {
            WeightLaw::PerPatternTable { .. } => {
                let patterns = model
                    .orientation_law()
                    .dist(parent)
                    .table_rows()
                    .expect("validated: table weights imply table patterns");
                let rows = model.weight_law().table_rows(parent).expect("table mode");
                let mut num = 0.0;
                let mut den = 0.0;
                for ((_, prob), row) in patterns.iter().zip(rows) {
                    for w in row {
                        num += prob * w.ln();
                        den += prob;
                    }
                }
                num / den
            }
            _ => model
                .weight_law()
                .iid_family(parent)
                .expect("iid mode")
                .mean_log(),
        }
    };
    Ok(-(u[0] * mean_log_for(Orientation::Up) + u[1] * mean_log_for(Orientation::Down)))
}
