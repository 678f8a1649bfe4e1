//! On-line simulation of the walk at unit resolution.
//!
//! The simulator keeps one active family per dyadic scale: `levels[j]` holds
//! the scale-`j` subcrossing family of the active scale-`j+1` crossing, with
//! `s` the 1-based slot of the active subcrossing. Each emitted step advances
//! the finest level, growing the stack at the top when its family is
//! exhausted and redrawing finer families (top-down) as coarser slots move.
//!
//! The duration of a unit crossing is v(i) times the product over levels of
//! the active weight divided by that level's stored spinal weight, where i
//! is the unit crossing's orientation. The spinal weight is fixed when the
//! level is created: the first slot's weight for a fixed origin, the marked
//! slot's weight for a stationary (random) origin.

use crate::model::{ModelError, ModelSpec, OffspringPattern, Orientation, SpectralSummary};
use crate::record::SamplePoint;
use crate::sizebias::{self, SpineChains, TiltedLaws};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Snapshot schema version accepted by `restore_json`.
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duration underflowed below the smallest normal float at step {step}")]
    NumericUnderflow { step: u64 },
    #[error("non-finite duration at step {step}")]
    NonFiniteDuration { step: u64 },
    #[error("snapshot parse: {0}")]
    Snapshot(String),
    #[error("snapshot format version {found} unsupported (expected {expected})")]
    SnapshotVersion { found: u32, expected: u32 },
    #[error("cascade stack exhausted unexpectedly")]
    StackExhausted,
}

/// Whether the walk starts at a fixed lattice origin or from the stationary
/// environment seen at a lattice hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartMode {
    Fixed,
    Random,
}

/// One level of the cascade stack: the active family at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingLevelState {
    /// Subcrossing pattern of the active parent crossing one scale up.
    pub pattern: OffspringPattern,
    /// Weights per subcrossing slot, aligned with the pattern.
    pub weights: Vec<f64>,
    /// 1-based slot of the active subcrossing.
    pub s: usize,
    /// Subcrossings consumed at this scale since the level was created.
    pub kappa: u64,
}

impl CrossingLevelState {
    pub fn exhausted(&self) -> bool {
        self.s == self.pattern.size()
    }

    /// Orientation of the active subcrossing.
    pub fn active_orientation(&self) -> Orientation {
        self.pattern.entry(self.s)
    }
}

/// Rebuildable spinal-law context for random-origin expansion.
#[derive(Clone, Debug)]
struct TiltedContext {
    tilted: TiltedLaws,
    chains: SpineChains,
}

/// Full simulator state; serializable for snapshot and resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulatorState {
    format_version: u32,
    model: ModelSpec,
    spectral: SpectralSummary,
    start: StartMode,
    levels: Vec<CrossingLevelState>,
    /// Per-level duration denominators, fixed at level creation.
    spine_denoms: Vec<f64>,
    k: u64,
    t: f64,
    y: i64,
    rng: ChaCha8Rng,
    /// True when the active unit crossing has not been emitted yet.
    pending_emit: bool,
    #[serde(skip)]
    tilted_cache: Option<TiltedContext>,
}

/// Starts a walk from a fixed lattice origin: the first unit crossing leaves
/// (0, 0) and is emitted by the first step.
pub fn initialize(model: ModelSpec, seed: u64) -> Result<SimulatorState, EngineError> {
    let spectral = model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = if rng.random::<f64>() < spectral.fixed_point_a {
        Orientation::Up
    } else {
        Orientation::Down
    };
    let (pattern, weights) = model.draw_family(alpha, &mut rng);
    let spine = weights[0];
    Ok(SimulatorState {
        format_version: SNAPSHOT_VERSION,
        model,
        spectral,
        start: StartMode::Fixed,
        levels: vec![CrossingLevelState {
            pattern,
            weights,
            s: 1,
            kappa: 1,
        }],
        spine_denoms: vec![spine],
        k: 0,
        t: 0.0,
        y: 0,
        rng,
        pending_emit: true,
        tilted_cache: None,
    })
}

/// Starts a walk from the stationary environment at a lattice hit: the
/// origin closes the marked (spinal) crossing at every scale, and the first
/// step emits the crossing that follows it.
pub fn initialize_random_start(model: ModelSpec, seed: u64) -> Result<SimulatorState, EngineError> {
    let spectral = model.spectral_summary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chains = sizebias::spine_chains(&model)?;
    let tilted = sizebias::tilt_from_v(&model, spectral.right_v);
    let alpha = chains.sample_stationary(&mut rng);
    let fam = tilted.sample_spinal_family(alpha, &mut rng);
    let spine = fam.spine_weight();
    let level = CrossingLevelState {
        pattern: fam.pattern,
        weights: fam.weights,
        s: fam.spine_slot,
        kappa: 0,
    };
    Ok(SimulatorState {
        format_version: SNAPSHOT_VERSION,
        model,
        spectral,
        start: StartMode::Random,
        levels: vec![level],
        spine_denoms: vec![spine],
        k: 0,
        t: 0.0,
        y: 0,
        rng,
        pending_emit: false,
        tilted_cache: Some(TiltedContext { tilted, chains }),
    })
}

impl SimulatorState {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn spectral(&self) -> &SpectralSummary {
        &self.spectral
    }

    pub fn start_mode(&self) -> StartMode {
        self.start
    }

    /// Steps emitted so far.
    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> i64 {
        self.y
    }

    /// Number of levels in the cascade stack.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[CrossingLevelState] {
        &self.levels
    }

    /// Advances by one unit crossing and returns the emitted point.
    pub fn step(&mut self) -> Result<SamplePoint, EngineError> {
        if self.pending_emit {
            self.pending_emit = false;
        } else {
            self.expand_if_needed()?;
            self.increment()?;
        }
        self.emit_current()
    }

    /// Runs `steps` unit crossings, feeding each point to `sink`. Running n
    /// then m steps produces the same stream as running n + m at once.
    pub fn run<F: FnMut(SamplePoint)>(
        &mut self,
        steps: u64,
        mut sink: F,
    ) -> Result<(), EngineError> {
        for _ in 0..steps {
            let p = self.step()?;
            sink(p);
        }
        Ok(())
    }

    /// Grows the stack by exactly one level, as expansion would, regardless
    /// of whether the top is exhausted; returns the new top's parent
    /// orientation. Diagnostic access to the upward spinal construction.
    pub fn grow_spine_level(&mut self) -> Result<Orientation, EngineError> {
        let child = self
            .levels
            .last()
            .expect("stack is never empty")
            .pattern
            .direct();
        match self.start {
            StartMode::Fixed => self.push_level_fixed(child),
            StartMode::Random => {
                self.ensure_tilted()?;
                self.push_level_random(child)
            }
        }
    }

    /// Serializes the full state, including the generator, as JSON.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(self).expect("state serialization cannot fail")
    }

    /// Restores a snapshot; continuing from it reproduces the uninterrupted
    /// stream exactly.
    pub fn restore_json(snapshot: &str) -> Result<SimulatorState, EngineError> {
        let state: SimulatorState =
            serde_json::from_str(snapshot).map_err(|e| EngineError::Snapshot(e.to_string()))?;
        if state.format_version != SNAPSHOT_VERSION {
            return Err(EngineError::SnapshotVersion {
                found: state.format_version,
                expected: SNAPSHOT_VERSION,
            });
        }
        Ok(state)
    }

    fn ensure_tilted(&mut self) -> Result<(), EngineError> {
        if self.tilted_cache.is_none() {
            let chains = sizebias::spine_chains(&self.model)?;
            let tilted = sizebias::tilt_from_v(&self.model, self.spectral.right_v);
            self.tilted_cache = Some(TiltedContext { tilted, chains });
        }
        Ok(())
    }

    /// Grows the stack when the top family is exhausted. A fixed origin
    /// grows by at most one level per step; a stationary origin loops, since
    /// a freshly marked slot can itself be the last of its family.
    fn expand_if_needed(&mut self) -> Result<(), EngineError> {
        match self.start {
            StartMode::Fixed => {
                let top = self.levels.last().expect("stack is never empty");
                if top.exhausted() {
                    let child = top.pattern.direct();
                    self.push_level_fixed(child)?;
                }
            }
            StartMode::Random => {
                self.ensure_tilted()?;
                loop {
                    let top = self.levels.last().expect("stack is never empty");
                    if !top.exhausted() {
                        break;
                    }
                    let child = top.pattern.direct();
                    self.push_level_random(child)?;
                }
            }
        }
        Ok(())
    }

    /// Pushes the family of the next coarser first crossing: parent
    /// orientation from the reversed first-crossing chain, family conditioned
    /// on its first slot matching the current top's parent.
    fn push_level_fixed(&mut self, child: Orientation) -> Result<Orientation, EngineError> {
        let u = self.spectral.first_up_given_up;
        let a = self.spectral.fixed_point_a;
        let p_parent_up = match child {
            Orientation::Up => u,
            Orientation::Down => {
                if a < 1.0 {
                    (1.0 - u) * a / (1.0 - a)
                } else {
                    0.0
                }
            }
        };
        let parent = if self.rng.random::<f64>() < p_parent_up {
            Orientation::Up
        } else {
            Orientation::Down
        };
        let (pattern, weights) =
            self.model
                .draw_family_conditioned_first(parent, child, &mut self.rng)?;
        self.spine_denoms.push(weights[0]);
        self.levels.push(CrossingLevelState {
            pattern,
            weights,
            s: 1,
            kappa: 1,
        });
        Ok(parent)
    }

    /// Pushes a spinal family one scale up: parent orientation from the
    /// reversed spine chain, tilted family conditioned on the marked slot
    /// matching the current top's parent.
    fn push_level_random(&mut self, child: Orientation) -> Result<Orientation, EngineError> {
        let ctx = self.tilted_cache.as_ref().expect("ensure_tilted ran");
        let parent = ctx.chains.sample_up(child, &mut self.rng);
        let fam = ctx
            .tilted
            .sample_spinal_family_conditioned(parent, child, &mut self.rng)?;
        self.spine_denoms.push(fam.spine_weight());
        self.levels.push(CrossingLevelState {
            pattern: fam.pattern,
            weights: fam.weights,
            s: fam.spine_slot,
            kappa: 0,
        });
        Ok(parent)
    }

    /// Advances to the next unit crossing: the first non-exhausted level
    /// moves one slot, and every finer level is redrawn fresh, coarsest
    /// first, each conditioned only on its parent slot's orientation.
    fn increment(&mut self) -> Result<(), EngineError> {
        let j = self
            .levels
            .iter()
            .position(|l| !l.exhausted())
            .ok_or(EngineError::StackExhausted)?;
        for level in &mut self.levels[..=j] {
            level.kappa += 1;
        }
        self.levels[j].s += 1;
        for n in (0..j).rev() {
            let parent = self.levels[n + 1].active_orientation();
            let (pattern, weights) = self.model.draw_family(parent, &mut self.rng);
            let level = &mut self.levels[n];
            level.pattern = pattern;
            level.weights = weights;
            level.s = 1;
        }
        Ok(())
    }

    /// Emits the active unit crossing: duration v(i) times the telescoped
    /// weight ratios over the whole stack.
    fn emit_current(&mut self) -> Result<SamplePoint, EngineError> {
        let i = self.levels[0].active_orientation();
        let mut log_ratio = 0.0;
        for (level, denom) in self.levels.iter().zip(&self.spine_denoms) {
            log_ratio += level.weights[level.s - 1].ln() - denom.ln();
        }
        let d = self.spectral.right_v[i.index()] * log_ratio.exp();
        if !d.is_finite() {
            return Err(EngineError::NonFiniteDuration { step: self.k + 1 });
        }
        if d < f64::MIN_POSITIVE {
            return Err(EngineError::NumericUnderflow { step: self.k + 1 });
        }
        self.k += 1;
        self.t += d;
        self.y += i.sign();
        Ok(SamplePoint {
            k: self.k,
            t: self.t,
            y: self.y,
            o: i,
            d,
        })
    }
}
