//! Offspring-orientation and weight laws, their validation, and the derived
//! spectral quantities: mean matrices, Perron eigensystem, Hurst index,
//! first-crossing probabilities, weight-moment matrices, and the assumption
//! checks that gate the rest of the library.
//!
//! A crossing at one dyadic scale decomposes into an even number of
//! subcrossings at the next finer scale: zero or more excursions (an up-down
//! or down-up pair) followed by a direct pair in the parent's direction.
//! Offspring counts by type therefore satisfy, given an Up parent,
//! `#Up = Z/2 + 1` and `#Down = Z/2 - 1` (and symmetrically for Down), which
//! fixes the mean offspring matrix up to the two means `mu_plus`, `mu_minus`.

use crate::special::{digamma, ln_gamma};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Tolerance for exact linear-algebra identities (eigen residuals,
/// stochasticity, fixed points) computed from closed forms.
pub const EXACT_TOL: f64 = 1e-12;

/// Tolerance for the mass-conservation residual |mu(1) - 1| of weight laws
/// whose first moment is available in closed form.
pub const CONSERVATION_TOL: f64 = 1e-9;

/// Iteration cap for rejection sampling of conditioned families.
pub const REJECTION_CAP: u64 = 1_000_000;

/// Errors raised by law construction and spectral analysis.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// (u, v) = (1, 0): the first-crossing fixed point is undetermined and a
    /// `first_crossing_override` must be supplied.
    #[error("degenerate first-crossing law (u, v) = (1, 0); any fixed point is admissible, supply first_crossing_override")]
    DegenerateFirstCrossing,
    #[error("weight moment of order {theta} is infinite for the configured family")]
    InfiniteMoment { theta: f64 },
    #[error("unknown builtin model `{0}`")]
    UnknownModel(String),
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    /// Rejection sampling of a conditioned family exceeded its iteration cap.
    #[error("conditioned family sampling exceeded {attempts} rejection attempts")]
    RejectionCapExceeded { attempts: u64 },
}

/// Direction of a crossing. Exactly two values; `flip` is an involution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Up,
    Down,
}

impl Orientation {
    pub fn flip(self) -> Self {
        match self {
            Orientation::Up => Orientation::Down,
            Orientation::Down => Orientation::Up,
        }
    }

    /// Spatial displacement of one crossing: +1 or -1.
    pub fn sign(self) -> i64 {
        match self {
            Orientation::Up => 1,
            Orientation::Down => -1,
        }
    }

    /// Row/column index in 2x2 spectral objects: Up = 0, Down = 1.
    pub fn index(self) -> usize {
        match self {
            Orientation::Up => 0,
            Orientation::Down => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Orientation::Up,
            1 => Orientation::Down,
            _ => panic!("orientation index must be 0 or 1, got {i}"),
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Orientation::Up => '+',
            Orientation::Down => '-',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(Orientation::Up),
            '-' => Some(Orientation::Down),
            _ => None,
        }
    }

    pub const BOTH: [Orientation; 2] = [Orientation::Up, Orientation::Down];
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// One excursion pair: the two subcrossing orientations in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Excursion {
    UpDown,
    DownUp,
}

impl Excursion {
    pub fn first(self) -> Orientation {
        match self {
            Excursion::UpDown => Orientation::Up,
            Excursion::DownUp => Orientation::Down,
        }
    }

    pub fn second(self) -> Orientation {
        self.first().flip()
    }
}

/// An admissible subcrossing pattern: excursions followed by a direct pair.
/// The direct pair repeats the parent orientation, so `direct()` is also the
/// parent orientation of any family carrying this pattern. Valid by
/// construction; total length `Z = 2 * excursions + 2` is even and >= 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffspringPattern {
    excursions: Vec<Excursion>,
    direct: Orientation,
}

impl OffspringPattern {
    pub fn new(excursions: Vec<Excursion>, direct: Orientation) -> Self {
        OffspringPattern { excursions, direct }
    }

    pub fn excursions(&self) -> &[Excursion] {
        &self.excursions
    }

    pub fn excursion_count(&self) -> usize {
        self.excursions.len()
    }

    pub fn direct(&self) -> Orientation {
        self.direct
    }

    /// Total subcrossing count Z.
    pub fn size(&self) -> usize {
        2 * self.excursions.len() + 2
    }

    /// Orientation of subcrossing `s`, 1-based, `1 <= s <= Z`.
    pub fn entry(&self, s: usize) -> Orientation {
        assert!(
            s >= 1 && s <= self.size(),
            "subcrossing index {s} out of 1..={}",
            self.size()
        );
        let m = self.excursions.len();
        if s <= 2 * m {
            let e = self.excursions[(s - 1) / 2];
            if (s - 1).is_multiple_of(2) {
                e.first()
            } else {
                e.second()
            }
        } else {
            self.direct
        }
    }

    /// Number of subcrossings with the given orientation. Equals
    /// `Z/2 + 1` for the parent orientation and `Z/2 - 1` for its flip.
    pub fn count(&self, o: Orientation) -> usize {
        let m = self.excursions.len();
        if o == self.direct {
            m + 2
        } else {
            m
        }
    }

    pub fn orientations(&self) -> impl Iterator<Item = Orientation> + '_ {
        (1..=self.size()).map(move |s| self.entry(s))
    }

    /// Reassembles a raw orientation sequence into a pattern: pairs must be
    /// excursions except the final pair, which must be a direct pair. The
    /// parent orientation is inferred from the direct pair.
    pub fn from_orientations(seq: &[Orientation]) -> Result<Self, ModelError> {
        if seq.len() < 2 || !seq.len().is_multiple_of(2) {
            return Err(ModelError::InvalidLaw(format!(
                "pattern length must be even and >= 2, got {}",
                seq.len()
            )));
        }
        let n = seq.len();
        if seq[n - 2] != seq[n - 1] {
            return Err(ModelError::InvalidLaw(
                "pattern must end in a direct pair of equal orientations".into(),
            ));
        }
        let direct = seq[n - 1];
        let mut excursions = Vec::with_capacity(n / 2 - 1);
        for pair in seq[..n - 2].chunks(2) {
            match (pair[0], pair[1]) {
                (Orientation::Up, Orientation::Down) => excursions.push(Excursion::UpDown),
                (Orientation::Down, Orientation::Up) => excursions.push(Excursion::DownUp),
                _ => {
                    return Err(ModelError::InvalidLaw(
                        "non-final pattern pairs must be excursions (opposite orientations)".into(),
                    ))
                }
            }
        }
        Ok(OffspringPattern { excursions, direct })
    }

    /// Parses a `+`/`-` string such as `+-++`.
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let seq: Result<Vec<Orientation>, ModelError> = s
            .chars()
            .map(|c| {
                Orientation::from_symbol(c).ok_or_else(|| {
                    ModelError::InvalidLaw(format!("invalid pattern character `{c}`"))
                })
            })
            .collect();
        Self::from_orientations(&seq?)
    }
}

impl fmt::Display for OffspringPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in self.orientations() {
            write!(f, "{}", o.symbol())?;
        }
        Ok(())
    }
}

/// True iff the pattern is admissible for the given parent orientation:
/// excursion pairs followed by a direct pair matching the parent.
pub fn validate_pattern(pattern: &OffspringPattern, parent: Orientation) -> bool {
    pattern.direct == parent
}

/// Distribution over offspring patterns for one parent orientation.
///
/// Sampling consumes uniforms in a fixed order: one for the excursion count
/// (or table row), then one per excursion kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PatternDist {
    /// `P(m excursions) = p (1-p)^m` for m >= 0, each excursion UpDown with
    /// probability `q_updown` independently. Mean subcrossing count is `2/p`.
    Geometric { p: f64, q_updown: f64 },
    /// Exactly `excursions` excursions, kinds iid UpDown with probability
    /// `q_updown`. Mean subcrossing count is `2*excursions + 2`.
    ConstantCount { excursions: usize, q_updown: f64 },
    /// Explicit finite support with probabilities summing to 1 per parent.
    Table { rows: Vec<(OffspringPattern, f64)> },
}

impl PatternDist {
    fn validate(&self, parent: Orientation) -> Result<(), ModelError> {
        match self {
            PatternDist::Geometric { p, q_updown } => {
                if !(*p > 1e-6 && *p <= 1.0) {
                    return Err(ModelError::InvalidLaw(format!(
                        "geometric excursion parameter p must be in (1e-6, 1], got {p}"
                    )));
                }
                if !(0.0..=1.0).contains(q_updown) {
                    return Err(ModelError::InvalidLaw(format!(
                        "excursion-kind probability must be in [0, 1], got {q_updown}"
                    )));
                }
            }
            PatternDist::ConstantCount { q_updown, .. } => {
                if !(0.0..=1.0).contains(q_updown) {
                    return Err(ModelError::InvalidLaw(format!(
                        "excursion-kind probability must be in [0, 1], got {q_updown}"
                    )));
                }
            }
            PatternDist::Table { rows } => {
                if rows.is_empty() {
                    return Err(ModelError::InvalidLaw(format!(
                        "empty pattern table for parent {parent}"
                    )));
                }
                let mut total = 0.0;
                for (pattern, prob) in rows {
                    if !validate_pattern(pattern, parent) {
                        return Err(ModelError::InvalidLaw(format!(
                            "pattern {pattern} is not valid for parent {parent}"
                        )));
                    }
                    if !(*prob >= 0.0 && prob.is_finite()) {
                        return Err(ModelError::InvalidLaw(format!(
                            "pattern probability must be finite and nonnegative, got {prob}"
                        )));
                    }
                    total += prob;
                }
                if (total - 1.0).abs() > CONSERVATION_TOL {
                    return Err(ModelError::InvalidLaw(format!(
                        "pattern probabilities for parent {parent} sum to {total}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean subcrossing count for this parent orientation.
    pub fn mean_count(&self) -> f64 {
        match self {
            PatternDist::Geometric { p, .. } => 2.0 / p,
            PatternDist::ConstantCount { excursions, .. } => 2.0 * *excursions as f64 + 2.0,
            PatternDist::Table { rows } => rows.iter().map(|(a, p)| a.size() as f64 * p).sum(),
        }
    }

    /// Probability that the first subcrossing is Up, given this parent.
    /// The first subcrossing is the first excursion's opening leg, or the
    /// direct pair when there are no excursions.
    pub fn first_up_prob(&self, parent: Orientation) -> f64 {
        let direct_up = if parent == Orientation::Up { 1.0 } else { 0.0 };
        match self {
            PatternDist::Geometric { p, q_updown } => p * direct_up + (1.0 - p) * q_updown,
            PatternDist::ConstantCount {
                excursions,
                q_updown,
            } => {
                if *excursions == 0 {
                    direct_up
                } else {
                    *q_updown
                }
            }
            PatternDist::Table { rows } => rows
                .iter()
                .filter(|(a, _)| a.entry(1) == Orientation::Up)
                .map(|(_, p)| p)
                .sum(),
        }
    }

    /// Draws a pattern; the returned row index is 0 except for tables, where
    /// it identifies the drawn row for weight-table alignment.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        rng: &mut R,
    ) -> (OffspringPattern, usize) {
        match self {
            PatternDist::Geometric { p, q_updown } => {
                let u: f64 = rng.random();
                let m = ((1.0 - u).ln() / (1.0 - p).ln()).floor().max(0.0) as usize;
                let excursions = sample_kinds(m, *q_updown, rng);
                (OffspringPattern::new(excursions, parent), 0)
            }
            PatternDist::ConstantCount {
                excursions,
                q_updown,
            } => {
                let kinds = sample_kinds(*excursions, *q_updown, rng);
                (OffspringPattern::new(kinds, parent), 0)
            }
            PatternDist::Table { rows } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (idx, (pattern, prob)) in rows.iter().enumerate() {
                    acc += prob;
                    if u < acc {
                        return (pattern.clone(), idx);
                    }
                }
                let last = rows.len() - 1;
                (rows[last].0.clone(), last)
            }
        }
    }

    pub fn table_rows(&self) -> Option<&[(OffspringPattern, f64)]> {
        match self {
            PatternDist::Table { rows } => Some(rows),
            _ => None,
        }
    }
}

fn sample_kinds<R: Rng + ?Sized>(m: usize, q_updown: f64, rng: &mut R) -> Vec<Excursion> {
    (0..m)
        .map(|_| {
            if rng.random::<f64>() < q_updown {
                Excursion::UpDown
            } else {
                Excursion::DownUp
            }
        })
        .collect()
}

/// Pattern distributions for both parent orientations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationLaw {
    pub up: PatternDist,
    pub down: PatternDist,
}

impl OrientationLaw {
    pub fn dist(&self, parent: Orientation) -> &PatternDist {
        match parent {
            Orientation::Up => &self.up,
            Orientation::Down => &self.down,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        self.up.validate(Orientation::Up)?;
        self.down.validate(Orientation::Down)
    }
}

/// Parametric law of one iid weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightFamily {
    Deterministic { value: f64 },
    Gamma { shape: f64, scale: f64 },
    LogNormal { location: f64, sigma: f64 },
}

impl WeightFamily {
    fn validate(&self) -> Result<(), ModelError> {
        let ok = match self {
            WeightFamily::Deterministic { value } => *value > 0.0 && value.is_finite(),
            WeightFamily::Gamma { shape, scale } => {
                *shape > 0.0 && shape.is_finite() && *scale > 0.0 && scale.is_finite()
            }
            WeightFamily::LogNormal { location, sigma } => {
                location.is_finite() && *sigma > 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidLaw(format!(
                "invalid weight family parameters: {self:?}"
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            WeightFamily::Deterministic { value } => *value,
            WeightFamily::Gamma { shape, scale } => shape * scale,
            WeightFamily::LogNormal { location, sigma } => (location + 0.5 * sigma * sigma).exp(),
        }
    }

    /// Rescales the family so its mean equals `target`.
    pub fn scaled_to_mean(&self, target: f64) -> Self {
        match self {
            WeightFamily::Deterministic { .. } => WeightFamily::Deterministic { value: target },
            WeightFamily::Gamma { shape, .. } => WeightFamily::Gamma {
                shape: *shape,
                scale: target / shape,
            },
            WeightFamily::LogNormal { sigma, .. } => WeightFamily::LogNormal {
                location: target.ln() - 0.5 * sigma * sigma,
                sigma: *sigma,
            },
        }
    }

    /// E(R^theta); infinite for gamma when theta <= -shape.
    pub fn theta_moment(&self, theta: f64) -> Result<f64, ModelError> {
        match self {
            WeightFamily::Deterministic { value } => Ok(value.powf(theta)),
            WeightFamily::Gamma { shape, scale } => {
                if shape + theta <= 0.0 {
                    Err(ModelError::InfiniteMoment { theta })
                } else {
                    Ok((theta * scale.ln() + ln_gamma(shape + theta) - ln_gamma(*shape)).exp())
                }
            }
            WeightFamily::LogNormal { location, sigma } => {
                Ok((theta * location + 0.5 * theta * theta * sigma * sigma).exp())
            }
        }
    }

    /// E(log R).
    pub fn mean_log(&self) -> f64 {
        match self {
            WeightFamily::Deterministic { value } => value.ln(),
            WeightFamily::Gamma { shape, scale } => digamma(*shape) + scale.ln(),
            WeightFamily::LogNormal { location, .. } => *location,
        }
    }

    /// E(R log R).
    pub fn r_log_r(&self) -> f64 {
        match self {
            WeightFamily::Deterministic { value } => value * value.ln(),
            WeightFamily::Gamma { shape, scale } => {
                shape * scale * (digamma(shape + 1.0) + scale.ln())
            }
            WeightFamily::LogNormal { location, sigma } => {
                (location + 0.5 * sigma * sigma).exp() * (location + sigma * sigma)
            }
        }
    }

    /// The size-biased family, with density proportional to r times the base
    /// density: gamma gains one unit of shape, lognormal shifts location by
    /// sigma^2, a point mass is unchanged.
    pub fn size_biased(&self) -> Self {
        match self {
            WeightFamily::Deterministic { value } => WeightFamily::Deterministic { value: *value },
            WeightFamily::Gamma { shape, scale } => WeightFamily::Gamma {
                shape: shape + 1.0,
                scale: *scale,
            },
            WeightFamily::LogNormal { location, sigma } => WeightFamily::LogNormal {
                location: location + sigma * sigma,
                sigma: *sigma,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            WeightFamily::Deterministic { value } => *value,
            WeightFamily::Gamma { shape, scale } => rand_distr::Gamma::new(*shape, *scale)
                .expect("parameters validated at construction")
                .sample(rng),
            WeightFamily::LogNormal { location, sigma } => {
                rand_distr::LogNormal::new(*location, *sigma)
                    .expect("parameters validated at construction")
                    .sample(rng)
            }
        }
    }
}

/// Weight law of a family, by mode. All weights are strictly positive and
/// finite almost surely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightLaw {
    /// Every weight equals `value` = 1/mu, making the time change exact.
    ConstantReciprocalMu { value: f64 },
    /// Weights iid within a family, with the family law selected by the
    /// parent orientation.
    Iid {
        up: WeightFamily,
        down: WeightFamily,
    },
    /// Deterministic weight vectors aligned row-for-row with a Table
    /// orientation law.
    PerPatternTable {
        up: Vec<Vec<f64>>,
        down: Vec<Vec<f64>>,
    },
}

impl WeightLaw {
    /// The effective iid family for one parent orientation, when the mode is
    /// slot-independent.
    pub fn iid_family(&self, parent: Orientation) -> Option<WeightFamily> {
        match self {
            WeightLaw::ConstantReciprocalMu { value } => {
                Some(WeightFamily::Deterministic { value: *value })
            }
            WeightLaw::Iid { up, down } => Some(match parent {
                Orientation::Up => *up,
                Orientation::Down => *down,
            }),
            WeightLaw::PerPatternTable { .. } => None,
        }
    }

    pub fn table_rows(&self, parent: Orientation) -> Option<&[Vec<f64>]> {
        match self {
            WeightLaw::PerPatternTable { up, down } => Some(match parent {
                Orientation::Up => up,
                Orientation::Down => down,
            }),
            _ => None,
        }
    }

    /// True when the joint (count, weight) law can differ by parent
    /// orientation, which switches the delta-moment branch of the
    /// conservation assumption. Per-pattern tables are treated as dependent.
    fn weights_orientation_dependent(&self) -> bool {
        match self {
            WeightLaw::ConstantReciprocalMu { .. } => false,
            WeightLaw::Iid { up, down } => up != down,
            WeightLaw::PerPatternTable { .. } => true,
        }
    }

    /// Draws the weight vector for a family, slot by slot in order.
    pub fn sample_family<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        pattern: &OffspringPattern,
        row: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let z = pattern.size();
        match self {
            WeightLaw::ConstantReciprocalMu { value } => vec![*value; z],
            WeightLaw::Iid { .. } => {
                let family = self.iid_family(parent).expect("iid mode");
                (0..z).map(|_| family.sample(rng)).collect()
            }
            WeightLaw::PerPatternTable { .. } => {
                self.table_rows(parent).expect("table mode")[row].clone()
            }
        }
    }
}

/// A 2x2 real matrix indexed by parent type (row) and child type (column),
/// Up = 0, Down = 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub fn mul_right(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1],
            self.0[1][0] * v[0] + self.0[1][1] * v[1],
        ]
    }

    pub fn mul_left(&self, u: [f64; 2]) -> [f64; 2] {
        [
            u[0] * self.0[0][0] + u[1] * self.0[1][0],
            u[0] * self.0[0][1] + u[1] * self.0[1][1],
        ]
    }

    pub fn scale(&self, c: f64) -> Mat2 {
        Mat2([
            [self.0[0][0] * c, self.0[0][1] * c],
            [self.0[1][0] * c, self.0[1][1] * c],
        ])
    }

    pub fn row(&self, i: usize) -> [f64; 2] {
        self.0[i]
    }
}

/// Perron eigensystem of a nonnegative 2x2 matrix: dominant eigenvalue,
/// left eigenvector normalized to sum 1, right eigenvector normalized so
/// left . right = 1.
#[derive(Clone, Copy, Debug)]
pub struct Perron2 {
    pub value: f64,
    pub left: [f64; 2],
    pub right: [f64; 2],
}

/// Closed-form Perron eigensystem via the quadratic formula. For a scalar
/// multiple of the identity every direction is an eigenvector; the
/// convention there is left (1/2, 1/2) and right (1, 1).
pub fn perron2(m: &Mat2) -> Perron2 {
    let [[a, b], [c, d]] = m.0;
    let tr = a + d;
    let disc = ((a - d) * (a - d) + 4.0 * b * c).max(0.0).sqrt();
    let lambda = 0.5 * (tr + disc);
    let scale = tr.abs().max(1.0);
    if b.abs() <= f64::EPSILON * scale
        && c.abs() <= f64::EPSILON * scale
        && (a - d).abs() <= f64::EPSILON * scale
    {
        return Perron2 {
            value: lambda,
            left: [0.5, 0.5],
            right: [1.0, 1.0],
        };
    }
    // (M - lambda I) has rank 1; pick the better-conditioned null relation.
    let right = {
        let cand1 = [b, lambda - a];
        let cand2 = [lambda - d, c];
        if cand1[0].abs() + cand1[1].abs() >= cand2[0].abs() + cand2[1].abs() {
            cand1
        } else {
            cand2
        }
    };
    let left = {
        let cand1 = [c, lambda - a];
        let cand2 = [lambda - d, b];
        if cand1[0].abs() + cand1[1].abs() >= cand2[0].abs() + cand2[1].abs() {
            cand1
        } else {
            cand2
        }
    };
    let ls = left[0] + left[1];
    let left = if ls != 0.0 {
        [left[0] / ls, left[1] / ls]
    } else {
        [0.5, 0.5]
    };
    let dot = left[0] * right[0] + left[1] * right[1];
    let right = if dot != 0.0 {
        [right[0] / dot, right[1] / dot]
    } else {
        right
    };
    Perron2 {
        value: lambda,
        left,
        right,
    }
}

/// The weight-moment matrix M(theta) with its Perron eigensystem.
#[derive(Clone, Copy, Debug)]
pub struct MTheta {
    pub matrix: Mat2,
    pub eigenvalue: f64,
    pub left: [f64; 2],
    pub right: [f64; 2],
}

/// Monte Carlo estimate of M(theta) with per-entry standard errors.
#[derive(Clone, Copy, Debug)]
pub struct MThetaMc {
    pub mean: Mat2,
    pub std_err: Mat2,
}

/// All derived spectral quantities of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub mu: f64,
    pub m0: Mat2,
    /// Left Perron eigenvector of M(1), normalized to sum 1.
    pub left_u: [f64; 2],
    /// Right Perron eigenvector of M(1), normalized so left_u . right_v = 1.
    pub right_v: [f64; 2],
    pub hurst_h: f64,
    pub fixed_point_a: f64,
    /// P(first subcrossing Up | parent Up).
    pub first_up_given_up: f64,
    /// P(first subcrossing Up | parent Down).
    pub first_up_given_down: f64,
}

impl SpectralSummary {
    pub fn v(&self, o: Orientation) -> f64 {
        self.right_v[o.index()]
    }

    pub fn u(&self, o: Orientation) -> f64 {
        self.left_u[o.index()]
    }

    /// Z = 2 almost surely collapses the process to a straight line.
    pub fn is_degenerate_straight_line(&self) -> bool {
        self.mu <= 2.0 + EXACT_TOL
    }
}

/// Outcome of a single assumption check, with the quantities and tolerance
/// behind the verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    Unverifiable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub status: CheckStatus,
    pub quantities: Vec<(String, f64)>,
    pub tolerance: f64,
    pub note: String,
}

/// Verdicts for the four structural assumptions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Supercriticality: mu_plus, mu_minus > 2 (with finite Z log Z moments).
    pub a1: AssumptionCheck,
    /// Cascade conservation: mu(1) = 1, mu'(1) < 0, plus the moment condition
    /// for the applicable dependence branch.
    pub a2: AssumptionCheck,
    /// Negative log-weight drift along first crossings.
    pub a3: AssumptionCheck,
    /// Negative spinal log-weight drift under the size-biased law.
    pub a4: AssumptionCheck,
    /// Z = 2 almost surely; allowed but flagged.
    pub degenerate_straight_line: bool,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        [&self.a1, &self.a2, &self.a3, &self.a4]
            .iter()
            .all(|c| c.status == CheckStatus::Pass)
    }
}

/// One fully specified model: pattern law, weight law, and the optional
/// first-crossing override for the degenerate (u, v) = (1, 0) case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    orientation_law: OrientationLaw,
    weight_law: WeightLaw,
    first_crossing_override: Option<f64>,
}

impl ModelSpec {
    /// Validates the laws and (when `normalize` is set) rescales the weight
    /// law so that mu(1) = 1: iid families to mean 1/mu, weight tables by
    /// 1/mu(1) globally. A ConstantReciprocalMu law always takes the value
    /// 1/mu regardless of input.
    pub fn new(
        orientation_law: OrientationLaw,
        weight_law: WeightLaw,
        normalize: bool,
        first_crossing_override: Option<f64>,
    ) -> Result<Self, ModelError> {
        orientation_law.validate()?;
        if let Some(a) = first_crossing_override {
            if !(0.0..=1.0).contains(&a) {
                return Err(ModelError::InvalidLaw(format!(
                    "first_crossing_override must be in [0, 1], got {a}"
                )));
            }
        }
        let mu = (orientation_law.up.mean_count() + orientation_law.down.mean_count()) / 2.0;
        let weight_law = match weight_law {
            WeightLaw::ConstantReciprocalMu { .. } => {
                WeightLaw::ConstantReciprocalMu { value: 1.0 / mu }
            }
            WeightLaw::Iid { up, down } => {
                up.validate()?;
                down.validate()?;
                if normalize {
                    WeightLaw::Iid {
                        up: up.scaled_to_mean(1.0 / mu),
                        down: down.scaled_to_mean(1.0 / mu),
                    }
                } else {
                    WeightLaw::Iid { up, down }
                }
            }
            WeightLaw::PerPatternTable { up, down } => {
                let mut spec = ModelSpec {
                    orientation_law: orientation_law.clone(),
                    weight_law: WeightLaw::PerPatternTable { up, down },
                    first_crossing_override,
                };
                spec.validate_weight_table()?;
                if normalize {
                    let mu1 = spec.m_theta(1.0)?.eigenvalue;
                    if !(mu1 > 0.0 && mu1.is_finite()) {
                        return Err(ModelError::InvalidLaw(format!(
                            "cannot normalize weight table with mu(1) = {mu1}"
                        )));
                    }
                    if let WeightLaw::PerPatternTable { up, down } = &mut spec.weight_law {
                        for row in up.iter_mut().chain(down.iter_mut()) {
                            for w in row.iter_mut() {
                                *w /= mu1;
                            }
                        }
                    }
                }
                return Ok(spec);
            }
        };
        Ok(ModelSpec {
            orientation_law,
            weight_law,
            first_crossing_override,
        })
    }

    fn validate_weight_table(&self) -> Result<(), ModelError> {
        for parent in Orientation::BOTH {
            let rows = self
                .weight_law
                .table_rows(parent)
                .expect("called for table mode only");
            let patterns = self
                .orientation_law
                .dist(parent)
                .table_rows()
                .ok_or_else(|| {
                    ModelError::InvalidLaw(
                        "per-pattern weight tables require a Table orientation law".into(),
                    )
                })?;
            if rows.len() != patterns.len() {
                return Err(ModelError::InvalidLaw(format!(
                    "weight table for parent {parent} has {} rows, pattern table has {}",
                    rows.len(),
                    patterns.len()
                )));
            }
            for (row, (pattern, _)) in rows.iter().zip(patterns) {
                if row.len() != pattern.size() {
                    return Err(ModelError::InvalidLaw(format!(
                        "weight row for pattern {pattern} has {} entries, expected {}",
                        row.len(),
                        pattern.size()
                    )));
                }
                if row.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(ModelError::InvalidLaw(format!(
                        "weights for pattern {pattern} must be strictly positive and finite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn orientation_law(&self) -> &OrientationLaw {
        &self.orientation_law
    }

    pub fn weight_law(&self) -> &WeightLaw {
        &self.weight_law
    }

    pub fn first_crossing_override(&self) -> Option<f64> {
        self.first_crossing_override
    }

    pub fn mu_plus(&self) -> f64 {
        self.orientation_law.up.mean_count()
    }

    pub fn mu_minus(&self) -> f64 {
        self.orientation_law.down.mean_count()
    }

    /// Perron eigenvalue of the mean offspring matrix: (mu_plus + mu_minus)/2.
    pub fn mu(&self) -> f64 {
        0.5 * (self.mu_plus() + self.mu_minus())
    }

    /// Mean offspring matrix: row i = (mu_i/2 + 1, mu_i/2 - 1) ordered with
    /// the diagonal entry first.
    pub fn m0(&self) -> Mat2 {
        let (mp, mm) = (self.mu_plus(), self.mu_minus());
        Mat2([
            [mp / 2.0 + 1.0, mp / 2.0 - 1.0],
            [mm / 2.0 - 1.0, mm / 2.0 + 1.0],
        ])
    }

    /// True when the joint (count, weight) family law depends on the parent
    /// orientation.
    pub fn orientation_dependent(&self) -> bool {
        self.orientation_law.up != self.orientation_law.down
            || self.weight_law.weights_orientation_dependent()
    }

    /// Weight-moment matrix: entry (i, j) is the expected sum of theta-powers
    /// of the weights of type-j children given a type-i parent. Closed form
    /// for iid modes, exact summation for tables.
    pub fn m_theta(&self, theta: f64) -> Result<MTheta, ModelError> {
        let m0 = self.m0();
        let matrix = match &self.weight_law {
            WeightLaw::PerPatternTable { .. } => {
                let mut m = [[0.0; 2]; 2];
                for parent in Orientation::BOTH {
                    let i = parent.index();
                    let patterns = self
                        .orientation_law
                        .dist(parent)
                        .table_rows()
                        .expect("validated: table weights imply table patterns");
                    let weights = self.weight_law.table_rows(parent).expect("table mode");
                    for ((pattern, prob), row) in patterns.iter().zip(weights) {
                        for (slot, w) in row.iter().enumerate() {
                            let j = pattern.entry(slot + 1).index();
                            m[i][j] += prob * w.powf(theta);
                        }
                    }
                }
                Mat2(m)
            }
            _ => {
                let g_up = self
                    .weight_law
                    .iid_family(Orientation::Up)
                    .expect("iid mode")
                    .theta_moment(theta)?;
                let g_down = self
                    .weight_law
                    .iid_family(Orientation::Down)
                    .expect("iid mode")
                    .theta_moment(theta)?;
                Mat2([
                    [g_up * m0.0[0][0], g_up * m0.0[0][1]],
                    [g_down * m0.0[1][0], g_down * m0.0[1][1]],
                ])
            }
        };
        let p = perron2(&matrix);
        Ok(MTheta {
            matrix,
            eigenvalue: p.value,
            left: p.left,
            right: p.right,
        })
    }

    /// Monte Carlo estimate of M(theta) from `n_per_parent` sampled families
    /// per parent orientation, with per-entry standard errors.
    pub fn m_theta_monte_carlo<R: Rng + ?Sized>(
        &self,
        theta: f64,
        n_per_parent: usize,
        rng: &mut R,
    ) -> MThetaMc {
        let mut mean = [[0.0; 2]; 2];
        let mut se = [[0.0; 2]; 2];
        for parent in Orientation::BOTH {
            let i = parent.index();
            let mut sum = [0.0; 2];
            let mut sumsq = [0.0; 2];
            for _ in 0..n_per_parent {
                let (pattern, weights) = self.draw_family(parent, rng);
                let mut x = [0.0; 2];
                for (slot, w) in weights.iter().enumerate() {
                    x[pattern.entry(slot + 1).index()] += w.powf(theta);
                }
                for j in 0..2 {
                    sum[j] += x[j];
                    sumsq[j] += x[j] * x[j];
                }
            }
            let n = n_per_parent as f64;
            for j in 0..2 {
                let m = sum[j] / n;
                let var = (sumsq[j] / n - m * m).max(0.0) / (n - 1.0);
                mean[i][j] = m;
                se[i][j] = var.sqrt();
            }
        }
        MThetaMc {
            mean: Mat2(mean),
            std_err: Mat2(se),
        }
    }

    /// First-crossing probabilities (u, v): P(first subcrossing Up) given an
    /// Up / Down parent.
    pub fn first_crossing(&self) -> (f64, f64) {
        (
            self.orientation_law.up.first_up_prob(Orientation::Up),
            self.orientation_law.down.first_up_prob(Orientation::Down),
        )
    }

    /// Stationary probability that a first crossing is Up: the fixed point
    /// a = v/(1-u+v), or the override when (u, v) = (1, 0).
    pub fn fixed_point_a(&self) -> Result<f64, ModelError> {
        let (u, v) = self.first_crossing();
        if (u - 1.0).abs() < EXACT_TOL && v.abs() < EXACT_TOL {
            self.first_crossing_override
                .ok_or(ModelError::DegenerateFirstCrossing)
        } else {
            Ok(v / (1.0 - u + v))
        }
    }

    /// All spectral quantities. The eigenvectors are those of M(1), which for
    /// normalized laws coincide with those of the mean offspring matrix.
    pub fn spectral_summary(&self) -> Result<SpectralSummary, ModelError> {
        let m1 = self.m_theta(1.0)?;
        let (u, v) = self.first_crossing();
        let a = self.fixed_point_a()?;
        let mu = self.mu();
        Ok(SpectralSummary {
            mu_plus: self.mu_plus(),
            mu_minus: self.mu_minus(),
            mu,
            m0: self.m0(),
            left_u: m1.left,
            right_v: m1.right,
            hurst_h: 2f64.ln() / mu.ln(),
            fixed_point_a: a,
            first_up_given_up: u,
            first_up_given_down: v,
        })
    }

    /// Draws one family: pattern first, then the weight vector in slot order.
    pub fn draw_family<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        rng: &mut R,
    ) -> (OffspringPattern, Vec<f64>) {
        let (pattern, row) = self.orientation_law.dist(parent).sample(parent, rng);
        let weights = self.weight_law.sample_family(parent, &pattern, row, rng);
        (pattern, weights)
    }

    /// Draws a family conditioned on its first subcrossing having orientation
    /// `first`, by rejection: each attempt draws a full family (pattern, then
    /// weights) and is accepted iff the first entry matches.
    pub fn draw_family_conditioned_first<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        first: Orientation,
        rng: &mut R,
    ) -> Result<(OffspringPattern, Vec<f64>), ModelError> {
        for _ in 0..REJECTION_CAP {
            let (pattern, weights) = self.draw_family(parent, rng);
            if pattern.entry(1) == first {
                return Ok((pattern, weights));
            }
        }
        Err(ModelError::RejectionCapExceeded {
            attempts: REJECTION_CAP,
        })
    }

    /// d/d theta of the Perron eigenvalue of M(theta) at theta = 1: in closed
    /// form mu * E(R log R) when both parents share one iid family, otherwise
    /// by a central difference with step 1e-4.
    pub fn mu_prime_1(&self) -> Result<f64, ModelError> {
        let shared = match &self.weight_law {
            WeightLaw::ConstantReciprocalMu { .. } => self.weight_law.iid_family(Orientation::Up),
            WeightLaw::Iid { up, down } if up == down => Some(*up),
            _ => None,
        };
        match shared {
            Some(family) => Ok(self.mu() * family.r_log_r()),
            None => {
                let h = 1e-4;
                let hi = self.m_theta(1.0 + h)?.eigenvalue;
                let lo = self.m_theta(1.0 - h)?.eigenvalue;
                Ok((hi - lo) / (2.0 * h))
            }
        }
    }

    /// E(log of the first weight in a family) given the parent orientation.
    fn first_weight_mean_log(&self, parent: Orientation) -> f64 {
        match &self.weight_law {
            WeightLaw::PerPatternTable { .. } => {
                let patterns = self
                    .orientation_law
                    .dist(parent)
                    .table_rows()
                    .expect("validated: table weights imply table patterns");
                let rows = self.weight_law.table_rows(parent).expect("table mode");
                patterns
                    .iter()
                    .zip(rows)
                    .map(|((_, prob), row)| prob * row[0].ln())
                    .sum()
            }
            _ => self
                .weight_law
                .iid_family(parent)
                .expect("iid mode")
                .mean_log(),
        }
    }

    /// Checks the four structural assumptions. Failures are reported, never
    /// raised; quantities that cannot be decided are marked unverifiable.
    pub fn check_assumptions(&self) -> AssumptionReport {
        let (mu_p, mu_m) = (self.mu_plus(), self.mu_minus());
        let a1 = AssumptionCheck {
            status: if mu_p > 2.0 && mu_m > 2.0 {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            quantities: vec![("mu_plus".into(), mu_p), ("mu_minus".into(), mu_m)],
            tolerance: 0.0,
            note: "requires mu_plus, mu_minus > 2; Z log Z moments are finite for all \
                   supported count families"
                .into(),
        };

        let a2 = self.check_a2();
        let a3 = self.check_a3();
        let a4 = crate::sizebias::check_assumption4_auto(self);

        AssumptionReport {
            a1,
            a2,
            a3,
            a4,
            degenerate_straight_line: self.mu() <= 2.0 + EXACT_TOL,
        }
    }

    fn check_a2(&self) -> AssumptionCheck {
        let mut quantities = Vec::new();
        let mut note = String::new();
        let mu1 = match self.m_theta(1.0) {
            Ok(m) => m.eigenvalue,
            Err(e) => {
                return AssumptionCheck {
                    status: CheckStatus::Unverifiable,
                    quantities,
                    tolerance: CONSERVATION_TOL,
                    note: format!("mu(1) not computable: {e}"),
                }
            }
        };
        let residual = (mu1 - 1.0).abs();
        quantities.push(("mu(1)".into(), mu1));
        quantities.push(("conservation_residual".into(), residual));
        let mut status = if residual <= CONSERVATION_TOL {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };

        match self.mu_prime_1() {
            Ok(d) => {
                quantities.push(("mu_prime(1)".into(), d));
                if d >= 0.0 {
                    status = CheckStatus::Fail;
                }
            }
            Err(e) => {
                note.push_str(&format!("mu'(1) not computable: {e}; "));
                status = CheckStatus::Unverifiable;
            }
        }

        if self.orientation_dependent() {
            // Orientation-dependent branch: need mu(delta) < 1 for some
            // delta > 1, searched on a fixed grid; grid failure is
            // inconclusive rather than a failure.
            const GRID: [f64; 4] = [1.1, 1.25, 1.5, 2.0];
            let mut found = None;
            for delta in GRID {
                if let Ok(m) = self.m_theta(delta) {
                    quantities.push((format!("mu({delta})"), m.eigenvalue));
                    if m.eigenvalue < 1.0 {
                        found = Some(delta);
                        break;
                    }
                }
            }
            match found {
                Some(delta) => note.push_str(&format!(
                    "orientation-dependent law: mu({delta}) < 1 on the search grid; \
                     delta-moments of weight sums are finite for all supported families"
                )),
                None => {
                    note.push_str(
                        "orientation-dependent law: no grid delta with mu(delta) < 1 found",
                    );
                    if status == CheckStatus::Pass {
                        status = CheckStatus::Unverifiable;
                    }
                }
            }
        } else {
            note.push_str(
                "orientation-independent law: E(sum R log sum R) is finite for all \
                 supported families",
            );
        }

        AssumptionCheck {
            status,
            quantities,
            tolerance: CONSERVATION_TOL,
            note,
        }
    }

    fn check_a3(&self) -> AssumptionCheck {
        let (u, v) = self.first_crossing();
        let log_up = self.first_weight_mean_log(Orientation::Up);
        let log_down = self.first_weight_mean_log(Orientation::Down);
        let u_is_one = (u - 1.0).abs() < EXACT_TOL;
        let v_is_zero = v.abs() < EXACT_TOL;
        let mut quantities = vec![
            ("first_up_given_up".into(), u),
            ("first_up_given_down".into(), v),
            ("mean_log_first_weight_up".into(), log_up),
            ("mean_log_first_weight_down".into(), log_down),
        ];
        let (status, note) = match (u_is_one, v_is_zero) {
            (false, false) => {
                let value = log_up / (1.0 - u) + log_down / v;
                quantities.push(("drift_functional".into(), value));
                (
                    if value < 0.0 {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    },
                    "requires log-weight drift (1/(1-u)) E(log R | +) + (1/v) E(log R | -) < 0"
                        .to_string(),
                )
            }
            (true, false) => (
                if log_up < 0.0 {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                "u = 1: requires E(log first weight | +) < 0".to_string(),
            ),
            (false, true) => (
                if log_down < 0.0 {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                "v = 0: requires E(log first weight | -) < 0".to_string(),
            ),
            (true, true) => (
                if log_up < 0.0 && log_down < 0.0 {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                "(u, v) = (1, 0): requires E(log first weight | +-) < 0 for both parents"
                    .to_string(),
            ),
        };
        AssumptionCheck {
            status,
            quantities,
            tolerance: 0.0,
            note,
        }
    }
}

/// Optional parameter overrides for the builtin catalog.
#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinParams {
    /// Shape of builtin gamma weight families (default 3).
    pub gamma_shape: Option<f64>,
    /// Excursion-count parameter of geometric builtins.
    pub geometric_p: Option<f64>,
    /// First-crossing override for degenerate builtins (default 1/2).
    pub first_crossing_override: Option<f64>,
}

/// Names accepted by `builtin_model`.
pub const BUILTIN_MODELS: [&str; 5] = [
    "brownian",
    "brownian-gamma",
    "persistent",
    "asymmetric",
    "binary-cascade",
];

/// The documented builtin catalog:
/// - `brownian`: geometric(1/2) excursions, kinds equiprobable, constant
///   weights 1/mu. Mean count 4, Hurst 1/2.
/// - `brownian-gamma`: same pattern law with iid gamma weights normalized to
///   mean 1/mu.
/// - `persistent`: geometric(0.6) excursions with iid gamma weights;
///   Hurst index above 1/2.
/// - `asymmetric`: geometric(1/2) Up parents, geometric(0.7) Down parents,
///   constant weights; distinct mu_plus and mu_minus.
/// - `binary-cascade`: Z = 2 always with iid gamma weights; the degenerate
///   straight-line case, carrying a first-crossing override of 1/2.
pub fn builtin_model(name: &str, params: &BuiltinParams) -> Result<ModelSpec, ModelError> {
    let shape = params.gamma_shape.unwrap_or(3.0);
    let gamma = WeightFamily::Gamma { shape, scale: 1.0 };
    let geometric = |p: f64| PatternDist::Geometric { p, q_updown: 0.5 };
    match name {
        "brownian" => ModelSpec::new(
            OrientationLaw {
                up: geometric(0.5),
                down: geometric(0.5),
            },
            WeightLaw::ConstantReciprocalMu { value: 0.0 },
            true,
            None,
        ),
        "brownian-gamma" => ModelSpec::new(
            OrientationLaw {
                up: geometric(0.5),
                down: geometric(0.5),
            },
            WeightLaw::Iid {
                up: gamma,
                down: gamma,
            },
            true,
            None,
        ),
        "persistent" => {
            let p = params.geometric_p.unwrap_or(0.6);
            ModelSpec::new(
                OrientationLaw {
                    up: geometric(p),
                    down: geometric(p),
                },
                WeightLaw::Iid {
                    up: gamma,
                    down: gamma,
                },
                true,
                None,
            )
        }
        "asymmetric" => ModelSpec::new(
            OrientationLaw {
                up: geometric(0.5),
                down: geometric(0.7),
            },
            WeightLaw::ConstantReciprocalMu { value: 0.0 },
            true,
            None,
        ),
        "binary-cascade" => ModelSpec::new(
            OrientationLaw {
                up: PatternDist::ConstantCount {
                    excursions: 0,
                    q_updown: 0.5,
                },
                down: PatternDist::ConstantCount {
                    excursions: 0,
                    q_updown: 0.5,
                },
            },
            WeightLaw::Iid {
                up: gamma,
                down: gamma,
            },
            true,
            Some(params.first_crossing_override.unwrap_or(0.5)),
        ),
        _ => Err(ModelError::UnknownModel(name.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn pattern_entries_and_counts() {
        let p = OffspringPattern::new(vec![Excursion::UpDown, Excursion::DownUp], Orientation::Up);
        assert_eq!(p.size(), 6);
        let seq: Vec<Orientation> = p.orientations().collect();
        use Orientation::{Down, Up};
        assert_eq!(seq, vec![Up, Down, Down, Up, Up, Up]);
        assert_eq!(p.count(Up), 4);
        assert_eq!(p.count(Down), 2);
    }

    #[test]
    fn validate_pattern_examples() {
        let one_excursion = OffspringPattern::new(vec![Excursion::UpDown], Orientation::Up);
        assert!(validate_pattern(&one_excursion, Orientation::Up));
        let base = OffspringPattern::new(vec![], Orientation::Up);
        assert!(validate_pattern(&base, Orientation::Up));
        let mismatched = OffspringPattern::new(vec![Excursion::UpDown], Orientation::Down);
        assert!(!validate_pattern(&mismatched, Orientation::Up));
    }

    #[test]
    fn pattern_roundtrip_and_rejects() {
        let p = OffspringPattern::parse("+-++").unwrap();
        assert_eq!(p.excursion_count(), 1);
        assert_eq!(p.direct(), Orientation::Up);
        assert_eq!(p.to_string(), "+-++");
        assert!(OffspringPattern::parse("+").is_err());
        assert!(OffspringPattern::parse("+-").is_err());
        assert!(OffspringPattern::parse("++--").is_err());
        assert!(OffspringPattern::parse("+x++").is_err());
    }

    #[test]
    fn brownian_spectral_exact() {
        let model = builtin_model("brownian", &BuiltinParams::default()).unwrap();
        let s = model.spectral_summary().unwrap();
        assert_close(s.mu_plus, 4.0, 1e-12);
        assert_close(s.mu_minus, 4.0, 1e-12);
        assert_close(s.mu, 4.0, 1e-12);
        assert_eq!(s.m0, Mat2([[3.0, 1.0], [1.0, 3.0]]));
        assert_close(s.hurst_h, 0.5, 1e-15);
        assert_close(s.fixed_point_a, 0.5, 1e-15);
        assert_close(s.first_up_given_up, 0.75, 1e-15);
        assert_close(s.first_up_given_down, 0.25, 1e-15);
        assert_close(s.left_u[0], 0.5, 1e-14);
        assert_close(s.left_u[1], 0.5, 1e-14);
        assert_close(s.right_v[0], 1.0, 1e-14);
        assert_close(s.right_v[1], 1.0, 1e-14);
        assert!(!s.is_degenerate_straight_line());
    }

    #[test]
    fn persistent_spectral() {
        let model = builtin_model("persistent", &BuiltinParams::default()).unwrap();
        let s = model.spectral_summary().unwrap();
        assert_close(s.mu, 10.0 / 3.0, 1e-12);
        assert_close(s.hurst_h, 0.575_716_642_493_444_9, 1e-12);
    }

    #[test]
    fn asymmetric_spectral_frozen() {
        let model = builtin_model("asymmetric", &BuiltinParams::default()).unwrap();
        let s = model.spectral_summary().unwrap();
        assert_close(s.mu_plus, 4.0, 1e-12);
        assert_close(s.mu_minus, 20.0 / 7.0, 1e-12);
        assert_close(s.mu, 24.0 / 7.0, 1e-12);
        assert_close(s.hurst_h, 0.562_553_857_219_614_2, 1e-12);
        assert_close(s.first_up_given_up, 0.75, 1e-15);
        assert_close(s.first_up_given_down, 0.15, 1e-15);
        assert_close(s.fixed_point_a, 0.375, 1e-14);
        assert_close(s.right_v[0], 1.4, 1e-12);
        assert_close(s.right_v[1], 0.6, 1e-12);
        assert_close(s.left_u[0], 0.5, 1e-12);
        assert_close(s.left_u[1], 0.5, 1e-12);
    }

    #[test]
    fn binary_cascade_degenerate() {
        let model = builtin_model("binary-cascade", &BuiltinParams::default()).unwrap();
        let s = model.spectral_summary().unwrap();
        assert_eq!(s.m0, Mat2([[2.0, 0.0], [0.0, 2.0]]));
        assert_close(s.mu, 2.0, 1e-15);
        assert_close(s.hurst_h, 1.0, 1e-15);
        assert!(s.is_degenerate_straight_line());
        assert_close(s.fixed_point_a, 0.5, 1e-15);
        assert_close(s.left_u[0], 0.5, 1e-15);
        assert_close(s.right_v[0], 1.0, 1e-12);
        assert_close(s.right_v[1], 1.0, 1e-12);

        // Without an override the fixed point is undetermined.
        let bare = ModelSpec::new(
            OrientationLaw {
                up: PatternDist::ConstantCount {
                    excursions: 0,
                    q_updown: 0.5,
                },
                down: PatternDist::ConstantCount {
                    excursions: 0,
                    q_updown: 0.5,
                },
            },
            WeightLaw::ConstantReciprocalMu { value: 0.0 },
            true,
            None,
        )
        .unwrap();
        assert!(matches!(
            bare.spectral_summary(),
            Err(ModelError::DegenerateFirstCrossing)
        ));
    }

    #[test]
    fn eigen_residuals_all_builtins() {
        for name in BUILTIN_MODELS {
            let model = builtin_model(name, &BuiltinParams::default()).unwrap();
            let m1 = model.m_theta(1.0).unwrap();
            let s = model.spectral_summary().unwrap();
            let mv = m1.matrix.mul_right(s.right_v);
            let um = m1.matrix.mul_left(s.left_u);
            for i in 0..2 {
                assert!(
                    (mv[i] - s.right_v[i]).abs() < EXACT_TOL,
                    "{name}: M(1)v residual"
                );
                assert!(
                    (um[i] - s.left_u[i]).abs() < EXACT_TOL,
                    "{name}: uM(1) residual"
                );
            }
            let dot = s.left_u[0] * s.right_v[0] + s.left_u[1] * s.right_v[1];
            assert!((dot - 1.0).abs() < EXACT_TOL, "{name}: u.v normalization");
        }
    }

    #[test]
    fn m_theta_at_zero_is_m0() {
        for name in ["brownian", "brownian-gamma", "asymmetric"] {
            let model = builtin_model(name, &BuiltinParams::default()).unwrap();
            let m = model.m_theta(0.0).unwrap();
            let m0 = model.m0();
            for i in 0..2 {
                for j in 0..2 {
                    assert_close(m.matrix.0[i][j], m0.0[i][j], 1e-12);
                }
            }
            assert_close(m.eigenvalue, model.mu(), 1e-12);
        }
    }

    #[test]
    fn m_theta_conservation_at_one() {
        for name in BUILTIN_MODELS {
            let model = builtin_model(name, &BuiltinParams::default()).unwrap();
            let m1 = model.m_theta(1.0).unwrap();
            assert!(
                (m1.eigenvalue - 1.0).abs() < CONSERVATION_TOL,
                "{name}: mu(1) = 1"
            );
        }
    }

    #[test]
    fn brownian_gamma_moments_frozen() {
        let model = builtin_model("brownian-gamma", &BuiltinParams::default()).unwrap();
        // Normalized family: gamma(3, 1/12).
        let fam = model.weight_law().iid_family(Orientation::Up).unwrap();
        assert_close(fam.mean(), 0.25, 1e-15);
        assert_close(
            model.m_theta(0.5).unwrap().eigenvalue,
            1.918_737_577_399_665_8,
            1e-12,
        );
        assert_close(
            model.m_theta(1.5).unwrap().eigenvalue,
            0.559_631_793_408_236_4,
            1e-12,
        );
        assert_close(model.m_theta(2.0).unwrap().eigenvalue, 1.0 / 3.0, 1e-12);
        assert_close(model.mu_prime_1().unwrap(), -1.228_788_981_356_199_8, 1e-12);
        assert!(matches!(
            fam.theta_moment(-3.5),
            Err(ModelError::InfiniteMoment { .. })
        ));
    }

    #[test]
    fn m_theta_matches_monte_carlo() {
        let model = builtin_model("brownian-gamma", &BuiltinParams::default()).unwrap();
        let mut r = rng(42);
        for theta in [0.5, 1.0, 1.5] {
            let exact = model.m_theta(theta).unwrap();
            let mc = model.m_theta_monte_carlo(theta, 100_000, &mut r);
            for i in 0..2 {
                for j in 0..2 {
                    let diff = (mc.mean.0[i][j] - exact.matrix.0[i][j]).abs();
                    assert!(
                        diff <= 3.0 * mc.std_err.0[i][j],
                        "theta {theta} entry ({i},{j}): |{diff}| > 3 SE {}",
                        mc.std_err.0[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn sampled_patterns_always_valid() {
        let mut r = rng(7);
        for name in BUILTIN_MODELS {
            let model = builtin_model(name, &BuiltinParams::default()).unwrap();
            for parent in Orientation::BOTH {
                for _ in 0..10_000 {
                    let (pattern, weights) = model.draw_family(parent, &mut r);
                    assert!(validate_pattern(&pattern, parent));
                    assert_eq!(weights.len(), pattern.size());
                    assert!(weights.iter().all(|w| *w > 0.0 && w.is_finite()));
                }
            }
        }
    }

    #[test]
    fn conditioned_family_first_entry() {
        let mut r = rng(11);
        let model = builtin_model("brownian", &BuiltinParams::default()).unwrap();
        for parent in Orientation::BOTH {
            for first in Orientation::BOTH {
                let (pattern, _) = model
                    .draw_family_conditioned_first(parent, first, &mut r)
                    .unwrap();
                assert_eq!(pattern.entry(1), first);
                assert_eq!(pattern.direct(), parent);
            }
        }
    }

    #[test]
    fn geometric_count_marginal() {
        // P(Z = 2x) = 2^-x for the brownian pattern law.
        let model = builtin_model("brownian", &BuiltinParams::default()).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let (pattern, _) = model.draw_family(Orientation::Up, &mut r);
            let z = pattern.size();
            if z / 2 - 1 < counts.len() {
                counts[z / 2 - 1] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            let p = 0.5f64.powi(i as i32 + 1);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (*c as f64 / n as f64 - p).abs() < 3.0 * se,
                "Z = {}",
                2 * (i + 1)
            );
        }
    }

    #[test]
    fn assumptions_pass_for_regular_builtins() {
        for name in ["brownian", "brownian-gamma", "persistent", "asymmetric"] {
            let model = builtin_model(name, &BuiltinParams::default()).unwrap();
            let report = model.check_assumptions();
            assert!(report.all_pass(), "{name}: {report:?}");
            assert!(!report.degenerate_straight_line, "{name}");
        }
    }

    #[test]
    fn binary_cascade_assumption_report() {
        let model = builtin_model("binary-cascade", &BuiltinParams::default()).unwrap();
        let report = model.check_assumptions();
        assert_eq!(report.a1.status, CheckStatus::Fail);
        assert!(report.degenerate_straight_line);
        assert_eq!(report.a2.status, CheckStatus::Pass);
        assert_eq!(report.a3.status, CheckStatus::Pass);
        assert_eq!(report.a4.status, CheckStatus::Pass);
        assert!(!report.all_pass());
    }

    #[test]
    fn unnormalized_law_fails_conservation() {
        // Gamma family with mean 1.2/mu: mu(1) = 1.2.
        let model = ModelSpec::new(
            OrientationLaw {
                up: PatternDist::Geometric {
                    p: 0.5,
                    q_updown: 0.5,
                },
                down: PatternDist::Geometric {
                    p: 0.5,
                    q_updown: 0.5,
                },
            },
            WeightLaw::Iid {
                up: WeightFamily::Gamma {
                    shape: 3.0,
                    scale: 0.1,
                },
                down: WeightFamily::Gamma {
                    shape: 3.0,
                    scale: 0.1,
                },
            },
            false,
            None,
        )
        .unwrap();
        let report = model.check_assumptions();
        assert_eq!(report.a2.status, CheckStatus::Fail);
        let mu1 = report
            .a2
            .quantities
            .iter()
            .find(|(k, _)| k == "mu(1)")
            .unwrap()
            .1;
        assert_close(mu1, 1.2, 1e-9);
    }

    #[test]
    fn orientation_dependent_weights_delta_grid() {
        let model = ModelSpec::new(
            OrientationLaw {
                up: PatternDist::Geometric {
                    p: 0.5,
                    q_updown: 0.5,
                },
                down: PatternDist::Geometric {
                    p: 0.5,
                    q_updown: 0.5,
                },
            },
            WeightLaw::Iid {
                up: WeightFamily::Gamma {
                    shape: 3.0,
                    scale: 1.0,
                },
                down: WeightFamily::Gamma {
                    shape: 1.0,
                    scale: 1.0,
                },
            },
            true,
            None,
        )
        .unwrap();
        assert!(model.orientation_dependent());
        let report = model.check_assumptions();
        assert_eq!(report.a2.status, CheckStatus::Pass, "{:?}", report.a2);
    }

    #[test]
    fn a3_frozen_values() {
        let model = builtin_model("brownian", &BuiltinParams::default()).unwrap();
        let report = model.check_assumptions();
        let drift = report
            .a3
            .quantities
            .iter()
            .find(|(k, _)| k == "drift_functional")
            .unwrap()
            .1;
        // (1/(1-u) + 1/v) * ln(1/4) with u = 3/4, v = 1/4.
        assert_close(drift, -8.0 * 4f64.ln(), 1e-12);
    }

    #[test]
    fn weight_family_frozen_moments() {
        let g = WeightFamily::Gamma {
            shape: 3.0,
            scale: 1.0 / 12.0,
        };
        assert_close(g.mean_log(), -1.562_122_314_689_533, 1e-12);
        assert_close(g.r_log_r(), -0.307_197_245_339_05, 1e-12);
        let sb = g.size_biased();
        assert_close(sb.mean_log(), -1.228_788_981_356_199_9, 1e-12);

        let ln = WeightFamily::LogNormal {
            location: -1.5,
            sigma: 0.5,
        };
        assert_close(ln.mean(), (-1.5f64 + 0.125).exp(), 1e-14);
        assert_close(ln.size_biased().mean_log(), -1.25, 1e-14);
        let scaled = ln.scaled_to_mean(0.25);
        assert_close(scaled.mean(), 0.25, 1e-14);
    }

    #[test]
    fn table_law_model() {
        let rows_up = vec![
            (OffspringPattern::parse("++").unwrap(), 0.5),
            (OffspringPattern::parse("+-++").unwrap(), 0.5),
        ];
        let rows_down = vec![
            (OffspringPattern::parse("--").unwrap(), 0.5),
            (OffspringPattern::parse("-+--").unwrap(), 0.5),
        ];
        let model = ModelSpec::new(
            OrientationLaw {
                up: PatternDist::Table { rows: rows_up },
                down: PatternDist::Table { rows: rows_down },
            },
            WeightLaw::PerPatternTable {
                up: vec![vec![0.5, 0.5], vec![0.25, 0.25, 0.25, 0.25]],
                down: vec![vec![0.5, 0.5], vec![0.25, 0.25, 0.25, 0.25]],
            },
            true,
            None,
        )
        .unwrap();
        assert_close(model.mu(), 3.0, 1e-12);
        // Mass-conserving rows: mu(1) = 1 before and after normalization.
        let m1 = model.m_theta(1.0).unwrap();
        assert_close(m1.eigenvalue, 1.0, 1e-12);
        let report = model.check_assumptions();
        assert_eq!(report.a1.status, CheckStatus::Pass);

        // Misaligned weight rows are rejected.
        let bad = ModelSpec::new(
            OrientationLaw {
                up: PatternDist::Table {
                    rows: vec![(OffspringPattern::parse("++").unwrap(), 1.0)],
                },
                down: PatternDist::Table {
                    rows: vec![(OffspringPattern::parse("--").unwrap(), 1.0)],
                },
            },
            WeightLaw::PerPatternTable {
                up: vec![vec![0.5]],
                down: vec![vec![0.5, 0.5]],
            },
            false,
            None,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn builtin_unknown_name() {
        assert!(matches!(
            builtin_model("nope", &BuiltinParams::default()),
            Err(ModelError::UnknownModel(_))
        ));
    }

    #[test]
    fn perron2_triangular() {
        let m = Mat2([[2.0, 0.0], [0.5, 3.0]]);
        let p = perron2(&m);
        assert_close(p.value, 3.0, 1e-14);
        let mv = m.mul_right(p.right);
        let um = m.mul_left(p.left);
        for i in 0..2 {
            assert_close(mv[i], 3.0 * p.right[i], 1e-12);
            assert_close(um[i], 3.0 * p.left[i], 1e-12);
        }
    }
}
