//! Size-biased spinal laws: tilted family distributions, the orientation
//! chains along the spine, the spinal log-weight drift check, and the
//! samplers behind random-origin simulation.
//!
//! Under the size-biased measure one distinguished offspring per family (the
//! spine) is marked. The tilted family law weights each base family by the
//! v-mass of its offspring times their weights; given the family, the spinal
//! slot is chosen proportionally to the same per-slot weight, and for iid
//! weight laws the spinal slot's weight is drawn from the size-biased
//! marginal while the other slots keep the base law.

use crate::model::{
    AssumptionCheck, CheckStatus, Mat2, ModelError, ModelSpec, OffspringPattern, Orientation,
    PatternDist, SpectralSummary, WeightLaw, REJECTION_CAP,
};
use rand::Rng;

/// One family drawn under the size-biased law, with its spinal slot
/// (1-based) and, for table laws, the pattern-table row.
#[derive(Clone, Debug)]
pub struct SpinalFamily {
    pub pattern: OffspringPattern,
    pub weights: Vec<f64>,
    pub spine_slot: usize,
    pub row: usize,
}

impl SpinalFamily {
    /// Orientation of the spinal offspring.
    pub fn spine_orientation(&self) -> Orientation {
        self.pattern.entry(self.spine_slot)
    }

    /// Weight attached to the spinal offspring.
    pub fn spine_weight(&self) -> f64 {
        self.weights[self.spine_slot - 1]
    }
}

/// The tilted family laws of a model, parameterized by the right Perron
/// eigenvector of M(1).
#[derive(Clone, Debug)]
pub struct TiltedLaws {
    model: ModelSpec,
    v: [f64; 2],
}

/// Builds the tilted laws from a spectral summary.
pub fn tilt(model: &ModelSpec, spectral: &SpectralSummary) -> TiltedLaws {
    tilt_from_v(model, spectral.right_v)
}

pub(crate) fn tilt_from_v(model: &ModelSpec, v: [f64; 2]) -> TiltedLaws {
    assert!(
        v[0] > 0.0 && v[1] > 0.0,
        "right eigenvector must be positive, got {v:?}"
    );
    TiltedLaws {
        model: model.clone(),
        v,
    }
}

impl TiltedLaws {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn v(&self) -> [f64; 2] {
        self.v
    }

    fn v_of(&self, o: Orientation) -> f64 {
        self.v[o.index()]
    }

    /// Tilted probability of `m` excursions for geometric and constant-count
    /// pattern laws; `None` for table laws. For a geometric base law
    /// p(m) = p (1-p)^m the tilt multiplies by (m sigma + 2 v_i) with
    /// sigma = v_up + v_down, since excursion kinds carry equal v-mass.
    pub fn tilted_excursion_pmf(&self, parent: Orientation, m: usize) -> Option<f64> {
        let vi = self.v_of(parent);
        let sigma = self.v[0] + self.v[1];
        match self.model.orientation_law().dist(parent) {
            PatternDist::Geometric { p, .. } => {
                let norm = sigma * (1.0 - p) / p + 2.0 * vi;
                let base = p * (1.0 - p).powi(m as i32);
                Some(base * (m as f64 * sigma + 2.0 * vi) / norm)
            }
            PatternDist::ConstantCount { excursions, .. } => {
                Some(if m == *excursions { 1.0 } else { 0.0 })
            }
            PatternDist::Table { .. } => None,
        }
    }

    /// Per-slot spinal mass of a drawn family: v of the slot orientation,
    /// times the slot weight for per-pattern weight tables.
    fn slot_mass(
        &self,
        parent: Orientation,
        pattern: &OffspringPattern,
        row: usize,
        slot: usize,
    ) -> f64 {
        let v = self.v_of(pattern.entry(slot));
        match self.model.weight_law() {
            WeightLaw::PerPatternTable { .. } => {
                v * self
                    .model
                    .weight_law()
                    .table_rows(parent)
                    .expect("table mode")[row][slot - 1]
            }
            _ => v,
        }
    }

    fn sample_slot<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        pattern: &OffspringPattern,
        row: usize,
        rng: &mut R,
    ) -> usize {
        let z = pattern.size();
        let total: f64 = (1..=z)
            .map(|s| self.slot_mass(parent, pattern, row, s))
            .sum();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for s in 1..=z {
            acc += self.slot_mass(parent, pattern, row, s) / total;
            if u < acc {
                return s;
            }
        }
        z
    }

    /// Draws the tilted pattern (and table row), without weights or slot.
    fn sample_tilted_pattern<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        rng: &mut R,
    ) -> (OffspringPattern, usize) {
        let dist = self.model.orientation_law().dist(parent);
        match dist {
            PatternDist::Geometric { p, q_updown } => {
                let vi = self.v_of(parent);
                let sigma = self.v[0] + self.v[1];
                let norm = sigma * (1.0 - p) / p + 2.0 * vi;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut m = 0usize;
                loop {
                    let pm = p * (1.0 - p).powi(m as i32) * (m as f64 * sigma + 2.0 * vi) / norm;
                    acc += pm;
                    if u < acc || m > 100_000_000 {
                        break;
                    }
                    m += 1;
                }
                let kinds = (0..m)
                    .map(|_| {
                        if rng.random::<f64>() < *q_updown {
                            crate::model::Excursion::UpDown
                        } else {
                            crate::model::Excursion::DownUp
                        }
                    })
                    .collect();
                (OffspringPattern::new(kinds, parent), 0)
            }
            // Fixed count: the tilt factor is constant over the support, so
            // the tilted pattern law equals the base law.
            PatternDist::ConstantCount { .. } => dist.sample(parent, rng),
            PatternDist::Table { rows } => {
                // Row tilt: p_row * sum_j slot_mass(row, j). For iid weight
                // laws the weight expectation is slot-independent and
                // cancels.
                let masses: Vec<f64> = rows
                    .iter()
                    .enumerate()
                    .map(|(idx, (pattern, prob))| {
                        let s: f64 = (1..=pattern.size())
                            .map(|slot| self.slot_mass(parent, pattern, idx, slot))
                            .sum();
                        prob * s
                    })
                    .collect();
                let total: f64 = masses.iter().sum();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (idx, mass) in masses.iter().enumerate() {
                    acc += mass / total;
                    if u < acc {
                        return (rows[idx].0.clone(), idx);
                    }
                }
                let last = rows.len() - 1;
                (rows[last].0.clone(), last)
            }
        }
    }

    /// Draws one family under the size-biased law: tilted pattern, spinal
    /// slot proportional to per-slot mass, then weights in slot order with
    /// the spinal slot drawn from the size-biased marginal.
    pub fn sample_spinal_family<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        rng: &mut R,
    ) -> SpinalFamily {
        let (pattern, row) = self.sample_tilted_pattern(parent, rng);
        let spine_slot = self.sample_slot(parent, &pattern, row, rng);
        let weights = self.sample_weights(parent, &pattern, row, spine_slot, rng);
        SpinalFamily {
            pattern,
            weights,
            spine_slot,
            row,
        }
    }

    fn sample_weights<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        pattern: &OffspringPattern,
        row: usize,
        spine_slot: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        match self.model.weight_law() {
            WeightLaw::PerPatternTable { .. } => self
                .model
                .weight_law()
                .table_rows(parent)
                .expect("table mode")[row]
                .clone(),
            _ => {
                let base = self
                    .model
                    .weight_law()
                    .iid_family(parent)
                    .expect("iid mode");
                let spinal = base.size_biased();
                (1..=pattern.size())
                    .map(|s| {
                        if s == spine_slot {
                            spinal.sample(rng)
                        } else {
                            base.sample(rng)
                        }
                    })
                    .collect()
            }
        }
    }

    /// Draws a spinal family conditioned on the spinal offspring having
    /// orientation `spine_orientation`, by rejection on (pattern, slot).
    pub fn sample_spinal_family_conditioned<R: Rng + ?Sized>(
        &self,
        parent: Orientation,
        spine_orientation: Orientation,
        rng: &mut R,
    ) -> Result<SpinalFamily, ModelError> {
        for _ in 0..REJECTION_CAP {
            let (pattern, row) = self.sample_tilted_pattern(parent, rng);
            let spine_slot = self.sample_slot(parent, &pattern, row, rng);
            if pattern.entry(spine_slot) == spine_orientation {
                let weights = self.sample_weights(parent, &pattern, row, spine_slot, rng);
                return Ok(SpinalFamily {
                    pattern,
                    weights,
                    spine_slot,
                    row,
                });
            }
        }
        Err(ModelError::RejectionCapExceeded {
            attempts: REJECTION_CAP,
        })
    }

    /// E(log spinal weight | parent orientation), in closed form.
    pub fn spinal_mean_log_weight(&self, parent: Orientation) -> f64 {
        match self.model.weight_law() {
            WeightLaw::PerPatternTable { .. } => {
                let patterns = self
                    .model
                    .orientation_law()
                    .dist(parent)
                    .table_rows()
                    .expect("validated: table weights imply table patterns");
                let rows = self
                    .model
                    .weight_law()
                    .table_rows(parent)
                    .expect("table mode");
                let mut num = 0.0;
                let mut den = 0.0;
                for (idx, ((pattern, prob), row)) in patterns.iter().zip(rows).enumerate() {
                    for slot in 1..=pattern.size() {
                        let mass = prob * self.slot_mass(parent, pattern, idx, slot);
                        num += mass * row[slot - 1].ln();
                        den += mass;
                    }
                }
                num / den
            }
            _ => self
                .model
                .weight_law()
                .iid_family(parent)
                .expect("iid mode")
                .size_biased()
                .mean_log(),
        }
    }
}

/// Orientation transition chains along the spine of the size-biased tree,
/// derived from M(1) and its Perron eigenvectors.
#[derive(Clone, Debug)]
pub struct SpineChains {
    /// Parent-to-child: down[i][j] = m1[i][j] v[j] / v[i].
    pub down: Mat2,
    /// Child-to-parent (reversed): up[i][j] = m1[j][i] u[j] / u[i].
    pub up: Mat2,
    /// Stationary law (u_up v_up, u_down v_down); sums to 1.
    pub stationary: [f64; 2],
}

impl SpineChains {
    pub fn sample_down<R: Rng + ?Sized>(&self, parent: Orientation, rng: &mut R) -> Orientation {
        sample_row(&self.down, parent, rng)
    }

    pub fn sample_up<R: Rng + ?Sized>(&self, child: Orientation, rng: &mut R) -> Orientation {
        sample_row(&self.up, child, rng)
    }

    pub fn sample_stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> Orientation {
        if rng.random::<f64>() < self.stationary[0] {
            Orientation::Up
        } else {
            Orientation::Down
        }
    }

    /// Largest deviation from row-stochasticity and stationarity; zero up to
    /// rounding when mu(1) = 1.
    pub fn max_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for m in [&self.down, &self.up] {
            for i in 0..2 {
                r = r.max((m.0[i][0] + m.0[i][1] - 1.0).abs());
            }
        }
        let pi_down = self.down.mul_left(self.stationary);
        for (mapped, pi) in pi_down.iter().zip(self.stationary) {
            r = r.max((mapped - pi).abs());
        }
        r.max((self.stationary[0] + self.stationary[1] - 1.0).abs())
    }
}

fn sample_row<R: Rng + ?Sized>(m: &Mat2, from: Orientation, rng: &mut R) -> Orientation {
    let p_up = m.0[from.index()][0];
    if rng.random::<f64>() < p_up {
        Orientation::Up
    } else {
        Orientation::Down
    }
}

/// Builds the spine chains of a model from M(1).
pub fn spine_chains(model: &ModelSpec) -> Result<SpineChains, ModelError> {
    let m1 = model.m_theta(1.0)?;
    let (u, v) = (m1.left, m1.right);
    if !(v[0] > 0.0 && v[1] > 0.0 && u[0] > 0.0 && u[1] > 0.0) {
        return Err(ModelError::InvalidLaw(format!(
            "Perron eigenvectors must be positive for spine chains, got u = {u:?}, v = {v:?}"
        )));
    }
    let mm = m1.matrix.0;
    let down = Mat2([
        [mm[0][0] * v[0] / v[0], mm[0][1] * v[1] / v[0]],
        [mm[1][0] * v[0] / v[1], mm[1][1] * v[1] / v[1]],
    ]);
    let up = Mat2([
        [mm[0][0] * u[0] / u[0], mm[1][0] * u[1] / u[0]],
        [mm[0][1] * u[0] / u[1], mm[1][1] * u[1] / u[1]],
    ]);
    let stationary = [u[0] * v[0], u[1] * v[1]];
    Ok(SpineChains {
        down,
        up,
        stationary,
    })
}

/// Spinal log-weight drift: sum_i stationary_i E(log spinal weight | i) must
/// be negative for the size-biased walk to refine.
pub fn check_assumption4(
    _model: &ModelSpec,
    tilted: &TiltedLaws,
    chains: &SpineChains,
) -> AssumptionCheck {
    let log_up = tilted.spinal_mean_log_weight(Orientation::Up);
    let log_down = tilted.spinal_mean_log_weight(Orientation::Down);
    let drift = chains.stationary[0] * log_up + chains.stationary[1] * log_down;
    AssumptionCheck {
        status: if drift < 0.0 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        quantities: vec![
            ("stationary_up".into(), chains.stationary[0]),
            ("stationary_down".into(), chains.stationary[1]),
            ("spinal_mean_log_up".into(), log_up),
            ("spinal_mean_log_down".into(), log_down),
            ("spinal_drift".into(), drift),
        ],
        tolerance: 0.0,
        note: "requires stationary-weighted mean log spinal weight < 0".into(),
    }
}

/// Convenience wrapper building the spectral inputs itself; construction
/// failures surface as unverifiable.
pub(crate) fn check_assumption4_auto(model: &ModelSpec) -> AssumptionCheck {
    let unverifiable = |note: String| AssumptionCheck {
        status: CheckStatus::Unverifiable,
        quantities: Vec::new(),
        tolerance: 0.0,
        note,
    };
    let m1 = match model.m_theta(1.0) {
        Ok(m) => m,
        Err(e) => return unverifiable(format!("M(1) not computable: {e}")),
    };
    if !(m1.right[0] > 0.0 && m1.right[1] > 0.0) {
        return unverifiable(format!("right eigenvector not positive: {:?}", m1.right));
    }
    let chains = match spine_chains(model) {
        Ok(c) => c,
        Err(e) => return unverifiable(format!("spine chains not computable: {e}")),
    };
    let tilted = tilt_from_v(model, m1.right);
    check_assumption4(model, &tilted, &chains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        builtin_model, BuiltinParams, OrientationLaw, PatternDist, WeightLaw, BUILTIN_MODELS,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tilted_for(name: &str) -> (crate::model::ModelSpec, TiltedLaws, SpineChains) {
        let model = builtin_model(name, &BuiltinParams::default()).unwrap();
        let spectral = model.spectral_summary().unwrap();
        let tilted = tilt(&model, &spectral);
        let chains = spine_chains(&model).unwrap();
        (model, tilted, chains)
    }

    #[test]
    fn tilted_geometric_pmf_frozen() {
        let (_, tilted, _) = tilted_for("brownian");
        // v = (1,1): tilted pmf proportional to family size times base pmf.
        let expect = [0.25, 0.25, 0.1875, 0.125];
        let mut total = 0.0;
        for (m, e) in expect.iter().enumerate() {
            let p = tilted.tilted_excursion_pmf(Orientation::Up, m).unwrap();
            assert!((p - e).abs() < 1e-14, "m = {m}: {p} vs {e}");
            total += p;
        }
        let tail: f64 = (4..200)
            .map(|m| tilted.tilted_excursion_pmf(Orientation::Up, m).unwrap())
            .sum();
        assert!((total + tail - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tilted_sampling_matches_pmf() {
        let (_, tilted, _) = tilted_for("brownian");
        let mut r = rng(5);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let fam = tilted.sample_spinal_family(Orientation::Up, &mut r);
            let m = fam.pattern.excursion_count();
            if m < counts.len() {
                counts[m] += 1;
            }
        }
        for (m, c) in counts.iter().enumerate() {
            let p = tilted.tilted_excursion_pmf(Orientation::Up, m).unwrap();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 4.0 * se, "m = {m}: {freq} vs {p}");
        }
    }

    #[test]
    fn tilted_table_rows() {
        // P(Z = 2) = P(Z = 4) = 1/2 tilts to (1/3, 2/3) under flat v.
        let model = crate::model::ModelSpec::new(
            OrientationLaw {
                up: PatternDist::Table {
                    rows: vec![
                        (OffspringPattern::parse("++").unwrap(), 0.5),
                        (OffspringPattern::parse("+-++").unwrap(), 0.5),
                    ],
                },
                down: PatternDist::Table {
                    rows: vec![
                        (OffspringPattern::parse("--").unwrap(), 0.5),
                        (OffspringPattern::parse("-+--").unwrap(), 0.5),
                    ],
                },
            },
            WeightLaw::ConstantReciprocalMu { value: 0.0 },
            true,
            // Both Up rows open upward and both Down rows open downward, so
            // the first-crossing chain is degenerate and needs an override.
            Some(0.5),
        )
        .unwrap();
        let spectral = model.spectral_summary().unwrap();
        assert!((spectral.right_v[0] - 1.0).abs() < 1e-12);
        let tilted = tilt(&model, &spectral);
        let mut r = rng(9);
        let n = 100_000;
        let mut big = 0usize;
        for _ in 0..n {
            let fam = tilted.sample_spinal_family(Orientation::Up, &mut r);
            if fam.pattern.size() == 4 {
                big += 1;
            }
        }
        let p = 2.0 / 3.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((big as f64 / n as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn spinal_child_marginal_is_down_chain() {
        let (_, tilted, chains) = tilted_for("asymmetric");
        let mut r = rng(13);
        let n = 100_000;
        let mut up = 0usize;
        for _ in 0..n {
            let fam = tilted.sample_spinal_family(Orientation::Up, &mut r);
            if fam.spine_orientation() == Orientation::Up {
                up += 1;
            }
        }
        let p = chains.down.0[0][0];
        assert!((p - 0.875).abs() < 1e-12);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((up as f64 / n as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn spinal_weight_is_size_biased() {
        let (_, tilted, _) = tilted_for("brownian-gamma");
        let mut r = rng(17);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += tilted
                .sample_spinal_family(Orientation::Up, &mut r)
                .spine_weight();
        }
        // Size-biased gamma(3, 1/12) is gamma(4, 1/12) with mean 1/3.
        let mean = sum / n as f64;
        let se = (4.0 / 144.0f64 / n as f64).sqrt();
        assert!((mean - 1.0 / 3.0).abs() < 4.0 * se, "spinal mean {mean}");
    }

    #[test]
    fn conditioned_spinal_orientation() {
        let (_, tilted, _) = tilted_for("brownian-gamma");
        let mut r = rng(21);
        for parent in Orientation::BOTH {
            for want in Orientation::BOTH {
                let fam = tilted
                    .sample_spinal_family_conditioned(parent, want, &mut r)
                    .unwrap();
                assert_eq!(fam.spine_orientation(), want);
                assert_eq!(fam.pattern.direct(), parent);
            }
        }
    }

    #[test]
    fn chains_stochastic_stationary_reversible() {
        for name in BUILTIN_MODELS {
            let model = builtin_model(name, &BuiltinParams::default()).unwrap();
            let chains = spine_chains(&model).unwrap();
            assert!(
                chains.max_residual() < 1e-9,
                "{name}: residual {}",
                chains.max_residual()
            );
            // Two-state chains are reversible: pi_i down[i][j] = pi_j up[j][i].
            for i in 0..2 {
                for j in 0..2 {
                    let lhs = chains.stationary[i] * chains.down.0[i][j];
                    let rhs = chains.stationary[j] * chains.up.0[j][i];
                    assert!((lhs - rhs).abs() < 1e-12, "{name}: ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn assumption4_frozen_values() {
        let (model, tilted, chains) = tilted_for("brownian");
        let check = check_assumption4(&model, &tilted, &chains);
        assert_eq!(check.status, CheckStatus::Pass);
        let drift = check
            .quantities
            .iter()
            .find(|(k, _)| k == "spinal_drift")
            .unwrap()
            .1;
        assert!((drift - 0.25f64.ln()).abs() < 1e-12);

        let (model, tilted, chains) = tilted_for("brownian-gamma");
        let check = check_assumption4(&model, &tilted, &chains);
        assert_eq!(check.status, CheckStatus::Pass);
        let drift = check
            .quantities
            .iter()
            .find(|(k, _)| k == "spinal_drift")
            .unwrap()
            .1;
        assert!((drift + 1.228_788_981_356_199_8).abs() < 1e-12);

        let (model, tilted, chains) = tilted_for("binary-cascade");
        let check = check_assumption4(&model, &tilted, &chains);
        assert_eq!(check.status, CheckStatus::Pass);
        let drift = check
            .quantities
            .iter()
            .find(|(k, _)| k == "spinal_drift")
            .unwrap()
            .1;
        assert!((drift + 0.535_641_800_796_254_5).abs() < 1e-12);
    }
}
