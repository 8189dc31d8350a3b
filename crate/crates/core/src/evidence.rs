//! Dirichlet evidence and basic probability assignments.
//!
//! Each voxel carries `N` singleton masses plus one composite mass that sits
//! on the whole frame of classes. The composite mass is the uncertainty.

use crate::error::{Error, Result};
use crate::tensor_io::VoxelGrid;

/// Absolute tolerance on total mass for an assignment to count as normalized.
pub const MASS_TOLERANCE: f64 = 1e-5;

/// Smallest total mass that [`renormalize`] will divide by.
pub const MIN_TOTAL_MASS: f64 = 1e-12;

/// Masses over `N` singleton classes and the composite set.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefAssignment {
    singleton: Vec<f64>,
    composite: f64,
    normalized: bool,
}

impl BeliefAssignment {
    /// Validates masses and flags the assignment normalized when the total
    /// is within [`MASS_TOLERANCE`] of one. Totals above that are rejected.
    pub fn from_masses(singleton: Vec<f64>, composite: f64) -> Result<Self> {
        if singleton.len() < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 classes, got {}",
                singleton.len()
            )));
        }
        if singleton
            .iter()
            .chain(std::iter::once(&composite))
            .any(|m| !m.is_finite() || *m < 0.0)
        {
            return Err(Error::Contract(format!(
                "masses must be finite and non-negative: {singleton:?} | {composite}"
            )));
        }
        let total = singleton.iter().sum::<f64>() + composite;
        if total > 1.0 + MASS_TOLERANCE {
            return Err(Error::Contract(format!("total mass {total} exceeds 1")));
        }
        Ok(Self {
            singleton,
            composite,
            normalized: (total - 1.0).abs() <= MASS_TOLERANCE,
        })
    }

    /// Like [`from_masses`](Self::from_masses) but requires a normalized total.
    pub fn new(singleton: Vec<f64>, composite: f64) -> Result<Self> {
        let b = Self::from_masses(singleton, composite)?;
        b.require_normalized()?;
        Ok(b)
    }

    /// All mass on the composite set.
    pub fn vacuous(num_classes: usize) -> Self {
        Self {
            singleton: vec![0.0; num_classes],
            composite: 1.0,
            normalized: true,
        }
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut singleton = vec![0.0; num_classes];
        singleton[class] = 1.0;
        Self {
            singleton,
            composite: 0.0,
            normalized: true,
        }
    }

    pub(crate) fn raw(singleton: Vec<f64>, composite: f64) -> Self {
        let total = singleton.iter().sum::<f64>() + composite;
        Self {
            singleton,
            composite,
            normalized: (total - 1.0).abs() <= MASS_TOLERANCE,
        }
    }

    pub fn singleton(&self) -> &[f64] {
        &self.singleton
    }

    pub fn composite(&self) -> f64 {
        self.composite
    }

    pub fn num_classes(&self) -> usize {
        self.singleton.len()
    }

    pub fn total(&self) -> f64 {
        self.singleton.iter().sum::<f64>() + self.composite
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "assignment is not normalized (total mass {})",
                self.total()
            )))
        }
    }
}

/// Per-voxel assignments stored as a (W, H, L, N+1) grid; the last channel
/// holds the composite mass.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefVolume {
    grid: VoxelGrid,
}

impl BeliefVolume {
    /// Wraps a (W, H, L, N+1) grid after checking every voxel is a valid
    /// (possibly unnormalized) assignment.
    pub fn from_grid(grid: VoxelGrid) -> Result<Self> {
        if grid.shape().len() != 4 || grid.channels() < 3 {
            return Err(Error::Shape(format!(
                "belief volumes are (W, H, L, N+1) with N >= 2, got {:?}",
                grid.shape()
            )));
        }
        let volume = Self { grid };
        for i in 0..volume.voxel_count() {
            volume.voxel(i).map_err(|e| match e {
                Error::Contract(msg) => Error::Contract(format!("voxel {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(volume)
    }

    pub fn from_assignments(dims: [usize; 3], voxels: &[BeliefAssignment]) -> Result<Self> {
        let n = voxels
            .first()
            .map(BeliefAssignment::num_classes)
            .ok_or_else(|| Error::Shape("no voxels".into()))?;
        let mut data = Vec::with_capacity(voxels.len() * (n + 1));
        for b in voxels {
            if b.num_classes() != n {
                return Err(Error::Shape(format!(
                    "mixed class counts {} and {n}",
                    b.num_classes()
                )));
            }
            data.extend(b.singleton.iter().map(|&m| m as f32));
            data.push(b.composite as f32);
        }
        let grid = VoxelGrid::new(&[dims[0], dims[1], dims[2], n + 1], data)?;
        Ok(Self { grid })
    }

    pub(crate) fn from_grid_unchecked(grid: VoxelGrid) -> Self {
        Self { grid }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.grid.channels() - 1
    }

    pub fn voxel_count(&self) -> usize {
        self.grid.voxel_count()
    }

    pub fn voxel(&self, index: usize) -> Result<BeliefAssignment> {
        let masses = self.grid.voxel(index);
        let (composite, singleton) = masses.split_last().expect("at least 3 channels");
        BeliefAssignment::from_masses(
            singleton.iter().map(|&m| m as f64).collect(),
            *composite as f64,
        )
    }

    pub fn assignments(&self) -> Result<Vec<BeliefAssignment>> {
        (0..self.voxel_count()).map(|i| self.voxel(i)).collect()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Belief assignment of one voxel from its `N` evidence logits.
pub fn logits_to_belief(logits: &[f64]) -> Result<BeliefAssignment> {
    if logits.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {}",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit {bad}")));
    }
    let n = logits.len() as f64;
    let evidence: Vec<f64> = logits.iter().map(|&x| softplus(x)).collect();
    let strength = n + evidence.iter().sum::<f64>();
    Ok(BeliefAssignment {
        singleton: evidence.iter().map(|e| e / strength).collect(),
        composite: n / strength,
        normalized: true,
    })
}

/// Converts a (W, H, L, N) logit grid into a normalized belief volume.
pub fn evidence_to_belief(logits: &VoxelGrid) -> Result<BeliefVolume> {
    if logits.shape().len() != 4 || logits.channels() < 2 {
        return Err(Error::Shape(format!(
            "logits must be (W, H, L, N) with N >= 2, got {:?}",
            logits.shape()
        )));
    }
    let n = logits.channels();
    let mut data = Vec::with_capacity(logits.voxel_count() * (n + 1));
    let mut buf = vec![0.0f64; n];
    for i in 0..logits.voxel_count() {
        for (dst, &src) in buf.iter_mut().zip(logits.voxel(i)) {
            *dst = src as f64;
        }
        let b = logits_to_belief(&buf)?;
        data.extend(b.singleton.iter().map(|&m| m as f32));
        data.push(b.composite as f32);
    }
    let [w, h, l] = logits.dims();
    Ok(BeliefVolume::from_grid_unchecked(VoxelGrid::new(
        &[w, h, l, n + 1],
        data,
    )?))
}

/// Pignistic probabilities: the composite mass is split evenly over classes.
pub fn belief_to_probability(b: &BeliefAssignment) -> Result<Vec<f64>> {
    b.require_normalized()?;
    let share = b.composite / b.num_classes() as f64;
    Ok(b.singleton.iter().map(|m| m + share).collect())
}

/// Divides every mass by the total so the result sums to one.
pub fn renormalize(b: &BeliefAssignment) -> Result<BeliefAssignment> {
    let total = b.total();
    if total <= MIN_TOTAL_MASS {
        return Err(Error::TotalConflict(total));
    }
    Ok(BeliefAssignment {
        singleton: b.singleton.iter().map(|m| m / total).collect(),
        composite: b.composite / total,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn inverse_softplus(y: f64) -> f64 {
        y.exp_m1().ln()
    }

    #[test]
    fn large_negative_logits_give_vacuous_mass() {
        let b = logits_to_belief(&[-50.0, -50.0, -50.0]).unwrap();
        assert!(b.singleton().iter().all(|&m| m < 1e-20));
        assert_abs_diff_eq!(b.composite(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_class_evidence() {
        let x = inverse_softplus(2.0);
        let b = logits_to_belief(&[x, x]).unwrap();
        assert_abs_diff_eq!(b.singleton()[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.singleton()[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.composite(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn three_class_evidence_hand_values() {
        // e = (6, 0, 0): S = 9. A logit of -50 gives evidence ~2e-22.
        let b = logits_to_belief(&[inverse_softplus(6.0), -50.0, -50.0]).unwrap();
        assert_abs_diff_eq!(b.singleton()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.singleton()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.composite(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_logits_are_domain_errors() {
        assert!(matches!(
            logits_to_belief(&[f64::NAN, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grid_conversion_matches_scalar_path() {
        let logits = VoxelGrid::new(&[1, 1, 2, 2], vec![0.5, -1.0, 3.0, 2.0]).unwrap();
        let volume = evidence_to_belief(&logits).unwrap();
        assert_eq!(volume.num_classes(), 2);
        let expected = logits_to_belief(&[3.0, 2.0]).unwrap();
        let got = volume.voxel(1).unwrap();
        for (a, b) in got.singleton().iter().zip(expected.singleton()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn pignistic_probabilities() {
        let p = belief_to_probability(&BeliefAssignment::vacuous(4)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = belief_to_probability(&BeliefAssignment::one_hot(3, 1)).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);

        let b = BeliefAssignment::new(vec![0.5, 0.1], 0.4).unwrap();
        let p = belief_to_probability(&b).unwrap();
        assert_abs_diff_eq!(p[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn pignistic_rejects_unnormalized() {
        let b = BeliefAssignment::from_masses(vec![0.16, 0.26], 0.16).unwrap();
        assert!(!b.is_normalized());
        assert!(matches!(belief_to_probability(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn renormalize_cases() {
        let b = BeliefAssignment::new(vec![0.2, 0.3], 0.5).unwrap();
        assert_eq!(renormalize(&b).unwrap(), b);

        let raw = BeliefAssignment::from_masses(vec![0.16, 0.26], 0.16).unwrap();
        let r = renormalize(&raw).unwrap();
        assert!(r.is_normalized());
        assert_abs_diff_eq!(r.singleton()[0], 0.2759, epsilon = 1e-4);
        assert_abs_diff_eq!(r.singleton()[1], 0.4483, epsilon = 1e-4);
        assert_abs_diff_eq!(r.composite(), 0.2759, epsilon = 1e-4);

        let zero = BeliefAssignment::from_masses(vec![0.0, 0.0], 0.0).unwrap();
        assert!(matches!(renormalize(&zero), Err(Error::TotalConflict(_))));
    }

    #[test]
    fn constructor_validation() {
        assert!(BeliefAssignment::from_masses(vec![0.5], 0.5).is_err());
        assert!(BeliefAssignment::from_masses(vec![-0.1, 0.6], 0.5).is_err());
        assert!(BeliefAssignment::from_masses(vec![0.6, 0.6], 0.5).is_err());
        assert!(BeliefAssignment::new(vec![0.1, 0.1], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn masses_sum_to_one(logits in prop::collection::vec(-10.0f64..10.0, 2..16)) {
            let b = logits_to_belief(&logits).unwrap();
            prop_assert!((b.total() - 1.0).abs() <= MASS_TOLERANCE);
            prop_assert!(b.singleton().iter().all(|&m| m >= 0.0));
        }

        #[test]
        fn composite_decreases_with_evidence(
            low in prop::collection::vec(0.0f64..20.0, 3),
            bump in prop::collection::vec(0.0f64..20.0, 3),
        ) {
            prop_assume!(bump.iter().sum::<f64>() > 1e-6);
            let high: Vec<f64> = low.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let to_logits = |e: &[f64]| -> Vec<f64> {
                e.iter().map(|&v| if v < 1e-12 { -40.0 } else { inverse_softplus(v) }).collect()
            };
            let u_low = logits_to_belief(&to_logits(&low)).unwrap().composite();
            let u_high = logits_to_belief(&to_logits(&high)).unwrap().composite();
            prop_assert!(u_high < u_low);
        }

        #[test]
        fn pignistic_keeps_argmax_when_gap_exceeds_composite(
            raw in prop::collection::vec(0.01f64..1.0, 2..6),
            u in 0.0f64..0.5,
        ) {
            let sum: f64 = raw.iter().sum();
            let singleton: Vec<f64> = raw.iter().map(|v| v / sum * (1.0 - u)).collect();
            let b = BeliefAssignment::new(singleton.clone(), u).unwrap();
            let mut sorted = singleton.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(u < sorted[0] - sorted[1]);
            let p = belief_to_probability(&b).unwrap();
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(argmax(&p), argmax(&singleton));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
