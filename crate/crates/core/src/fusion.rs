//! Two-source fusion of probability assignments.
//!
//! For classes `n = 0..N` with singleton masses `a_n`, `b_n` and composite
//! masses `a_u`, `b_u`:
//!
//! ```text
//! fused_n = a_n * b_n + (1/N) * (a_n * b_u + b_n * a_u)
//! fused_u = a_u * b_u
//! ```
//!
//! The `1/N` factor is the cardinality ratio of a singleton to the full frame.
//! Unlike Dempster's rule the raw result is not divided by `1 - conflict`, so
//! its total can fall below one. [`FusionConfig::renormalize_output`] decides
//! whether the caller gets the raw masses or a renormalized distribution.

use crate::error::{Error, Result};
use crate::evidence::{renormalize, BeliefAssignment, BeliefVolume};
use crate::tensor_io::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub renormalize_output: bool,
    pub conflict_epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            renormalize_output: true,
            conflict_epsilon: 1e-12,
        }
    }
}

impl FusionConfig {
    pub fn new(renormalize_output: bool, conflict_epsilon: f64) -> Result<Self> {
        if conflict_epsilon.is_nan() || conflict_epsilon <= 0.0 {
            return Err(Error::Contract(format!(
                "conflict_epsilon must be positive, got {conflict_epsilon}"
            )));
        }
        Ok(Self {
            renormalize_output,
            conflict_epsilon,
        })
    }

    pub fn raw() -> Self {
        Self {
            renormalize_output: false,
            ..Self::default()
        }
    }
}

/// Raw fusion kernel on plain mass slices. Writes `N` singleton masses into
/// `out` and returns the fused composite mass.
#[inline]
pub fn fuse_masses(a: &[f64], a_u: f64, b: &[f64], b_u: f64, out: &mut [f64]) -> f64 {
    let inv_n = 1.0 / a.len() as f64;
    for ((o, &an), &bn) in out.iter_mut().zip(a).zip(b) {
        *o = an * bn + inv_n * (an * b_u + bn * a_u);
    }
    a_u * b_u
}

pub fn ipaf_fuse(
    a: &BeliefAssignment,
    b: &BeliefAssignment,
    cfg: &FusionConfig,
) -> Result<BeliefAssignment> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Shape(format!(
            "cannot fuse {} classes with {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    a.require_normalized()?;
    b.require_normalized()?;

    let mut singleton = vec![0.0; a.num_classes()];
    let composite = fuse_masses(
        a.singleton(),
        a.composite(),
        b.singleton(),
        b.composite(),
        &mut singleton,
    );
    let fused = BeliefAssignment::raw(singleton, composite);
    if !cfg.renormalize_output {
        return Ok(fused);
    }
    let total = fused.total();
    if total <= cfg.conflict_epsilon {
        return Err(Error::TotalConflict(total));
    }
    renormalize(&fused)
}

/// Voxel-wise fusion of an original-sample volume with its restored-mixed
/// counterpart.
pub fn fuse_volumes(
    orig: &BeliefVolume,
    restored: &BeliefVolume,
    cfg: &FusionConfig,
) -> Result<BeliefVolume> {
    if orig.grid().shape() != restored.grid().shape() {
        return Err(Error::Shape(format!(
            "belief volumes differ: {:?} vs {:?}",
            orig.grid().shape(),
            restored.grid().shape()
        )));
    }
    let n = orig.num_classes();
    let stride = n + 1;
    let mut data = Vec::with_capacity(orig.grid().data().len());
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut out = vec![0.0; n];
    for i in 0..orig.voxel_count() {
        let av = orig.grid().voxel(i);
        let bv = restored.grid().voxel(i);
        for k in 0..n {
            a[k] = av[k] as f64;
            b[k] = bv[k] as f64;
        }
        let (a_u, b_u) = (av[n] as f64, bv[n] as f64);
        check_normalized(&a, a_u, i)?;
        check_normalized(&b, b_u, i)?;
        let mut u = fuse_masses(&a, a_u, &b, b_u, &mut out);
        if cfg.renormalize_output {
            let total = out.iter().sum::<f64>() + u;
            if total <= cfg.conflict_epsilon {
                return Err(Error::TotalConflict(total));
            }
            out.iter_mut().for_each(|m| *m /= total);
            u /= total;
        }
        data.extend(out.iter().map(|&m| m as f32));
        data.push(u as f32);
    }
    let [w, h, l] = orig.dims();
    Ok(BeliefVolume::from_grid_unchecked(VoxelGrid::new(
        &[w, h, l, stride],
        data,
    )?))
}

fn check_normalized(singleton: &[f64], composite: f64, voxel: usize) -> Result<()> {
    let total = singleton.iter().sum::<f64>() + composite;
    if (total - 1.0).abs() > crate::evidence::MASS_TOLERANCE {
        return Err(Error::Contract(format!(
            "voxel {voxel} is not normalized (total mass {total})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ba(s: &[f64], u: f64) -> BeliefAssignment {
        BeliefAssignment::new(s.to_vec(), u).unwrap()
    }

    #[test]
    fn certain_agreement_is_fixed_point() {
        let a = BeliefAssignment::one_hot(3, 2);
        let f = ipaf_fuse(&a, &a, &FusionConfig::raw()).unwrap();
        assert_eq!(f.singleton(), &[0.0, 0.0, 1.0]);
        assert_eq!(f.composite(), 0.0);
    }

    #[test]
    fn hand_evaluated_two_class_case() {
        let a = ba(&[0.3, 0.3], 0.4);
        let b = ba(&[0.2, 0.4], 0.4);
        let f = ipaf_fuse(&a, &b, &FusionConfig::raw()).unwrap();
        assert_abs_diff_eq!(f.singleton()[0], 0.16, epsilon = 1e-12);
        assert_abs_diff_eq!(f.singleton()[1], 0.26, epsilon = 1e-12);
        assert_abs_diff_eq!(f.composite(), 0.16, epsilon = 1e-12);
        assert_abs_diff_eq!(f.total(), 0.58, epsilon = 1e-12);
        assert!(!f.is_normalized());

        let r = ipaf_fuse(&a, &b, &FusionConfig::default()).unwrap();
        assert!(r.is_normalized());
        assert_abs_diff_eq!(r.singleton()[1], 0.26 / 0.58, epsilon = 1e-12);
    }

    #[test]
    fn vacuous_partner_scales_singletons() {
        let a = ba(&[0.5, 0.2, 0.1], 0.2);
        let f = ipaf_fuse(&a, &BeliefAssignment::vacuous(3), &FusionConfig::raw()).unwrap();
        for (fv, av) in f.singleton().iter().zip(a.singleton()) {
            assert_abs_diff_eq!(*fv, av / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(f.composite(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn disagreeing_certainties_are_total_conflict() {
        let a = BeliefAssignment::one_hot(2, 0);
        let b = BeliefAssignment::one_hot(2, 1);
        assert!(matches!(
            ipaf_fuse(&a, &b, &FusionConfig::default()),
            Err(Error::TotalConflict(_))
        ));
        let raw = ipaf_fuse(&a, &b, &FusionConfig::raw()).unwrap();
        assert_eq!(raw.total(), 0.0);
    }

    #[test]
    fn mismatched_classes_and_unnormalized_inputs() {
        let a = BeliefAssignment::vacuous(2);
        let b = BeliefAssignment::vacuous(3);
        assert!(matches!(
            ipaf_fuse(&a, &b, &FusionConfig::default()),
            Err(Error::Shape(_))
        ));
        let raw = BeliefAssignment::from_masses(vec![0.1, 0.1], 0.1).unwrap();
        assert!(matches!(
            ipaf_fuse(&raw, &a, &FusionConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_rejects_non_positive_epsilon() {
        assert!(FusionConfig::new(true, 0.0).is_err());
        assert!(FusionConfig::new(true, f64::NAN).is_err());
        assert!(FusionConfig::new(false, 1e-9).is_ok());
    }

    #[test]
    fn volume_fusion_with_vacuous_restored() {
        let orig = BeliefVolume::from_assignments(
            [1, 1, 2],
            &[ba(&[0.6, 0.2], 0.2), ba(&[0.1, 0.3], 0.6)],
        )
        .unwrap();
        let vac = BeliefVolume::from_assignments(
            [1, 1, 2],
            &[BeliefAssignment::vacuous(2), BeliefAssignment::vacuous(2)],
        )
        .unwrap();
        let fused = fuse_volumes(&orig, &vac, &FusionConfig::raw()).unwrap();
        for i in 0..2 {
            let o = orig.voxel(i).unwrap();
            let f = fused.voxel(i).unwrap();
            for k in 0..2 {
                assert_abs_diff_eq!(f.singleton()[k], o.singleton()[k] / 2.0, epsilon = 1e-7);
            }
            assert_abs_diff_eq!(f.composite(), o.composite(), epsilon = 1e-7);
        }
    }

    #[test]
    fn volume_fusion_shape_mismatch() {
        let a = BeliefVolume::from_assignments([1, 1, 1], &[BeliefAssignment::vacuous(2)]).unwrap();
        let b = BeliefVolume::from_assignments([1, 1, 1], &[BeliefAssignment::vacuous(3)]).unwrap();
        assert!(matches!(
            fuse_volumes(&a, &b, &FusionConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
