//! Algebraic properties of fusion and uncertainty over random assignments.

use evifuse::fusion::fuse_masses;
use evifuse::uncertainty::{entropy_scaled, EntropyMode};
use evifuse::{fused_uncertainty, ipaf_fuse, BeliefAssignment, FusionConfig};
use proptest::prelude::*;

/// Random normalized assignment with `n` classes.
fn assignment(n: usize) -> impl Strategy<Value = BeliefAssignment> {
    prop::collection::vec(0.0f64..1.0, n + 1).prop_filter_map("zero total", |raw| {
        let total: f64 = raw.iter().sum();
        (total > 1e-9).then(|| {
            let m: Vec<f64> = raw.iter().map(|v| v / total).collect();
            BeliefAssignment::from_masses(m[..raw.len() - 1].to_vec(), m[raw.len() - 1]).unwrap()
        })
    })
}

fn pair() -> impl Strategy<Value = (BeliefAssignment, BeliefAssignment)> {
    prop::sample::select(vec![2usize, 3, 5]).prop_flat_map(|n| (assignment(n), assignment(n)))
}

fn raw_fuse(a: &BeliefAssignment, b: &BeliefAssignment) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; a.num_classes()];
    let u = fuse_masses(
        a.singleton(),
        a.composite(),
        b.singleton(),
        b.composite(),
        &mut out,
    );
    (out, u)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn commutative((a, b) in pair()) {
        let ab = ipaf_fuse(&a, &b, &FusionConfig::raw()).unwrap();
        let ba = ipaf_fuse(&b, &a, &FusionConfig::raw()).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn raw_total_at_most_one_and_composite_shrinks((a, b) in pair()) {
        let (s, u) = raw_fuse(&a, &b);
        prop_assert!(s.iter().sum::<f64>() + u <= 1.0 + 1e-12);
        prop_assert!(u <= a.composite().min(b.composite()) + 1e-15);
    }

    #[test]
    fn renormalized_output_sums_to_one((a, b) in pair()) {
        let f = ipaf_fuse(&a, &b, &FusionConfig::default()).unwrap();
        prop_assert!((f.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_fixed_point(n in prop::sample::select(vec![2usize, 3, 5]), k in 0usize..5) {
        let k = k % n;
        let e = BeliefAssignment::one_hot(n, k);
        let f = ipaf_fuse(&e, &e, &FusionConfig::default()).unwrap();
        prop_assert_eq!(f, e);
    }

    #[test]
    fn vacuous_partner_scales_singletons(a in prop::sample::select(vec![2usize, 3, 5]).prop_flat_map(assignment)) {
        let n = a.num_classes();
        let (s, u) = raw_fuse(&a, &BeliefAssignment::vacuous(n));
        for (got, m) in s.iter().zip(a.singleton()) {
            prop_assert!((got - m / n as f64).abs() < 1e-15);
        }
        prop_assert!((u - a.composite()).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_bounds(a in prop::sample::select(vec![2usize, 3, 5]).prop_flat_map(assignment)) {
        let u = fused_uncertainty(&a).unwrap();
        let cap = a.composite() * (a.num_classes() as f64).log2();
        prop_assert!(u >= 0.0);
        prop_assert!(u <= cap + 1e-12);
        let raw = entropy_scaled(a.singleton(), a.composite(), EntropyMode::Raw);
        prop_assert!(raw >= 0.0);
    }
}

#[test]
fn uniform_singletons_hit_the_bound() {
    for n in [2usize, 3, 5] {
        let s = 0.6 / n as f64;
        let a = BeliefAssignment::new(vec![s; n], 0.4).unwrap();
        let u = fused_uncertainty(&a).unwrap();
        assert!((u - 0.4 * (n as f64).log2()).abs() < 1e-12);
    }
}
