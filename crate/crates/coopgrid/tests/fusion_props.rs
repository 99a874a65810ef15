//! Randomized properties of mass-function discounting and fusion.

use coopgrid::mass::{Class, ContourFunction, MassFunction, NUM_CHANNELS, OMEGA};
use proptest::prelude::*;

/// Valid mass functions with a mix of dense, sparse, and degenerate shapes.
fn mass_strategy() -> impl Strategy<Value = MassFunction> {
    let dense = prop::array::uniform6(0.0f64..1.0).prop_filter_map("zero sum", |raw| {
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return None;
        }
        let mut masses = raw;
        for m in &mut masses {
            *m /= sum;
        }
        MassFunction::new(masses).ok()
    });
    let sparse = (prop::array::uniform6(0.0f64..1.0), 1u8..63).prop_filter_map(
        "empty mask",
        |(raw, mask)| {
            let mut masses = [0.0; NUM_CHANNELS];
            let mut sum = 0.0;
            for (k, m) in raw.iter().enumerate() {
                if mask & (1 << k) != 0 {
                    masses[k] = *m;
                    sum += *m;
                }
            }
            if sum <= 0.0 {
                return None;
            }
            for m in &mut masses {
                *m /= sum;
            }
            MassFunction::new(masses).ok()
        },
    );
    let corner = prop::sample::select(vec![
        MassFunction::vacuous(),
        MassFunction::certain(Class::Pedestrian),
        MassFunction::certain(Class::Car),
        MassFunction::certain(Class::Other),
        MassFunction::new([0.99, 0.0, 0.0, 0.0, 0.0, 0.01]).unwrap(),
        MassFunction::new([0.6, 0.0, 0.0, 0.0, 0.0, 0.4]).unwrap(),
    ]);
    prop_oneof![4 => dense, 4 => sparse, 1 => corner]
}

fn assert_valid(m: &MassFunction) {
    let sum: f64 = m.masses().iter().sum();
    assert!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
    for &v in m.masses() {
        assert!(v >= 0.0, "negative mass {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn discount_and_fusion_outputs_stay_valid(
        m1 in mass_strategy(),
        m2 in mass_strategy(),
        gamma in 0.0f64..=1.0,
    ) {
        assert_valid(&m1.discount(gamma).unwrap());
        assert_valid(&m1.fuse(&m2));
        assert_valid(&m1.fuse(&m2).discount(gamma).unwrap());
    }

    #[test]
    fn vacuous_is_a_fusion_identity(m in mass_strategy()) {
        let fused = m.fuse(&MassFunction::vacuous());
        prop_assert!(fused.max_abs_diff(&m) <= 1e-9);
        let fused = MassFunction::vacuous().fuse(&m);
        prop_assert!(fused.max_abs_diff(&m) <= 1e-9);
    }

    #[test]
    fn fusion_is_commutative(m1 in mass_strategy(), m2 in mass_strategy()) {
        prop_assert!(m1.fuse(&m2).max_abs_diff(&m2.fuse(&m1)) <= 1e-9);
    }

    #[test]
    fn fused_ignorance_is_the_product_of_ignorances(
        m1 in mass_strategy(),
        m2 in mass_strategy(),
    ) {
        let fused = m1.fuse(&m2);
        prop_assert_eq!(fused.mass(OMEGA), m1.mass(OMEGA) * m2.mass(OMEGA));
    }

    #[test]
    fn prenormalization_masses_are_contour_products(
        m1 in mass_strategy(),
        m2 in mass_strategy(),
    ) {
        let ContourFunction { plausibilities: pl1 } = m1.contour();
        let ContourFunction { plausibilities: pl2 } = m2.contour();
        for k in 0..5 {
            let direct = (m1.mass(k) + m1.mass(OMEGA)) * (m2.mass(k) + m2.mass(OMEGA));
            prop_assert!((direct - pl1[k] * pl2[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn stronger_discounts_leave_more_ignorance(
        m in mass_strategy(),
        g1 in 0.0f64..=1.0,
        g2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(
            m.discount(lo).unwrap().mass(OMEGA) >= m.discount(hi).unwrap().mass(OMEGA) - 1e-12
        );
    }

    #[test]
    fn contour_dominates_singleton_masses(m in mass_strategy()) {
        for (k, &pl) in m.contour().plausibilities.iter().enumerate() {
            prop_assert!(pl >= m.mass(k) - 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&pl));
        }
    }
}
