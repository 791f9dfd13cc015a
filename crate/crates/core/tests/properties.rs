use lsa_core::attack::{inject, norm_of, project};
use lsa_core::stats::{auc, holm_bonferroni};
use lsa_core::{Metric, MetricConfig, MetricKind, Norm, ScheduleConfig};
use proptest::prelude::*;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // Coarse values so ties are common.
    prop::collection::vec((0..20i32).prop_map(|v| v as f64 * 0.25), 1..30)
}

proptest! {
    #[test]
    fn projection_lands_in_the_ball_and_is_idempotent(
        z in vector(16),
        eta in 0.01..2.0f64,
        linf in any::<bool>(),
    ) {
        let norm = if linf { Norm::Linf } else { Norm::L2 };
        let p = project(&z, norm, eta);
        prop_assert!(norm_of(&p, norm) <= eta * (1.0 + 1e-12));
        let q = project(&p, norm, eta);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12 * eta);
        }
        if norm_of(&z, norm) <= eta {
            prop_assert_eq!(&p, &z);
        }
    }

    #[test]
    fn zero_perturbation_leaves_the_state_unchanged(x in vector(8), t in 1usize..=100) {
        let schedule = ScheduleConfig { steps: 100, ..Default::default() }.build().unwrap();
        prop_assert_eq!(inject(&x, &[0.0; 8], t, &schedule).unwrap(), x);
    }

    #[test]
    fn auc_is_antisymmetric_and_rank_invariant(pos in scores(), neg in scores()) {
        let a = auc(&pos, &neg).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auc(&neg, &pos).unwrap() - 1.0).abs() < 1e-12);
        let warp = |v: &[f64]| v.iter().map(|x| (x * 0.7).exp() - 3.0).collect::<Vec<_>>();
        prop_assert_eq!(auc(&warp(&pos), &warp(&neg)).unwrap(), a);
    }

    #[test]
    fn holm_rejections_are_closed_under_smaller_p(p in prop::collection::vec(0.0..0.2f64, 1..12)) {
        let reject = holm_bonferroni(&p, 0.05).unwrap();
        for i in 0..p.len() {
            for j in 0..p.len() {
                if reject[i] && p[j] <= p[i] {
                    prop_assert!(reject[j]);
                }
            }
        }
    }

    #[test]
    fn metrics_are_nonnegative_symmetric_and_zero_on_the_diagonal(
        a in vector(256),
        b in vector(256),
        kind in prop::sample::select(MetricKind::ALL.to_vec()),
    ) {
        let m = Metric::new(kind, &MetricConfig::default()).unwrap();
        let ab = m.eval(&a, &b).unwrap();
        let ba = m.eval(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(m.eval(&a, &a).unwrap().abs() < 1e-12);
    }
}
