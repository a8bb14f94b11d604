use adnas::dst::{self, Opinion};
use adnas::error::Error;
use proptest::prelude::*;

/// Strategy for an opinion over `n` classes: positive weights normalized
/// onto the simplex.
fn opinion(n: usize) -> impl Strategy<Value = Opinion> {
    prop::collection::vec(0.0f64..1.0, n + 1).prop_filter_map("degenerate", |mut w| {
        let total: f64 = w.iter().sum();
        if total < 1e-6 {
            return None;
        }
        w.iter_mut().for_each(|v| *v /= total);
        let u = w.pop().unwrap();
        Opinion::new(w, u).ok()
    })
}

fn pair() -> impl Strategy<Value = (Opinion, Opinion)> {
    (2usize..=5).prop_flat_map(|n| (opinion(n), opinion(n)))
}

fn triple() -> impl Strategy<Value = (Opinion, Opinion, Opinion)> {
    (2usize..=5).prop_flat_map(|n| (opinion(n), opinion(n), opinion(n)))
}

fn low_conflict(x: &Opinion, y: &Opinion, max_z: f64) -> bool {
    dst::conflict(x, y).unwrap() < max_z
}

#[test]
fn worked_example() {
    let l = Opinion::new(vec![0.6, 0.2], 0.2).unwrap();
    let m = Opinion::new(vec![0.5, 0.1], 0.4).unwrap();
    // z = 0.6·0.1 + 0.2·0.5 = 0.16
    assert!((dst::conflict(&l, &m).unwrap() - 0.16).abs() < 1e-15);
    let f = dst::combine(&l, &m).unwrap();
    let b0 = (0.30 + 0.24 + 0.10) / 0.84;
    let b1 = (0.02 + 0.08 + 0.02) / 0.84;
    assert!((f.belief()[0] - b0).abs() < 1e-12);
    assert!((f.belief()[1] - b1).abs() < 1e-12);
    assert!((f.uncertainty() - 0.08 / 0.84).abs() < 1e-12);
}

#[test]
fn total_conflict_is_an_error() {
    let l = Opinion::new(vec![1.0, 0.0], 0.0).unwrap();
    let m = Opinion::new(vec![0.0, 1.0], 0.0).unwrap();
    assert!(matches!(dst::combine(&l, &m), Err(Error::TotalConflict(_))));
}

#[test]
fn prop1_precondition_is_enforced() {
    let l = Opinion::new(vec![0.6, 0.2], 0.2).unwrap();
    let m = Opinion::new(vec![0.1, 0.5], 0.4).unwrap();
    assert!(matches!(dst::check_prop1(&l, &m, 0), Err(Error::Precondition(_))));
    assert!(dst::check_prop1(&l, &m, 2).is_err());
}

#[test]
fn vacuous_bound_is_zero() {
    let l = Opinion::new(vec![0.5, 0.3], 0.2).unwrap();
    assert_eq!(dst::degradation_bound(&l, &Opinion::vacuous(2), 0).unwrap(), 0.0);
}

#[test]
fn invalid_opinions_are_rejected() {
    assert!(Opinion::new(vec![0.7, 0.7], 0.1).is_err());
    assert!(Opinion::new(vec![-0.1, 0.6], 0.5).is_err());
    assert!(Opinion::new(vec![0.5, f64::NAN], 0.5).is_err());
    let a = Opinion::new(vec![0.5, 0.5], 0.0).unwrap();
    let b = Opinion::new(vec![0.2, 0.3, 0.1], 0.4).unwrap();
    assert!(dst::combine(&a, &b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { max_global_rejects: 20_000, ..ProptestConfig::default() })]

    #[test]
    fn combination_commutes((l, m) in pair()) {
        prop_assume!(low_conflict(&l, &m, 0.999));
        let lm = dst::combine(&l, &m).unwrap();
        let ml = dst::combine(&m, &l).unwrap();
        prop_assert!(lm.max_abs_diff(&ml) <= 1e-12);
    }

    #[test]
    fn combination_associates((a, b, c) in triple()) {
        prop_assume!(low_conflict(&a, &b, 0.99) && low_conflict(&b, &c, 0.99) && low_conflict(&a, &c, 0.99));
        let left = dst::combine(&dst::combine(&a, &b).unwrap(), &c).unwrap();
        let right = dst::combine(&a, &dst::combine(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn combination_stays_on_the_simplex((l, m) in pair()) {
        prop_assume!(low_conflict(&l, &m, 0.999));
        let f = dst::combine(&l, &m).unwrap();
        prop_assert!(f.normalization_error() <= 1e-9);
        prop_assert!(f.belief().iter().all(|&b| b >= 0.0) && f.uncertainty() >= 0.0);
    }

    #[test]
    fn vacuous_is_the_identity(l in (2usize..=5).prop_flat_map(opinion)) {
        let f = dst::combine(&l, &Opinion::vacuous(l.classes())).unwrap();
        prop_assert!(f.max_abs_diff(&l) <= 1e-12);
    }

    #[test]
    fn dominant_evidence_never_hurts((l, m) in pair(), g in 0usize..5) {
        let g = g % l.classes();
        // Move m's strongest class onto g so the precondition holds more often.
        let mut b = m.belief().to_vec();
        let top = (0..b.len()).max_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap();
        b.swap(g, top);
        let m = Opinion::new(b, m.uncertainty()).unwrap();
        prop_assume!(m.belief()[g] >= l.max_belief());
        prop_assert!(dst::check_prop1(&l, &m, g).unwrap());
    }

    #[test]
    fn degradation_respects_the_bound((l, m) in pair(), g in 0usize..5) {
        let g = g % l.classes();
        prop_assume!(low_conflict(&l, &m, 0.999));
        let f = dst::combine(&l, &m).unwrap();
        prop_assert!(l.belief()[g] - f.belief()[g] <= dst::degradation_bound(&l, &m, g).unwrap() + 1e-12);
    }
}

#[test]
fn monte_carlo_certification_is_clean() {
    let mut r = adnas::rng::keyed(5, "dst", &[]);
    let report = dst::verify(&mut r, 2000).unwrap();
    assert_eq!(report.prop1_violations, 0);
    assert_eq!(report.bound_violations, 0);
    assert!(report.max_assoc_error <= 1e-9);
    assert!(report.max_closure_error <= 1e-9);
}
