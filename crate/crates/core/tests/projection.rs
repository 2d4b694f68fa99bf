use approx::assert_abs_diff_eq;
use ppgkit_core::simplex::{is_excluded, project_scaled_simplex, project_simplex};
use proptest::prelude::*;

/// Minimizer of `||y - p||^2` over the simplex by enumerating every candidate support.
fn oracle(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|a| mask & (1 << a) != 0).collect();
        let lambda = (1.0 - members.iter().map(|&a| p[a]).sum::<f64>()) / members.len() as f64;
        let y: Vec<f64> = (0..n)
            .map(|a| {
                if mask & (1 << a) != 0 {
                    p[a] + lambda
                } else {
                    0.0
                }
            })
            .collect();
        if y.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let dist: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, y));
        }
    }
    best.expect("the top coordinate alone is always feasible").1
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 1..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_support_enumeration(p in vector()) {
        let y = project_simplex(&p).unwrap().point;
        for (a, b) in y.iter().zip(oracle(&p)) {
            prop_assert!((a - b).abs() <= 1e-10, "{y:?} vs oracle at p = {p:?}");
        }
    }

    #[test]
    fn output_lies_on_simplex(p in vector()) {
        let r = project_simplex(&p).unwrap();
        prop_assert!((r.point.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, (&y, &x)) in r.point.iter().zip(&p).enumerate() {
            prop_assert!((y - f64::max(x + r.offset, 0.0)).abs() <= 1e-12);
            prop_assert_eq!(r.support.contains(&a), y > 0.0);
        }
    }

    #[test]
    fn shift_invariant(p in vector(), c in -10.0f64..10.0) {
        let shifted: Vec<f64> = p.iter().map(|x| x + c).collect();
        let y0 = project_simplex(&p).unwrap().point;
        let y1 = project_simplex(&shifted).unwrap().point;
        for (a, b) in y0.iter().zip(&y1) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn idempotent(p in vector()) {
        let once = project_simplex(&p).unwrap().point;
        let twice = project_simplex(&once).unwrap().point;
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gap_property_matches_projection(
        p in prop::collection::vec(-2.0f64..2.0, 2..=6),
        mask in any::<u32>(),
    ) {
        let n = p.len();
        let b: Vec<usize> = (0..n).filter(|a| mask & (1 << a) != 0).collect();
        let c: Vec<usize> = (0..n).filter(|a| mask & (1 << a) == 0).collect();
        prop_assume!(!b.is_empty() && !c.is_empty());
        let support = project_simplex(&p).unwrap().support;
        let excluded = support.iter().all(|a| !c.contains(a));
        prop_assert_eq!(is_excluded(&p, &b, &c).unwrap(), excluded);
    }

    #[test]
    fn scaled_projection_hits_target_mass(p in vector(), mass in 0.5f64..3.0) {
        let r = project_scaled_simplex(&p, mass).unwrap();
        prop_assert!((r.point.iter().sum::<f64>() - mass).abs() <= 1e-12 * mass.max(1.0));
    }
}

#[test]
fn worked_projections() {
    let r = project_simplex(&[0.2, 0.8]).unwrap();
    assert_eq!(r.point, vec![0.2, 0.8]);
    assert_abs_diff_eq!(r.offset, 0.0, epsilon = 1e-15);

    let r = project_simplex(&[0.4, 0.8, 0.3]).unwrap();
    assert_abs_diff_eq!(r.offset, -1.0 / 6.0, epsilon = 1e-12);
    for (y, e) in r.point.iter().zip([7.0 / 30.0, 19.0 / 30.0, 4.0 / 30.0]) {
        assert_abs_diff_eq!(*y, e, epsilon = 1e-12);
    }

    let r = project_simplex(&[1.2, 0.1, -0.5]).unwrap();
    assert_abs_diff_eq!(r.offset, -0.2, epsilon = 1e-12);
    assert_eq!(r.point, vec![1.0, 0.0, 0.0]);
    assert_eq!(r.support, vec![0]);
}

#[test]
fn threshold_ties_leave_the_support() {
    // p + offset lands exactly on zero for the last coordinate.
    let r = project_simplex(&[1.5, 0.5]).unwrap();
    assert_eq!(r.point, vec![1.0, 0.0]);
    assert_eq!(r.support, vec![0]);
}

#[test]
fn gap_predicate_examples() {
    assert!(is_excluded(&[0.9, 0.7, 0.2], &[0, 1], &[2]).unwrap());
    assert!(!is_excluded(&[0.6, 0.5], &[0], &[1]).unwrap());
    assert!(!is_excluded(&[0.25; 4], &[0, 2], &[1, 3]).unwrap());
    assert!(is_excluded(&[0.5, 0.5], &[0], &[0, 1]).is_err());
}
