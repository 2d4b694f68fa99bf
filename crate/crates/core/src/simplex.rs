//! Euclidean projection onto the probability simplex and the gap-property
//! predicate that characterises which coordinates the projection zeroes out.

use crate::error::{Error, Result};

/// Output of a (possibly scaled) simplex projection.
///
/// `point[a] = max(p[a] + offset, 0)` for every coordinate; `support` lists the
/// coordinates with strictly positive mass in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub point: Vec<f64>,
    pub offset: f64,
    pub support: Vec<usize>,
}

/// Projects `p` onto `{y >= 0, sum y = 1}`.
pub fn project_simplex(p: &[f64]) -> Result<ProjectionResult> {
    project_scaled_simplex(p, 1.0)
}

/// Projects `p` onto `{y >= 0, sum y = mass}` by sort-and-threshold.
///
/// Coordinates landing exactly on the threshold (`p[a] + offset == 0`) are
/// left out of the support.
pub fn project_scaled_simplex(p: &[f64], mass: f64) -> Result<ProjectionResult> {
    if p.is_empty() {
        return Err(Error::EmptyVector);
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::BadParameter(
            "projection input must be finite".into(),
        ));
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::BadParameter(format!(
            "target mass must be positive, got {mass}"
        )));
    }

    // Descending by value; equal values keep index order (stable sort).
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]));

    let mut cumsum = 0.0;
    let mut offset = mass - p[order[0]];
    for (rank, &idx) in order.iter().enumerate() {
        cumsum += p[idx];
        let candidate = (mass - cumsum) / (rank + 1) as f64;
        if p[idx] + candidate > 0.0 {
            offset = candidate;
        } else {
            break;
        }
    }

    let mut point: Vec<f64> = p.iter().map(|&x| f64::max(x + offset, 0.0)).collect();
    let support: Vec<usize> = (0..p.len()).filter(|&a| point[a] > 0.0).collect();
    if let [only] = support[..] {
        point[only] = mass;
    }
    Ok(ProjectionResult {
        point,
        offset,
        support,
    })
}

/// Gap-property predicate: `sum_{a in B} (p_a - max_{a' in C} p_{a'})_+ >= 1`.
///
/// This holds exactly when the simplex projection of `p` assigns zero mass to
/// every coordinate of `C`. `B` and `C` must partition the coordinates and be
/// non-empty.
pub fn is_excluded(p: &[f64], b_set: &[usize], c_set: &[usize]) -> Result<bool> {
    check_partition(p.len(), b_set, c_set)?;
    let c_max = c_set
        .iter()
        .map(|&a| p[a])
        .fold(f64::NEG_INFINITY, f64::max);
    let gap: f64 = b_set.iter().map(|&a| f64::max(p[a] - c_max, 0.0)).sum();
    Ok(gap >= 1.0)
}

fn check_partition(n: usize, b_set: &[usize], c_set: &[usize]) -> Result<()> {
    if b_set.is_empty() || c_set.is_empty() {
        return Err(Error::BadPartition("both sets must be non-empty".into()));
    }
    let mut seen = vec![false; n];
    for &a in b_set.iter().chain(c_set) {
        if a >= n {
            return Err(Error::BadPartition(format!(
                "coordinate {a} out of range 0..{n}"
            )));
        }
        if seen[a] {
            return Err(Error::BadPartition(format!("coordinate {a} appears twice")));
        }
        seen[a] = true;
    }
    if let Some(missing) = seen.iter().position(|&x| !x) {
        return Err(Error::BadPartition(format!(
            "coordinate {missing} is in neither set"
        )));
    }
    Ok(())
}
