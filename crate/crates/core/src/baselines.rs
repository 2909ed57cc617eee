//! One-to-one reference matchers: Hungarian assignment on cosine cost with a
//! similarity threshold.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ompm::{CountMode, FlowCounts, MatchMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(prev, curr)` pairs, sorted by `prev`.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost one-to-one assignment covering `min(m, n)` pairs.
/// Rectangular inputs are padded to a square with cost `max + 1`.
pub fn hungarian(cost: &Array2<f64>) -> Result<Assignment> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("cost matrix has non-finite entries".into()));
    }
    let (m, n) = cost.dim();
    if m == 0 || n == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let s = m.max(n);
    let pad = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let c = |i: usize, j: usize| if i < m && j < n { cost[[i, j]] } else { pad };

    // Shortest augmenting paths with potentials; rows and columns 1-based,
    // column 0 is the virtual source.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut row_of = vec![0usize; s + 1];
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=s {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=s)
        .filter(|&j| row_of[j] >= 1 && row_of[j] - 1 < m && j - 1 < n)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// Cosine similarity between every previous and current token.
pub fn cosine_similarity(prev: &Array2<f64>, curr: &Array2<f64>) -> Result<Array2<f64>> {
    if prev.ncols() != curr.ncols() {
        return Err(Error::Shape(format!(
            "token widths differ: {} vs {}",
            prev.ncols(),
            curr.ncols()
        )));
    }
    let unit = |a: &Array2<f64>| {
        let mut a = a.clone();
        for mut r in a.rows_mut() {
            let norm = r.dot(&r).sqrt().max(1e-12);
            r /= norm;
        }
        a
    };
    Ok(unit(prev).dot(&unit(curr).t()))
}

/// Hungarian on `1 − cos`, keeping assigned pairs with similarity at least
/// `threshold`.
pub fn o2o_match(prev: &Array2<f64>, curr: &Array2<f64>, threshold: f64) -> Result<(MatchMatrix, FlowCounts)> {
    let sim = cosine_similarity(prev, curr)?;
    let (m, n) = sim.dim();
    let assignment = hungarian(&sim.mapv(|s| 1.0 - s))?;
    let mut entries = Array2::zeros((n, m));
    let mut shared = 0;
    for (i, j) in assignment.pairs {
        if sim[[i, j]] >= threshold {
            entries[[j, i]] = 1;
            shared += 1;
        }
    }
    Ok((
        MatchMatrix { entries, k: 1 },
        FlowCounts {
            inflow: n - shared,
            outflow: m - shared,
            shared,
            shared_prev: shared,
            mode: CountMode::Dedup,
        },
    ))
}

/// Exhaustive minimum over all injections of the smaller side into the
/// larger. Exponential; for tests and small cross-checks.
pub fn brute_force_assignment(cost: &Array2<f64>) -> f64 {
    let (m, n) = cost.dim();
    if m > n {
        return brute_force_assignment(&cost.t().to_owned());
    }
    fn go(cost: &Array2<f64>, i: usize, used: &mut Vec<bool>) -> f64 {
        if i == cost.nrows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[[i, j]] + go(cost, i + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; n])
}
