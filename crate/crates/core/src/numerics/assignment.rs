use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Minimum-cost assignment between rows and columns (Hungarian method with
/// potentials). Works on rectangular matrices; returns `min(rows, cols)`
/// `(row, col)` pairs sorted by row.
pub fn linear_sum_assignment(cost: ArrayView2<f64>) -> Result<Vec<(usize, usize)>> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid_input("assignment cost matrix has non-finite entries"));
    }
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows <= cols {
        Ok(solve(cost))
    } else {
        let transposed: Array2<f64> = cost.t().to_owned();
        let mut pairs: Vec<(usize, usize)> = solve(transposed.view())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// rows <= cols.
fn solve(cost: ArrayView2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.dim();
    let inf = f64::INFINITY;
    // 1-based potentials, way[j] = previous column on the augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}
