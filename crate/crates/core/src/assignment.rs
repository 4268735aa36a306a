//! Minimum-cost bipartite assignment (Kuhn–Munkres with potentials).

use crate::numkit::Matrix;

/// Cost given to forbidden pairs.
pub const SENTINEL: f64 = 1e6;

/// Minimum-total-cost assignment of `min(rows, cols)` pairs, returned as
/// `(row, col)` sorted by row.
pub fn solve(cost: &Matrix) -> Vec<(usize, usize)> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let mut t: Vec<(usize, usize)> = solve(&cost.transpose())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        t.sort_unstable();
        return t;
    }
    // 1-based potentials over rows (u) and columns (v); p[j] is the row
    // assigned to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    out.sort_unstable();
    out
}

/// [`solve`], then drops pairs costing at least half the sentinel.
pub fn hungarian(cost: &Matrix) -> Vec<(usize, usize)> {
    solve(cost)
        .into_iter()
        .filter(|&(i, j)| cost.get(i, j) < SENTINEL / 2.0)
        .collect()
}

/// Sum of the chosen entries in row order.
pub fn total_cost(cost: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
}
