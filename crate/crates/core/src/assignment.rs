//! Gated minimum-cost bipartite assignment.
//!
//! Entries above the gate are infeasible and can never be matched. Among
//! matchings that use only feasible pairs, the solver maximizes cardinality
//! first and minimizes total cost second.

use ndarray::Array2;

use crate::types::CostMatrix;

/// Feasible pairs cost at most 1 in every matrix this engine builds, so any
/// padding constant far above n·1 dominates the real costs without eating
/// into f64 precision.
const INFEASIBLE: f64 = 1e6;

/// Outcome of one assignment round. Each row/column index appears exactly
/// once across the three lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentResult {
    /// (track_row, detection_col), sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl AssignmentResult {
    fn empty(rows: usize, cols: usize) -> Self {
        Self {
            matches: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
        }
    }
}

/// Solve the gated assignment problem on a rectangular cost matrix.
pub fn solve_assignment(costs: &CostMatrix, gate: f64) -> AssignmentResult {
    let (m, n) = (costs.rows(), costs.cols());
    if m == 0 || n == 0 {
        return AssignmentResult::empty(m, n);
    }

    // Pad to square. Dummy rows/cols cost 0 against everything, so they
    // absorb the surplus side without distorting which real pairs win.
    let s = m.max(n);
    let padded = Array2::from_shape_fn((s, s), |(r, c)| {
        if r < m && c < n {
            let v = costs[(r, c)];
            if v <= gate {
                v
            } else {
                INFEASIBLE
            }
        } else {
            0.0
        }
    });

    let row_to_col = hungarian_min(&padded);

    let mut matches = Vec::new();
    let mut unmatched_rows = Vec::new();
    let mut matched_cols = vec![false; n];
    for (r, &c) in row_to_col.iter().enumerate().take(m) {
        if c < n && costs[(r, c)] <= gate {
            matches.push((r, c));
            matched_cols[c] = true;
        } else {
            unmatched_rows.push(r);
        }
    }
    let unmatched_cols = (0..n).filter(|&c| !matched_cols[c]).collect();
    AssignmentResult {
        matches,
        unmatched_rows,
        unmatched_cols,
    }
}

/// Minimum-cost perfect matching on a square matrix via shortest augmenting
/// paths with potentials (O(n³)). Returns row → column.
fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    if n == 0 {
        return Vec::new();
    }

    // 1-indexed arrays; index 0 is a virtual column used to seed each phase.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_to_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_to_row[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_to_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let slack = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_to_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_to_row[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back, flipping assignments.
        loop {
            let j1 = way[j0];
            col_to_row[j0] = col_to_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if col_to_row[j] > 0 {
            row_to_col[col_to_row[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Exhaustive oracle: the (max feasible cardinality, then min feasible
/// cost) matching over every possibility. Exponential; dimensions ≤ ~7.
///
/// Any partial matching extends to a full injective map of the smaller side,
/// and an optimal matching's extension pairs must all be infeasible (a
/// feasible one would raise cardinality), so enumerating full maps suffices.
/// Returns the winning feasible pairs sorted by row.
#[doc(hidden)]
pub fn brute_force_assignment(costs: &CostMatrix, gate: f64) -> (usize, Vec<(usize, usize)>) {
    let (m, n) = (costs.rows(), costs.cols());
    if m > n {
        let t = CostMatrix::from_fn(n, m, |r, c| costs[(c, r)]);
        let (card, pairs) = brute_force_assignment(&t, gate);
        let mut mapped: Vec<(usize, usize)> = pairs.into_iter().map(|(r, c)| (c, r)).collect();
        mapped.sort_unstable();
        return (card, mapped);
    }
    let mut best: Option<(usize, f64, Vec<(usize, usize)>)> = None;
    let mut cols: Vec<usize> = (0..n).collect();
    permute(&mut cols, 0, &mut |perm| {
        let mut card = 0usize;
        let mut total = 0.0f64;
        let mut pairs = Vec::new();
        for r in 0..m {
            let v = costs[(r, perm[r])];
            if v <= gate {
                card += 1;
                total += v;
                pairs.push((r, perm[r]));
            }
        }
        let better = match &best {
            None => true,
            Some((bc, bt, _)) => card > *bc || (card == *bc && total < *bt),
        };
        if better {
            best = Some((card, total, pairs));
        }
    });
    best.map(|(card, _, pairs)| (card, pairs)).unwrap_or((0, Vec::new()))
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}
