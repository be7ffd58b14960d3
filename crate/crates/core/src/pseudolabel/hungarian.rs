//! Minimum-cost perfect assignment on square integer cost matrices.

/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(n^3)`. Returns `(assignment, cost)` with `assignment[row] = col`.
pub fn min_cost_assignment(costs: &[Vec<i64>]) -> (Vec<usize>, i64) {
    let n = costs.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    debug_assert!(costs.iter().all(|row| row.len() == n));

    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let cost = assignment.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
    (assignment, cost)
}

/// The lexicographically smallest assignment among all minimum-cost ones.
///
/// Rows are fixed in order to the smallest column that still admits an
/// optimal completion, checked by solving the remaining sub-problem.
pub fn lexicographic_min_assignment(costs: &[Vec<i64>]) -> Vec<usize> {
    let n = costs.len();
    let (_, best) = min_cost_assignment(costs);
    let mut assignment = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut spent = 0i64;
    for i in 0..n {
        let mut chosen = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let rest_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != j).collect();
            let sub: Vec<Vec<i64>> = (i + 1..n)
                .map(|r| rest_cols.iter().map(|&c| costs[r][c]).collect())
                .collect();
            let (_, rest) = min_cost_assignment(&sub);
            if spent + costs[i][j] + rest == best {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        used[j] = true;
        spent += costs[i][j];
        assignment.push(j);
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_assignment() {
        let costs = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let (a, c) = min_cost_assignment(&costs);
        assert_eq!(c, 5);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let costs = vec![vec![0, 0], vec![0, 0]];
        assert_eq!(lexicographic_min_assignment(&costs), vec![0, 1]);
        let costs = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        // zero-cost derangements are [1, 2, 0] and [2, 0, 1]
        assert_eq!(lexicographic_min_assignment(&costs), vec![1, 2, 0]);
    }
}
