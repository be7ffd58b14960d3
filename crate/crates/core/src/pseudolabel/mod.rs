//! Dark-knowledge targets from teacher features.
//!
//! Teacher features of all views are clustered jointly with k-means; each
//! view then gets its own pseudo-labels from its block of the centroids. The
//! pseudo-labels are matched to the student's current hard predictions with a
//! maximum-agreement assignment, and the matched, temperature-softened
//! centroid distances become the student's distillation targets.

mod hungarian;
mod kmeans;

pub use hungarian::{lexicographic_min_assignment, min_cost_assignment};
pub use kmeans::{kmeans, KMeansResult};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::softmax_rows_inplace;
use kmeans::{nearest, sq_dist};

/// `counts[[i, j]]` = number of samples with row label `i` and column label `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyMatrix {
    pub counts: Array2<usize>,
}

impl ContingencyMatrix {
    pub fn total(&self) -> usize {
        self.counts.sum()
    }

    pub fn k(&self) -> usize {
        self.counts.nrows()
    }
}

pub fn contingency(row_labels: &[usize], col_labels: &[usize], k: usize) -> Result<ContingencyMatrix> {
    if row_labels.len() != col_labels.len() {
        return Err(Error::Shape(format!(
            "label vectors of length {} and {}",
            row_labels.len(),
            col_labels.len()
        )));
    }
    let mut counts = Array2::zeros((k, k));
    for (&a, &b) in row_labels.iter().zip(col_labels) {
        if a >= k || b >= k {
            return Err(Error::Range(format!("label pair ({a}, {b}) outside 0..{k}")));
        }
        counts[[a, b]] += 1;
    }
    Ok(ContingencyMatrix { counts })
}

/// Permutation `perm[row] = col` maximizing the matched counts.
///
/// Costs are `max(counts) - counts`; among optimal matchings the
/// lexicographically smallest is returned.
pub fn hungarian_align(cont: &ContingencyMatrix) -> Result<Vec<usize>> {
    let (r, c) = cont.counts.dim();
    if r != c {
        return Err(Error::Shape(format!("contingency matrix is {r}x{c}")));
    }
    let max = cont.counts.iter().copied().max().unwrap_or(0) as i64;
    let costs: Vec<Vec<i64>> = cont
        .counts
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&x| max - x as i64).collect())
        .collect();
    Ok(lexicographic_min_assignment(&costs))
}

/// Nearest per-view centroid block for every sample of every view.
///
/// `centroids` has one column block per view, in view order, each as wide as
/// that view's features.
pub fn assign_pseudo_labels(t_views: &[Array2<f64>], centroids: &Array2<f64>) -> Result<Vec<Vec<usize>>> {
    let blocks = view_blocks(t_views, centroids)?;
    Ok(t_views
        .iter()
        .zip(blocks)
        .map(|(t, (lo, hi))| {
            let c = centroids.slice(s![.., lo..hi]);
            t.rows().into_iter().map(|x| nearest(x, c).0).collect()
        })
        .collect())
}

fn view_blocks(t_views: &[Array2<f64>], centroids: &Array2<f64>) -> Result<Vec<(usize, usize)>> {
    let total: usize = t_views.iter().map(|t| t.ncols()).sum();
    if total != centroids.ncols() {
        return Err(Error::Shape(format!(
            "centroids have {} columns, views {} in total",
            centroids.ncols(),
            total
        )));
    }
    let mut lo = 0;
    Ok(t_views
        .iter()
        .map(|t| {
            let b = (lo, lo + t.ncols());
            lo += t.ncols();
            b
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DarkMode {
    /// Softmax of negative squared centroid distances over a temperature.
    #[default]
    Soft,
    /// Indicator of the matched pseudo-label.
    Onehot,
}

/// Target distributions in the student's label space, one matrix per view.
///
/// `permutations[v][s]` is the pseudo-label matched to student label `s`, so
/// column `s` of the output holds the mass of centroid `permutations[v][s]`.
pub fn dark_knowledge(
    t_views: &[Array2<f64>],
    centroids: &Array2<f64>,
    permutations: &[Vec<usize>],
    mode: DarkMode,
    temp: f64,
) -> Result<Vec<Array2<f64>>> {
    if !(temp > 0.0 && temp.is_finite()) {
        return Err(Error::Config(format!("dark-knowledge temperature must be positive, got {temp}")));
    }
    if permutations.len() != t_views.len() {
        return Err(Error::Shape("one permutation per view required".into()));
    }
    let k = centroids.nrows();
    for p in permutations {
        if !is_permutation(p, k) {
            return Err(Error::Validation(format!("{p:?} is not a permutation of 0..{k}")));
        }
    }
    let blocks = view_blocks(t_views, centroids)?;
    let mut out = Vec::with_capacity(t_views.len());
    for ((t, (lo, hi)), perm) in t_views.iter().zip(blocks).zip(permutations) {
        let c = centroids.slice(s![.., lo..hi]);
        let mut raw = Array2::<f64>::zeros((t.nrows(), k));
        for (x, mut row) in t.rows().into_iter().zip(raw.rows_mut()) {
            match mode {
                DarkMode::Soft => {
                    for (m, cm) in c.rows().into_iter().enumerate() {
                        row[m] = -sq_dist(x, cm) / temp;
                    }
                }
                DarkMode::Onehot => row[nearest(x, c).0] = 1.0,
            }
        }
        if mode == DarkMode::Soft {
            softmax_rows_inplace(&mut raw);
        }
        out.push(raw.select(Axis(1), perm));
    }
    Ok(out)
}

fn is_permutation(p: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    p.len() == k && p.iter().all(|&x| x < k && !std::mem::replace(&mut seen[x], true))
}

/// Everything produced by one pseudo-label refresh.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centroids: Array2<f64>,
    pub pseudo_labels: Vec<Vec<usize>>,
    pub permutations: Vec<Vec<usize>>,
    pub dark_targets: Vec<Array2<f64>>,
    pub kmeans_objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefreshParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub mode: DarkMode,
    pub temp: f64,
}

/// Runs k-means on the concatenated teacher features, derives per-view
/// pseudo-labels, aligns them to `student_labels` and builds the targets.
pub fn refresh_cluster_state(
    t_views: &[Array2<f64>],
    student_labels: &[Vec<usize>],
    params: &RefreshParams,
) -> Result<ClusterState> {
    if student_labels.len() != t_views.len() {
        return Err(Error::Shape("one student label vector per view required".into()));
    }
    let parts: Vec<_> = t_views.iter().map(|t| t.view()).collect();
    let joint = ndarray::concatenate(Axis(1), &parts).map_err(|e| Error::Shape(e.to_string()))?;
    let km = kmeans(&joint, params.k, params.seed, params.max_iter, params.tol)?;
    let pseudo_labels = assign_pseudo_labels(t_views, &km.centroids)?;
    let permutations = student_labels
        .iter()
        .zip(&pseudo_labels)
        .map(|(s, p)| hungarian_align(&contingency(s, p, params.k)?))
        .collect::<Result<Vec<_>>>()?;
    let dark_targets = dark_knowledge(t_views, &km.centroids, &permutations, params.mode, params.temp)?;
    Ok(ClusterState {
        kmeans_objective: km.objective(),
        centroids: km.centroids,
        pseudo_labels,
        permutations,
        dark_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn contingency_examples() {
        let c = contingency(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(c.counts, array![[0, 2], [2, 0]]);
        assert_eq!(c.total(), 4);
        let d = contingency(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(d.counts, Array2::from_diag(&ndarray::arr1(&[1, 1, 1])));
        assert!(matches!(contingency(&[0, 2], &[0, 0], 2), Err(Error::Range(_))));
    }

    #[test]
    fn hungarian_examples() {
        let diag = ContingencyMatrix {
            counts: array![[5, 0, 0], [0, 3, 0], [0, 0, 7]],
        };
        assert_eq!(hungarian_align(&diag).unwrap(), vec![0, 1, 2]);
        let swap = ContingencyMatrix {
            counts: array![[0, 2], [2, 0]],
        };
        assert_eq!(hungarian_align(&swap).unwrap(), vec![1, 0]);
    }

    #[test]
    fn pseudo_labels_and_ties() {
        let centroids = array![[0.0, 0.0, 0.0, 0.0], [2.0, 0.0, 2.0, 0.0], [5.0, 5.0, 5.0, 5.0]];
        let t = vec![array![[5.0, 5.0], [1.0, 0.0]], array![[2.0, 0.0], [1.0, 0.0]]];
        let labels = assign_pseudo_labels(&t, &centroids).unwrap();
        assert_eq!(labels, vec![vec![2, 0], vec![1, 0]]);
        assert!(matches!(
            assign_pseudo_labels(&[array![[1.0]]], &centroids),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dark_knowledge_modes() {
        let centroids = array![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let t = vec![array![[4.0, 0.0]]];
        let id = vec![vec![0, 1, 2]];
        let one = dark_knowledge(&t, &centroids, &id, DarkMode::Onehot, 1.0).unwrap();
        assert_eq!(one[0], array![[0.0, 1.0, 0.0]]);

        let sharp = dark_knowledge(&t, &centroids, &id, DarkMode::Soft, 1e-3).unwrap();
        assert!((sharp[0][[0, 1]] - 1.0).abs() < 1e-12);

        let centre = vec![array![[2.0, 2.0]]];
        let tri = array![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0]];
        let uni = dark_knowledge(&centre, &tri, &[vec![0, 1, 2, 3]], DarkMode::Soft, 1.0).unwrap();
        assert!(uni[0].iter().all(|&p| (p - 0.25).abs() < 1e-12));

        assert!(matches!(
            dark_knowledge(&t, &centroids, &id, DarkMode::Soft, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            dark_knowledge(&t, &centroids, &[vec![0, 0, 1]], DarkMode::Soft, 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn targets_follow_the_permutation() {
        let centroids = array![[0.0], [3.0]];
        let t = vec![array![[0.5], [2.0]]];
        let a = dark_knowledge(&t, &centroids, &[vec![0, 1]], DarkMode::Soft, 1.0).unwrap();
        let b = dark_knowledge(&t, &centroids, &[vec![1, 0]], DarkMode::Soft, 1.0).unwrap();
        assert_eq!(a[0].column(0), b[0].column(1));
        assert_eq!(a[0].column(1), b[0].column(0));
    }
}
