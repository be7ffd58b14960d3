//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step, starting with
    /// the seeding.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one assignment step")
    }
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(x: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (m, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (m, d);
        }
    }
    best
}

fn assign(features: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    features
        .rows()
        .into_iter()
        .map(|x| nearest(x, centroids.view()))
        .unzip()
}

fn seed_plus_plus<R: Rng>(features: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = features.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a chosen one.
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        for (i, x) in features.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, features.row(next)));
        }
    }
    Array2::from_shape_fn((k, features.ncols()), |(m, j)| features[[chosen[m], j]])
}

/// Clusters the rows of `features` into `k` groups.
///
/// Iterates until the largest centroid move is below `tol` or `max_iter`
/// updates have run. A cluster left empty by an assignment step is moved onto
/// the point farthest from its current centroid.
pub fn kmeans(features: &Array2<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let n = features.nrows();
    if k == 0 || n < k {
        return Err(Error::Infeasible(format!("cannot form {k} clusters from {n} points")));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("k-means input has non-finite entries".into()));
    }
    let mut rng = seeded(seed);
    let mut centroids = seed_plus_plus(features, k, &mut rng);
    let (mut labels, mut dists) = assign(features, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (x, &l) in features.rows().into_iter().zip(&labels) {
            let mut row = sums.row_mut(l);
            row += &x;
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for m in 0..k {
            if counts[m] > 0 {
                let mut row = next.row_mut(m);
                row.assign(&sums.row(m));
                row /= counts[m] as f64;
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("n >= k leaves a candidate");
                taken[far] = true;
                next.row_mut(m).assign(&features.row(far));
            }
        }
        let shift = centroids
            .rows()
            .into_iter()
            .zip(next.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        (labels, dists) = assign(features, &centroids);
        history.push(dists.iter().sum());
        if shift < tol {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments: labels,
        objective_history: history,
        iterations,
    })
}
