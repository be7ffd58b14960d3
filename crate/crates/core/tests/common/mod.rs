//! Brute-force oracles shared by the property and acceptance suites.
#![allow(dead_code)]

pub mod gradcheck;

use ndarray::Array2;

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                extend(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

fn matched(counts: &Array2<usize>, perm: &[usize]) -> usize {
    perm.iter().enumerate().map(|(i, &j)| counts[[i, j]]).sum()
}

/// Lexicographically first permutation with the largest matched count.
pub fn brute_force_align(counts: &Array2<usize>) -> Vec<usize> {
    let mut best: Option<(usize, Vec<usize>)> = None;
    for p in permutations(counts.nrows()) {
        let m = matched(counts, &p);
        if best.as_ref().map_or(true, |(b, _)| m > *b) {
            best = Some((m, p));
        }
    }
    best.unwrap().1
}

/// Number of permutations reaching the largest matched count.
pub fn optimal_alignments(counts: &Array2<usize>) -> usize {
    let scores: Vec<usize> = permutations(counts.nrows()).iter().map(|p| matched(counts, p)).collect();
    let max = *scores.iter().max().unwrap();
    scores.iter().filter(|&&s| s == max).count()
}

/// Best matched fraction over every relabeling of `pred`.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let best = permutations(k)
        .iter()
        .map(|p| pred.iter().zip(truth).filter(|(&a, &b)| p[a] == b).count())
        .max()
        .unwrap();
    best as f64 / pred.len() as f64
}

pub fn nearest_brute_force(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (m, c) in centroids.iter().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, m);
        }
    }
    best.1
}
