//! Clustering evaluation against ground truth: accuracy under the best
//! one-to-one label matching (ACC), normalized mutual information (NMI) and
//! purity (PUR).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{contingency, hungarian_align, ContingencyMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
    pub n: usize,
    /// Rows are predicted clusters, columns true classes.
    #[serde(skip)]
    pub contingency: Option<ContingencyMatrix>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// True when every predicted cluster has a distinct majority class, i.e.
    /// purity's majority vote is itself a one-to-one matching.
    pub fn is_one_to_one(&self) -> bool {
        let Some(c) = &self.contingency else {
            return false;
        };
        let mut seen = vec![false; c.k()];
        c.counts
            .rows()
            .into_iter()
            .filter(|row| row.sum() > 0)
            .all(|row| {
                let arg = argmax_usize(row.iter().copied());
                !std::mem::replace(&mut seen[arg], true)
            })
    }
}

fn argmax_usize(it: impl Iterator<Item = usize>) -> usize {
    let mut best = (0, 0);
    for (i, x) in it.enumerate() {
        if i == 0 || x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn check(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("no samples to evaluate".into()));
    }
    Ok(())
}

fn table(pred: &[usize], truth: &[usize], k: usize) -> Result<ContingencyMatrix> {
    check(pred, truth)?;
    contingency(pred, truth, k)
}

/// Best one-to-one matching accuracy, solved with [`hungarian_align`].
pub fn clustering_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let c = table(pred, truth, k)?;
    accuracy_from(&c)
}

fn accuracy_from(c: &ContingencyMatrix) -> Result<f64> {
    let perm = hungarian_align(c)?;
    let hit: usize = perm.iter().enumerate().map(|(i, &j)| c.counts[[i, j]]).sum();
    Ok(hit as f64 / c.total() as f64)
}

/// Fraction of samples that carry their predicted cluster's majority class.
pub fn purity(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let c = table(pred, truth, k)?;
    Ok(purity_from(&c))
}

fn purity_from(c: &ContingencyMatrix) -> f64 {
    let hit: usize = c
        .counts
        .rows()
        .into_iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    hit as f64 / c.total() as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(pred; truth) / ((H(pred) + H(truth)) / 2)`.
pub fn nmi(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let c = table(pred, truth, k)?;
    Ok(nmi_from(&c))
}

fn nmi_from(c: &ContingencyMatrix) -> f64 {
    let n = c.total() as f64;
    let rows: Vec<usize> = c.counts.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<usize> = c.counts.columns().into_iter().map(|r| r.sum()).collect();
    let (hp, ht) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    let mut mi = 0.0;
    for ((i, j), &nij) in c.counts.indexed_iter() {
        if nij > 0 {
            let p = nij as f64 / n;
            mi += p * (p * n * n / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    let denom = 0.5 * (hp + ht);
    if denom <= 0.0 {
        // Both partitions are a single block, hence identical.
        return 1.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}

pub fn evaluate(pred: &[usize], truth: &[usize], k: usize) -> Result<MetricsReport> {
    let c = table(pred, truth, k)?;
    Ok(MetricsReport {
        acc: accuracy_from(&c)?,
        nmi: nmi_from(&c),
        pur: purity_from(&c),
        n: pred.len(),
        contingency: Some(c),
    })
}
