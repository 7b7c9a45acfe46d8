//! S_Dbw cluster validity and top-1 accuracy.
//!
//! S_Dbw = Scat + Dens_bw, with clusters given by ground-truth labels. Lower
//! is better: compact classes (small Scat) separated by sparse regions
//! (small Dens_bw).

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CoinError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SDbwResult {
    pub scat: f64,
    pub dens_bw: f64,
    pub score: f64,
}

/// Orders row indices by their feature vectors so that reductions over a
/// cluster do not depend on how the rows were ordered on input.
fn canonical(x: ArrayView2<'_, f64>, rows: &mut [usize]) {
    rows.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

/// Per-dimension population variance of the selected rows.
fn variance(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array1<f64> {
    let sel = x.select(Axis(0), rows);
    sel.var_axis(Axis(0), 0.0)
}

fn center(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array1<f64> {
    x.select(Axis(0), rows)
        .mean_axis(Axis(0))
        .expect("clusters are non-empty")
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

fn density(
    x: ArrayView2<'_, f64>,
    members: impl Iterator<Item = usize>,
    u: ArrayView1<'_, f64>,
    radius: f64,
) -> usize {
    members.filter(|&r| dist(x.row(r), u) <= radius).count()
}

/// S_Dbw of `features` partitioned by `labels`.
///
/// Conventions: variances divide by cluster size; a point at exactly the
/// density radius counts as inside; a zero radius yields `Dens_bw = 0`; and a
/// pair whose two centre densities are both 0 divides by 1, so its term is
/// the midpoint count itself (0 in every case seen in practice).
pub fn s_dbw(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<SDbwResult> {
    if features.nrows() != labels.len() {
        return Err(CoinError::dim("s_dbw", format!("{} labels", features.nrows()), labels.len()));
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    for rows in clusters.values_mut() {
        canonical(features, rows);
    }
    let c = clusters.len();
    if c < 2 {
        return Err(CoinError::MetricUndefined(format!(
            "S_Dbw needs at least 2 distinct labels, found {c}"
        )));
    }
    let mut all: Vec<usize> = (0..labels.len()).collect();
    canonical(features, &mut all);
    let total_sigma = variance(features, &all);
    let total_norm = total_sigma.dot(&total_sigma).sqrt();
    if !(total_norm > 0.0) {
        return Err(CoinError::DegenerateData("all feature vectors are identical".into()));
    }

    let groups: Vec<&Vec<usize>> = clusters.values().collect();
    let sigma_norms: Vec<f64> = groups
        .iter()
        .map(|rows| {
            let s = variance(features, rows);
            s.dot(&s).sqrt()
        })
        .collect();
    let scat = sigma_norms.iter().sum::<f64>() / (c as f64 * total_norm);

    let stdev = sigma_norms.iter().sum::<f64>().sqrt() / c as f64;
    let dens_bw = if stdev == 0.0 {
        0.0
    } else {
        let centers: Vec<Array1<f64>> = groups.iter().map(|rows| center(features, rows)).collect();
        let mut acc = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let members = || groups[i].iter().chain(groups[j].iter()).copied();
                let mid = (&centers[i] + &centers[j]) / 2.0;
                let d_mid = density(features, members(), mid.view(), stdev);
                let d_i = density(features, members(), centers[i].view(), stdev);
                let d_j = density(features, members(), centers[j].view(), stdev);
                let denom = d_i.max(d_j).max(1);
                acc += d_mid as f64 / denom as f64;
            }
        }
        acc / (c * (c - 1)) as f64
    };
    if !scat.is_finite() || !dens_bw.is_finite() {
        return Err(CoinError::Numeric("S_Dbw evaluated to a non-finite value".into()));
    }
    Ok(SDbwResult {
        scat,
        dens_bw,
        score: scat + dens_bw,
    })
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest index.
pub fn top1_accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), labels.len(), "top1_accuracy: row/label count mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
