//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

pub mod gradcheck;

use ndarray::{Array, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array::from_shape_fn((rows, cols), |_| scale * rng.random_range(-1.0..1.0))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = rand_matrix(rng, rows, cols, 1.0);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Central differences on every entry, then the max relative error against
/// `analytic` with denominator `max(|a|, |b|, 1e-8)`.
pub fn fd_rel_error<F: Fn(&Array2<f64>) -> f64>(analytic: &Array2<f64>, x: &Array2<f64>, f: F) -> f64 {
    assert_eq!(analytic.dim(), x.dim());
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + FD_EPS;
            let plus = f(&probe);
            probe[[r, c]] = orig - FD_EPS;
            let minus = f(&probe);
            probe[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct transcription of the supervised contrastive loss: for each anchor
/// `i` with at least one positive, average `-log(exp(s_ij)/sum_k exp(s_ik))`
/// over positives `j`, where `k` ranges over every other row; then average
/// over those anchors. No stabilisation, no matrix algebra.
pub fn brute_force_supcon(v: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let rows: Vec<Vec<f64>> = v.rows().into_iter().map(|r| r.to_vec()).collect();
    let n = rows.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(&rows[i], &rows[k]) / tau).exp();
            }
        }
        let mut per_anchor = 0.0;
        for &j in &positives {
            let num = (dot(&rows[i], &rows[j]) / tau).exp();
            per_anchor += -(num / denom).ln();
        }
        total += per_anchor / positives.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Plain-vector S_Dbw: returns (Scat, Dens_bw) with population variances,
/// inclusive radius, zero radius giving Dens_bw = 0 and centre densities
/// floored at 1.
pub fn naive_sdbw(points: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort();
    ids.dedup();
    let c = ids.len();
    let d = points[0].len();
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| (0..points.len()).filter(|&i| labels[i] == id).collect())
        .collect();
    let mean_of = |rows: &[usize]| -> Vec<f64> {
        (0..d)
            .map(|j| rows.iter().map(|&r| points[r][j]).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    let var_norm = |rows: &[usize]| -> f64 {
        let m = mean_of(rows);
        (0..d)
            .map(|j| {
                let v = rows.iter().map(|&r| (points[r][j] - m[j]).powi(2)).sum::<f64>() / rows.len() as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    };
    let all: Vec<usize> = (0..points.len()).collect();
    let total = var_norm(&all);
    let norms: Vec<f64> = members.iter().map(|m| var_norm(m)).collect();
    let scat = norms.iter().sum::<f64>() / c as f64 / total;
    let stdev = norms.iter().sum::<f64>().sqrt() / c as f64;
    if stdev == 0.0 {
        return (scat, 0.0);
    }
    let centers: Vec<Vec<f64>> = members.iter().map(|m| mean_of(m)).collect();
    let count = |rows: &[usize], u: &[f64]| -> usize {
        rows.iter()
            .filter(|&&r| {
                let dist: f64 = points[r].iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                dist <= stdev
            })
            .count()
    };
    let mut dens = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let union: Vec<usize> = members[i].iter().chain(&members[j]).copied().collect();
            let mid: Vec<f64> = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a + b) / 2.0).collect();
            let num = count(&union, &mid) as f64;
            let den = count(&union, &centers[i]).max(count(&union, &centers[j])).max(1) as f64;
            dens += num / den;
        }
    }
    (scat, dens / (c * (c - 1)) as f64)
}
