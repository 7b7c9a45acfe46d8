//! Synthetic labelled data, vector augmentations and stratified splits.
//!
//! Every generator takes the caller's RNG and documents its draw order, so a
//! seeded run reproduces bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::check_finite;
use crate::error::{CoinError, Result};
use crate::fmt_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(CoinError::dim("Dataset", format!("{} labels", features.nrows()), labels.len()));
        }
        check_finite("dataset features", features.view())?;
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(CoinError::Parameter(format!("label {l} outside [0, {num_classes})")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(CoinError::Parameter(format!("class {missing} has no instances")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// CSV with header `f0,...,f{d-1},label`, floats at 17 significant digits.
    pub fn to_csv(&self) -> String {
        features_to_csv(&self.features, &self.labels)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CoinError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| CoinError::io(path, e))?;
        let (features, labels) = parse_features_csv(&text)?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(features, labels, k)
    }
}

pub fn features_to_csv(features: &Array2<f64>, labels: &[usize]) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..features.ncols()).map(|j| format!("f{j}")).collect();
    let _ = writeln!(out, "{},label", header.join(","));
    for (row, label) in features.rows().into_iter().zip(labels) {
        for v in row {
            out.push_str(&fmt_f64(*v));
            out.push(',');
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

/// Reads a `f0..,label` CSV; lines starting with `#` are ignored.
pub fn parse_features_csv(text: &str) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| CoinError::parse("header", "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.last() != Some(&"label") || cols.len() < 2 {
        return Err(CoinError::parse("header", "expected `f0,...,label`"));
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(CoinError::parse(format!("row {i}"), format!("expected {} fields", d + 1)));
        }
        for (j, f) in fields[..d].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| CoinError::parse(format!("f{j}"), format!("row {i}: `{f}`")))?;
            data.push(v);
        }
        let l: usize = fields[d]
            .trim()
            .parse()
            .map_err(|_| CoinError::parse("label", format!("row {i}: `{}`", fields[d])))?;
        labels.push(l);
    }
    let features = Array2::from_shape_vec((labels.len(), d), data)
        .map_err(|e| CoinError::parse("rows", e.to_string()))?;
    Ok((features, labels))
}

/// Gaussian blobs. Draw order: all class centres (class-major, uniform in
/// `[-center_scale, center_scale]`), then the points of class 0, class 1, ...
/// Rows are grouped by class in that order.
pub fn make_blobs<R: Rng + ?Sized>(
    num_classes: usize,
    dims: usize,
    per_class: usize,
    center_scale: f64,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(CoinError::Parameter(format!("need >= 2 classes, got {num_classes}")));
    }
    if per_class == 0 || dims == 0 {
        return Err(CoinError::Parameter("per_class and dims must be >= 1".into()));
    }
    if !(spread > 0.0) || !(center_scale >= 0.0) {
        return Err(CoinError::Parameter(format!(
            "spread must be > 0 and center_scale >= 0, got {spread} and {center_scale}"
        )));
    }
    let centers = Array2::from_shape_simple_fn((num_classes, dims), || {
        if center_scale == 0.0 {
            0.0
        } else {
            rng.random_range(-center_scale..=center_scale)
        }
    });
    let noise = Normal::new(0.0, spread).map_err(|e| CoinError::Parameter(e.to_string()))?;
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for p in 0..per_class {
            let mut row = features.row_mut(k * per_class + p);
            for (j, x) in row.iter_mut().enumerate() {
                *x = centers[[k, j]] + noise.sample(rng);
            }
            labels.push(k);
        }
    }
    Dataset::new(features, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub scale_range: [f64; 2],
    pub dropout_p: f64,
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        noise_sigma: 0.0,
        scale_range: [1.0, 1.0],
        dropout_p: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(CoinError::validation("noise_sigma", "must be >= 0"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(CoinError::validation("scale_range", "need 0 < lo <= hi"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CoinError::validation("dropout_p", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// `mask * (s * x + eps)`. Draws one scale, then `d` noise values, then `d`
/// mask bits. Degenerate settings (zero sigma, a point scale range, p = 0)
/// still consume their draws so the stream does not depend on the config.
pub fn augment<R: Rng + ?Sized>(x: ArrayView1<'_, f64>, cfg: &AugmentConfig, rng: &mut R) -> Result<Array1<f64>> {
    cfg.validate()?;
    let [lo, hi] = cfg.scale_range;
    let s = rng.random_range(lo..=hi);
    let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| CoinError::Parameter(e.to_string()))?;
    let mut out = x.mapv(|v| s * v);
    for v in out.iter_mut() {
        *v += normal.sample(rng);
    }
    let keep = Bernoulli::new(1.0 - cfg.dropout_p).map_err(|e| CoinError::Parameter(e.to_string()))?;
    for v in out.iter_mut() {
        if !keep.sample(rng) {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Stratified split.
///
/// The test side gets `round(fraction * n)` rows in total, shared out by
/// largest remainder: each class receives `floor(fraction * size)` or one
/// more (ties go to the lower class id), then is clamped so both sides keep
/// at least one row. Draw order: the rows of each class are shuffled in
/// class-id order and the first `n_test` go to the test side. Both outputs
/// keep the original row order.
pub fn train_test_split<R: Rng + ?Sized>(
    ds: &Dataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CoinError::Parameter(format!("test_fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((k, rows)) = by_class.iter().enumerate().find(|(_, r)| r.len() < 2) {
        return Err(CoinError::Split(format!(
            "class {k} has {} instance(s); both splits need at least one",
            rows.len()
        )));
    }
    let quotas: Vec<f64> = by_class.iter().map(|r| test_fraction * r.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let target = (test_fraction * ds.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(target.saturating_sub(assigned)) {
        counts[k] += 1;
    }

    let mut test_mask = vec![false; ds.len()];
    for (rows, &count) in by_class.iter_mut().zip(&counts) {
        rows.shuffle(rng);
        let n_test = count.clamp(1, rows.len() - 1);
        for &r in &rows[..n_test] {
            test_mask[r] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| test_mask[i]);
    Ok((ds.subset(&train), ds.subset(&test)))
}
