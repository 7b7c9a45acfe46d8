//! Supervised contrastive loss, cross-entropy and their weighted sum.
//!
//! Every loss returns its value together with the analytic gradient of that
//! value with respect to the loss input (unit-norm embeddings or logits).

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{CoinError, Result};

pub const DEFAULT_TAU: f64 = 0.3;
pub const DEFAULT_LAMBDA: f64 = 0.1;

const UNIT_TOL: f64 = 1e-9;

/// Unit-norm embeddings with one class id per row.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    v: ArrayView2<'a, f64>,
    labels: &'a [usize],
}

impl<'a> LabeledBatch<'a> {
    pub fn new(v: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if v.nrows() != labels.len() {
            return Err(CoinError::dim(
                "LabeledBatch",
                format!("{} labels", v.nrows()),
                format!("{}", labels.len()),
            ));
        }
        if v.nrows() < 2 {
            return Err(CoinError::BatchSize {
                op: "sup_con_loss",
                min: 2,
                got: v.nrows(),
            });
        }
        for (i, row) in v.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(CoinError::Parameter(format!(
                    "row {i} of the embedding batch has norm {norm}, expected 1"
                )));
            }
        }
        Ok(LabeledBatch { v, labels })
    }

    pub fn v(&self) -> ArrayView2<'a, f64> {
        self.v
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Supervised contrastive loss over one batch.
///
/// Each anchor `i` compares against every other row (`A_i`); its positives
/// `P_i` are the other rows sharing its label. Anchors without any positive
/// are skipped and the mean runs over the remaining anchors only; with no
/// such anchor the loss is 0. The gradient is taken with respect to `v`.
pub fn sup_con_loss(batch: LabeledBatch<'_>, tau: f64) -> Result<LossResult> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CoinError::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    let v = batch.v;
    let labels = batch.labels;
    let n = labels.len();
    // Entry-wise dots and sorted sums keep the value bit-identical under any
    // reordering of the batch.
    let mut sim = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for k in i..n {
            let s = v.row(i).dot(&v.row(k)) / tau;
            sim[[i, k]] = s;
            sim[[k, i]] = s;
        }
    }

    // coef[i][k] = dl_i / d sim_ik (before the 1/tau chain factor and anchor mean)
    let mut coef = Array2::<f64>::zeros((n, n));
    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let positives = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        let row = sim.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom = sorted_sum((0..n).filter(|&k| k != i).map(|k| (row[k] - max).exp()));
        let lse = max + denom.ln();
        let inv_p = 1.0 / positives as f64;
        let pos_sum = sorted_sum((0..n).filter(|&k| k != i && labels[k] == labels[i]).map(|k| row[k]));
        for k in (0..n).filter(|&k| k != i) {
            let p = (row[k] - lse).exp();
            coef[[i, k]] = p - if labels[k] == labels[i] { inv_p } else { 0.0 };
        }
        per_anchor.push(lse - inv_p * pos_sum);
    }
    let anchors = per_anchor.len();
    let total = sorted_sum(per_anchor.into_iter());
    if anchors == 0 {
        return Ok(LossResult {
            value: 0.0,
            grad: Array2::zeros(v.dim()),
        });
    }
    let scale = 1.0 / (anchors as f64 * tau);
    let sym = &coef + &coef.t();
    let grad = sym.dot(&v) * scale;
    Ok(LossResult {
        value: total / anchors as f64,
        grad,
    })
}

/// Sum in ascending order, so the result does not depend on input order.
fn sorted_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut t: Vec<f64> = terms.collect();
    t.sort_by(f64::total_cmp);
    t.into_iter().sum()
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(CoinError::dim("cross_entropy", format!("{n} labels"), labels.len()));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(CoinError::Parameter(format!("label {l} at row {i} is outside [0, {k})")));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean negative log-likelihood of the labels; gradient is `(softmax - onehot) / n`.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossResult> {
    let (n, k) = logits.dim();
    if k < 2 {
        return Err(CoinError::Parameter(format!("cross_entropy needs >= 2 classes, got {k}")));
    }
    if n == 0 {
        return Err(CoinError::BatchSize {
            op: "cross_entropy",
            min: 1,
            got: 0,
        });
    }
    check_labels(labels, n, k)?;
    let mut value = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        value += lse - row[y];
    }
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok(LossResult {
        value: value / n as f64,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub ce: f64,
    pub con: f64,
    pub grad_logits: Array2<f64>,
    pub grad_v: Array2<f64>,
}

/// `cross_entropy + lambda * sup_con_loss`, gradients kept per input.
pub fn combined_loss(
    batch: LabeledBatch<'_>,
    logits: ArrayView2<'_, f64>,
    tau: f64,
    lambda: f64,
) -> Result<CombinedLoss> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(CoinError::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let ce = cross_entropy(logits, batch.labels)?;
    let con = sup_con_loss(batch, tau)?;
    Ok(CombinedLoss {
        value: ce.value + lambda * con.value,
        ce: ce.value,
        con: con.value,
        grad_logits: ce.grad,
        grad_v: con.grad * lambda,
    })
}
