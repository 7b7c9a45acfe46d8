//! Differentiable primitives for a straight-line layer stack.
//!
//! Forward passes record the input of every layer in a [`Trace`]; the
//! backward pass walks the same sequence in reverse and returns exact
//! gradients for every linear layer and for the stack input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{CoinError, Result};

/// Rows with a Euclidean norm below this value cannot be normalised.
pub const NORM_EPS: f64 = 1e-12;

/// An `n x d` matrix of finite features, one instance per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch(Array2<f64>);

impl FeatureBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(CoinError::dim("FeatureBatch", "n >= 1 and d >= 1", format!("{:?}", data.dim())));
        }
        check_finite("FeatureBatch", data.view())?;
        Ok(FeatureBatch(data))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl AsRef<Array2<f64>> for FeatureBatch {
    fn as_ref(&self) -> &Array2<f64> {
        &self.0
    }
}

pub fn check_finite(what: &str, x: ArrayView2<'_, f64>) -> Result<()> {
    if let Some(((r, c), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(CoinError::Numeric(format!("{what}[{r}, {c}] = {v}")));
    }
    Ok(())
}

/// Row-wise affine map `X W + b`.
pub fn linear_forward(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() {
        return Err(CoinError::dim(
            "linear_forward",
            format!("input with {} columns", w.nrows()),
            format!("{} columns", x.ncols()),
        ));
    }
    if b.len() != w.ncols() {
        return Err(CoinError::dim(
            "linear_forward",
            format!("bias of length {}", w.ncols()),
            format!("length {}", b.len()),
        ));
    }
    let mut out = x.dot(&w);
    out += &b;
    Ok(out)
}

pub fn relu(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= NORM_EPS) {
            return Err(CoinError::DegenerateEmbedding { row: i, norm });
        }
        row /= norm;
    }
    Ok(out)
}

/// Gradient of `W` and `b` for one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// One step of a straight-line stack. Linear layers borrow their parameters.
#[derive(Debug, Clone, Copy)]
pub enum Layer<'a> {
    Linear {
        w: ArrayView2<'a, f64>,
        b: ArrayView1<'a, f64>,
    },
    Relu,
    L2Normalize,
}

impl Layer<'_> {
    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            Layer::Linear { w, b } => linear_forward(x, *w, *b),
            Layer::Relu => Ok(relu(x)),
            Layer::L2Normalize => l2_normalize_rows(x),
        }
    }
}

/// Layer inputs recorded during a forward pass, plus the final output.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

/// Gradients produced by [`Chain::backward`]; `layers[i]` is `Some` exactly
/// when layer `i` is linear.
#[derive(Debug, Clone)]
pub struct ChainGrads {
    pub layers: Vec<Option<LinearGrad>>,
    pub input: Array2<f64>,
}

impl ChainGrads {
    pub fn linear(&self) -> impl Iterator<Item = &LinearGrad> {
        self.layers.iter().flatten()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Chain<'a> {
    layers: Vec<Layer<'a>>,
}

impl<'a> Chain<'a> {
    pub fn new(layers: Vec<Layer<'a>>) -> Self {
        Chain { layers }
    }

    pub fn layers(&self) -> &[Layer<'a>] {
        &self.layers
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = layer.forward(cur.view())?;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: Array2<f64>) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = x;
        for layer in &self.layers {
            let next = layer.forward(cur.view())?;
            inputs.push(cur);
            cur = next;
        }
        if inputs.is_empty() {
            inputs.push(cur.clone());
        }
        Ok(Trace { inputs, output: cur })
    }

    /// Reverse-mode pass: `upstream` is dLoss/dOutput of the traced forward.
    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<'_, f64>) -> Result<ChainGrads> {
        if upstream.dim() != trace.output.dim() {
            return Err(CoinError::dim(
                "backward_chain",
                format!("upstream gradient {:?}", trace.output.dim()),
                format!("{:?}", upstream.dim()),
            ));
        }
        let mut grads = vec![None; self.layers.len()];
        let mut g = upstream.to_owned();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[idx];
            g = match layer {
                Layer::Linear { w, .. } => {
                    grads[idx] = Some(LinearGrad {
                        w: x.t().dot(&g),
                        b: g.sum_axis(Axis(0)),
                    });
                    g.dot(&w.t())
                }
                Layer::Relu => {
                    Zip::from(&mut g).and(x).for_each(|gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    g
                }
                Layer::L2Normalize => normalize_backward(x.view(), g.view())?,
            };
        }
        Ok(ChainGrads { layers: grads, input: g })
    }
}

/// Forward then backward through `layers` in one call.
pub fn backward_chain(
    layers: &[Layer<'_>],
    x: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Result<ChainGrads> {
    let chain = Chain::new(layers.to_vec());
    let trace = chain.forward_trace(x.to_owned())?;
    chain.backward(&trace, upstream)
}

// d(x/|x|) applied to g: (g - y (y.g)) / |x|
fn normalize_backward(x: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.dim());
    for (i, ((xr, gr), mut or)) in x
        .axis_iter(Axis(0))
        .zip(g.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let norm = xr.dot(&xr).sqrt();
        if !(norm >= NORM_EPS) {
            return Err(CoinError::DegenerateEmbedding { row: i, norm });
        }
        let y = &xr / norm;
        let proj = y.dot(&gr);
        Zip::from(&mut or)
            .and(&y)
            .and(&gr)
            .for_each(|o, &yi, &gi| *o = (gi - yi * proj) / norm);
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<F>(f: F, x: ArrayView2<'_, f64>, eps: f64) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> f64,
{
    if !(eps > 0.0) {
        return Err(CoinError::Parameter(format!("finite difference step must be > 0, got {eps}")));
    }
    let mut probe = x.to_owned();
    let mut grad = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + eps;
            let plus = f(&probe);
            probe[[r, c]] = orig - eps;
            let minus = f(&probe);
            probe[[r, c]] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CoinError::Numeric(format!(
                    "objective not finite when perturbing entry ({r}, {c})"
                )));
            }
            grad[[r, c]] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// Largest entrywise `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_relative_error on mismatched shapes");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
