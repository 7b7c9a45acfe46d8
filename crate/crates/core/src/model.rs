//! Encoder `f`, projector `g` and classifier `h`.
//!
//! The classifier reads the encoder output `z`; the contrastive losses read the
//! projector output `v`, which always has unit rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{check_finite, Chain, ChainGrads, Layer, LinearGrad, Trace};
use crate::error::{CoinError, Result};
use crate::fmt_f64;

pub const CHECKPOINT_EXTENSION: &str = "coin-ckpt";
const CHECKPOINT_MAGIC: &str = "# coin checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StackConfig {
    pub d_in: usize,
    pub encoder_dims: Vec<usize>,
    pub d_z: usize,
    pub projector_dims: Vec<usize>,
    pub d_v: usize,
    pub num_classes: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            d_in: 32,
            encoder_dims: vec![64, 64],
            d_z: 32,
            projector_dims: vec![32],
            d_v: 16,
            num_classes: 8,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [("d_in", self.d_in), ("d_z", self.d_z), ("d_v", self.d_v)];
        for (name, d) in dims {
            if d == 0 {
                return Err(CoinError::validation(name, "must be >= 1"));
            }
        }
        if self.encoder_dims.contains(&0) {
            return Err(CoinError::validation("encoder_dims", "widths must be >= 1"));
        }
        if self.projector_dims.contains(&0) {
            return Err(CoinError::validation("projector_dims", "widths must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(CoinError::validation("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_in];
        w.extend(&self.encoder_dims);
        w.push(self.d_z);
        w
    }

    fn projector_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_z];
        w.extend(&self.projector_dims);
        w.push(self.d_v);
        w
    }
}

/// Weight `fan_in x fan_out` and bias `fan_out` of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Gaussian weights with the given standard deviation, zero bias. Weights
    /// are drawn in row-major order.
    fn gaussian<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Dense {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    fn layer(&self) -> Layer<'_> {
        Layer::Linear {
            w: self.w.view(),
            b: self.b.view(),
        }
    }

    fn descend(&mut self, grad: &LinearGrad, eta: f64) {
        self.w.scaled_add(-eta, &grad.w);
        self.b.scaled_add(-eta, &grad.b);
    }
}

/// Stack of dense layers with `std = sqrt(2/fan_in)` where a ReLU follows and
/// `sqrt(1/fan_in)` on the last layer.
fn init_mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Vec<Dense> {
    let last = widths.len() - 2;
    widths
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let gain = if i == last { 1.0 } else { 2.0 };
            Dense::gaussian(pair[0], pair[1], (gain / pair[0] as f64).sqrt(), rng)
        })
        .collect()
}

fn mlp_layers(layers: &[Dense]) -> Vec<Layer<'_>> {
    let mut out = Vec::with_capacity(2 * layers.len());
    for (i, d) in layers.iter().enumerate() {
        if i > 0 {
            out.push(Layer::Relu);
        }
        out.push(d.layer());
    }
    out
}

/// Trainable parameters: `encoder` is `w_f`, `projector` is `w_g`, `classifier` is `w_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub projector: Vec<Dense>,
    pub classifier: Dense,
}

/// Which parameter groups an update step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroups {
    pub encoder: bool,
    pub projector: bool,
    pub classifier: bool,
}

impl ParamGroups {
    pub const ENCODER_PROJECTOR: ParamGroups = ParamGroups {
        encoder: true,
        projector: true,
        classifier: false,
    };
    pub const ALL: ParamGroups = ParamGroups {
        encoder: true,
        projector: true,
        classifier: true,
    };
}

/// Gradients shaped like [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub encoder: Vec<LinearGrad>,
    pub projector: Vec<LinearGrad>,
    pub classifier: LinearGrad,
}

pub fn init_params<R: Rng + ?Sized>(config: &StackConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let encoder = init_mlp(&config.encoder_widths(), rng);
    let projector = init_mlp(&config.projector_widths(), rng);
    let classifier = init_mlp(&[config.d_z, config.num_classes], rng).remove(0);
    Ok(ModelParams {
        encoder,
        projector,
        classifier,
    })
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct StackForward {
    pub encoder: Trace,
    pub projector: Trace,
    pub logits: Option<Array2<f64>>,
}

impl StackForward {
    pub fn z(&self) -> &Array2<f64> {
        self.encoder.output()
    }

    pub fn v(&self) -> &Array2<f64> {
        self.projector.output()
    }
}

impl ModelParams {
    pub fn config_check(&self, config: &StackConfig) -> Result<()> {
        let shapes = |layers: &[Dense]| -> Vec<usize> {
            let mut w: Vec<usize> = layers.iter().take(1).map(|d| d.w.nrows()).collect();
            w.extend(layers.iter().map(|d| d.w.ncols()));
            w
        };
        if shapes(&self.encoder) != config.encoder_widths() {
            return Err(CoinError::validation("encoder", "layer shapes do not match the stack config"));
        }
        if shapes(&self.projector) != config.projector_widths() {
            return Err(CoinError::validation("projector", "layer shapes do not match the stack config"));
        }
        if self.classifier.w.dim() != (config.d_z, config.num_classes) {
            return Err(CoinError::validation("classifier", "shape does not match the stack config"));
        }
        for (i, d) in self.all_layers().enumerate() {
            if d.b.len() != d.w.ncols() {
                return Err(CoinError::validation(format!("layer {i} bias"), "length differs from weight columns"));
            }
        }
        Ok(())
    }

    fn all_layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .chain(std::iter::once(&self.classifier))
    }

    pub fn d_in(&self) -> usize {
        self.encoder[0].w.nrows()
    }

    pub fn d_z(&self) -> usize {
        self.classifier.w.nrows()
    }

    pub fn encoder_chain(&self) -> Chain<'_> {
        Chain::new(mlp_layers(&self.encoder))
    }

    pub fn projector_chain(&self) -> Chain<'_> {
        let mut layers = mlp_layers(&self.projector);
        layers.push(Layer::L2Normalize);
        Chain::new(layers)
    }

    /// `z = f(x)`.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder_chain().forward(x)
    }

    /// `v = normalize(g(z))`.
    pub fn project(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.projector_chain().forward(z)
    }

    /// `h(z)`.
    pub fn classify(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.classifier.layer_forward(z)
    }

    /// Traced forward through `f` and `g`, plus logits when `with_logits`.
    pub fn forward(&self, x: ArrayView2<'_, f64>, with_logits: bool) -> Result<StackForward> {
        let encoder = self.encoder_chain().forward_trace(x.to_owned())?;
        let projector = self.projector_chain().forward_trace(encoder.output().clone())?;
        let logits = if with_logits {
            Some(self.classify(encoder.output().view())?)
        } else {
            None
        };
        Ok(StackForward {
            encoder,
            projector,
            logits,
        })
    }

    /// Backpropagates `dL/dv` and, optionally, `dL/dlogits` through the stack.
    pub fn backward(
        &self,
        fwd: &StackForward,
        grad_v: ArrayView2<'_, f64>,
        grad_logits: Option<ArrayView2<'_, f64>>,
    ) -> Result<ParamGrads> {
        let proj = self.projector_chain().backward(&fwd.projector, grad_v)?;
        let mut grad_z = proj.input.clone();
        let classifier = match grad_logits {
            Some(gl) => {
                let z = fwd.z();
                if gl.dim() != (z.nrows(), self.classifier.w.ncols()) {
                    return Err(CoinError::dim(
                        "classifier backward",
                        format!("{:?}", (z.nrows(), self.classifier.w.ncols())),
                        format!("{:?}", gl.dim()),
                    ));
                }
                grad_z += &gl.dot(&self.classifier.w.t());
                LinearGrad {
                    w: z.t().dot(&gl),
                    b: gl.sum_axis(ndarray::Axis(0)),
                }
            }
            None => LinearGrad {
                w: Array2::zeros(self.classifier.w.dim()),
                b: Array1::zeros(self.classifier.b.len()),
            },
        };
        let enc = self.encoder_chain().backward(&fwd.encoder, grad_z.view())?;
        Ok(ParamGrads {
            encoder: collect_linear(enc),
            projector: collect_linear(proj),
            classifier,
        })
    }

    /// Plain gradient descent on the selected groups; the rest stay bitwise unchanged.
    pub fn descend(&mut self, grads: &ParamGrads, eta: f64, groups: ParamGroups) {
        if groups.encoder {
            for (d, g) in self.encoder.iter_mut().zip(&grads.encoder) {
                d.descend(g, eta);
            }
        }
        if groups.projector {
            for (d, g) in self.projector.iter_mut().zip(&grads.projector) {
                d.descend(g, eta);
            }
        }
        if groups.classifier {
            self.classifier.descend(&grads.classifier, eta);
        }
    }

    /// Fresh projector and classifier, leaving the encoder as is.
    pub fn reinit_heads<R: Rng + ?Sized>(&mut self, config: &StackConfig, rng: &mut R) {
        self.projector = init_mlp(&config.projector_widths(), rng);
        self.classifier = init_mlp(&[config.d_z, config.num_classes], rng).remove(0);
    }

    pub fn is_finite(&self) -> bool {
        self.all_layers()
            .all(|d| d.w.iter().chain(d.b.iter()).all(|v| v.is_finite()))
    }
}

impl Dense {
    fn layer_forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        crate::diffcore::linear_forward(x, self.w.view(), self.b.view())
    }
}

fn collect_linear(grads: ChainGrads) -> Vec<LinearGrad> {
    grads.layers.into_iter().flatten().collect()
}

// --- checkpoints -----------------------------------------------------------

fn dims_to_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn write_matrix(out: &mut String, name: &str, m: ArrayView2<'_, f64>) {
    let _ = writeln!(out, "[{name}] {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

/// Renders a checkpoint as text. Floats use 17 significant digits.
pub fn checkpoint_to_string(params: &ModelParams, config: &StackConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "d_in = {}", config.d_in);
    let _ = writeln!(out, "encoder_dims = {}", dims_to_string(&config.encoder_dims));
    let _ = writeln!(out, "d_z = {}", config.d_z);
    let _ = writeln!(out, "projector_dims = {}", dims_to_string(&config.projector_dims));
    let _ = writeln!(out, "d_v = {}", config.d_v);
    let _ = writeln!(out, "num_classes = {}", config.num_classes);
    let groups = [("encoder", &params.encoder), ("projector", &params.projector)];
    for (group, layers) in groups {
        for (i, d) in layers.iter().enumerate() {
            write_matrix(&mut out, &format!("{group}.{i}.w"), d.w.view());
            write_matrix(&mut out, &format!("{group}.{i}.b"), d.b.view().insert_axis(ndarray::Axis(0)));
        }
    }
    write_matrix(&mut out, "classifier.w", params.classifier.w.view());
    write_matrix(&mut out, "classifier.b", params.classifier.b.view().insert_axis(ndarray::Axis(0)));
    out.push_str("[end]\n");
    out
}

pub fn save_checkpoint(params: &ModelParams, config: &StackConfig, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(params, config)).map_err(|e| CoinError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, StackConfig)> {
    let text = fs::read_to_string(path).map_err(|e| CoinError::io(path, e))?;
    parse_checkpoint(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, field: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| CoinError::parse(field, "unexpected end of file"))
    }
}

fn parse_header_value<'a>(lines: &mut Lines<'a>, key: &str) -> Result<&'a str> {
    let (lineno, line) = lines.next(key)?;
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| CoinError::parse(key, format!("line {lineno}: expected `{key} = ...`")))?;
    if k.trim() != key {
        return Err(CoinError::parse(key, format!("line {lineno}: found `{}`", k.trim())));
    }
    Ok(v.trim())
}

fn parse_usize(field: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| CoinError::parse(field, format!("`{s}` is not a non-negative integer")))
}

fn parse_dims(field: &str, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_usize(field, p.trim())).collect()
}

fn parse_matrix(lines: &mut Lines<'_>, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
    let (lineno, header) = lines.next(name)?;
    let expected = format!("[{name}] {} {}", shape.0, shape.1);
    if header.trim() != expected {
        return Err(CoinError::parse(
            name,
            format!("line {lineno}: expected `{expected}`, found `{}`", header.trim()),
        ));
    }
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    for _ in 0..shape.0 {
        let (lineno, line) = lines.next(name)?;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| CoinError::parse(name, format!("line {lineno}: `{tok}` is not a number")))?;
            if !v.is_finite() {
                return Err(CoinError::parse(name, format!("line {lineno}: non-finite value")));
            }
            data.push(v);
        }
        if data.len() - before != shape.1 {
            return Err(CoinError::parse(
                name,
                format!("line {lineno}: expected {} values, found {}", shape.1, data.len() - before),
            ));
        }
    }
    Array2::from_shape_vec(shape, data).map_err(|e| CoinError::parse(name, e.to_string()))
}

fn parse_dense(lines: &mut Lines<'_>, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Dense> {
    let w = parse_matrix(lines, &format!("{prefix}.w"), (fan_in, fan_out))?;
    let b = parse_matrix(lines, &format!("{prefix}.b"), (1, fan_out))?;
    Ok(Dense {
        w,
        b: b.row(0).to_owned(),
    })
}

/// Parses the text produced by [`checkpoint_to_string`]. Nothing is returned
/// unless every section through the `[end]` marker is present and well formed.
pub fn parse_checkpoint(text: &str) -> Result<(ModelParams, StackConfig)> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, magic) = lines.next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(CoinError::parse("header", format!("expected `{CHECKPOINT_MAGIC}`")));
    }
    let config = StackConfig {
        d_in: parse_usize("d_in", parse_header_value(&mut lines, "d_in")?)?,
        encoder_dims: parse_dims("encoder_dims", parse_header_value(&mut lines, "encoder_dims")?)?,
        d_z: parse_usize("d_z", parse_header_value(&mut lines, "d_z")?)?,
        projector_dims: parse_dims("projector_dims", parse_header_value(&mut lines, "projector_dims")?)?,
        d_v: parse_usize("d_v", parse_header_value(&mut lines, "d_v")?)?,
        num_classes: parse_usize("num_classes", parse_header_value(&mut lines, "num_classes")?)?,
    };
    config.validate()?;
    let mut encoder = Vec::new();
    for (i, pair) in config.encoder_widths().windows(2).enumerate() {
        encoder.push(parse_dense(&mut lines, &format!("encoder.{i}"), pair[0], pair[1])?);
    }
    let mut projector = Vec::new();
    for (i, pair) in config.projector_widths().windows(2).enumerate() {
        projector.push(parse_dense(&mut lines, &format!("projector.{i}"), pair[0], pair[1])?);
    }
    let classifier = parse_dense(&mut lines, "classifier", config.d_z, config.num_classes)?;
    let (lineno, end) = lines.next("end")?;
    if end.trim() != "[end]" {
        return Err(CoinError::parse("end", format!("line {lineno}: expected `[end]`")));
    }
    let params = ModelParams {
        encoder,
        projector,
        classifier,
    };
    for d in params.all_layers() {
        check_finite("checkpoint", d.w.view())?;
    }
    Ok((params, config))
}
