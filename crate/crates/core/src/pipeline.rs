//! Two-stage training: contrastive initialization, then fine-tuning.
//!
//! A run proceeds as: stratified split, stack initialisation, toy
//! instance-discrimination pretraining of `f` and `g`, fresh projector and
//! classifier heads, `floor(alpha * N)` epochs of supervised contrastive
//! training on `f` and `g`, then the remaining epochs on the joint
//! cross-entropy + contrastive objective over all three groups.
//!
//! All randomness comes from one ChaCha8 stream seeded with
//! [`TrainConfig::seed`], consumed in exactly that order.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment, train_test_split, AugmentConfig, Dataset};
use crate::error::{CoinError, Result};
use crate::losses::{combined_loss, cross_entropy, sup_con_loss, LabeledBatch, LossResult};
use crate::metrics::{s_dbw, top1_accuracy, SDbwResult};
use crate::model::{init_params, ModelParams, ParamGroups, StackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Contrastive initialization followed by SCL fine-tuning.
    Coin,
    /// Joint cross-entropy + supervised contrastive fine-tuning.
    Scl,
    /// Cross-entropy only.
    Ce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Coin => "coin",
            Method::Scl => "scl",
            Method::Ce => "ce",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CoinError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coin" => Ok(Method::Coin),
            "scl" => Ok(Method::Scl),
            "ce" | "ce-tuning" => Ok(Method::Ce),
            other => Err(CoinError::validation("method", format!("unknown method `{other}` (coin, scl, ce)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total epoch budget `N`, shared by both stages.
    pub epochs: usize,
    /// Stage split ratio; ignored unless `method` is COIN.
    pub alpha: f64,
    pub eta: f64,
    pub tau: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            alpha: 0.7,
            eta: 0.05,
            tau: crate::losses::DEFAULT_TAU,
            lambda: crate::losses::DEFAULT_LAMBDA,
            batch_size: 128,
            seed: 0,
            method: Method::Coin,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoinError::validation("alpha", format!("must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(CoinError::validation("eta", "must be > 0"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CoinError::validation("tau", "must be > 0"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CoinError::validation("lambda", "must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(CoinError::validation("batch_size", "must be >= 2"));
        }
        Ok(())
    }

    pub fn init_epochs(&self) -> usize {
        match self.method {
            Method::Coin => (self.alpha * self.epochs as f64).floor() as usize,
            Method::Scl | Method::Ce => 0,
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        self.epochs - self.init_epochs()
    }

    /// Weight of the contrastive term during fine-tuning.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Ce => 0.0,
            Method::Coin | Method::Scl => self.lambda,
        }
    }
}

/// Toy instance-discrimination pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub tau: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
}

impl PretrainConfig {
    /// Defaults scaled to the blob spread of the data being pretrained on.
    pub fn for_spread(spread: f64) -> Self {
        PretrainConfig {
            epochs: 30,
            tau: 0.5,
            eta: 0.05,
            batch_size: 128,
            augment: AugmentConfig {
                noise_sigma: 0.2 * spread,
                scale_range: [0.8, 1.2],
                dropout_p: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoinError::BatchSize {
                op: "pretrain_ssl",
                min: 2,
                got: self.batch_size,
            });
        }
        if !(self.tau > 0.0) {
            return Err(CoinError::validation("pretrain.tau", "must be > 0"));
        }
        if !(self.eta > 0.0) {
            return Err(CoinError::validation("pretrain.eta", "must be > 0"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLayer {
    Z,
    V,
}

impl FromStr for FeatureLayer {
    type Err = CoinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(FeatureLayer::Z),
            "v" => Ok(FeatureLayer::V),
            other => Err(CoinError::validation("layer", format!("expected `z` or `v`, got `{other}`"))),
        }
    }
}

impl fmt::Display for FeatureLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureLayer::Z => "z",
            FeatureLayer::V => "v",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Finetune => "finetune",
        })
    }
}

/// Training statistics of one epoch, averaged over its batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Accuracy of the pre-update logits; during the init stage these come
    /// from the untouched classifier.
    pub train_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub s_dbw: SDbwResult,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub pretrain_seconds: f64,
    pub init_seconds: f64,
    pub finetune_seconds: f64,
}

impl RunTiming {
    /// Training-loop wall time of the two stages, evaluation excluded.
    pub fn wall_time_seconds(&self) -> f64 {
        self.init_seconds + self.finetune_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub per_epoch: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub final_s_dbw: SDbwResult,
    pub timing: RunTiming,
}

impl RunReport {
    /// Equality of everything except wall-clock timing.
    pub fn same_results(&self, other: &RunReport) -> bool {
        self.per_epoch == other.per_epoch
            && self.final_accuracy.to_bits() == other.final_accuracy.to_bits()
            && self.final_s_dbw == other.final_s_dbw
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub test_fraction: f64,
    pub metric_layer: FeatureLayer,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            test_fraction: 0.2,
            metric_layer: FeatureLayer::Z,
        }
    }
}

/// Test-split accuracy and S_Dbw of the chosen feature layer.
pub fn evaluate(params: &ModelParams, test: &Dataset, layer: FeatureLayer) -> Result<(f64, SDbwResult)> {
    let z = params.encode(test.features.view())?;
    let logits = params.classify(z.view())?;
    let acc = top1_accuracy(logits.view(), &test.labels);
    let sdbw = match layer {
        FeatureLayer::Z => s_dbw(z.view(), &test.labels)?,
        FeatureLayer::V => s_dbw(params.project(z.view())?.view(), &test.labels)?,
    };
    Ok((acc, sdbw))
}

fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn gather_labels(labels: &[usize], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| labels[r]).collect()
}

/// NT-Xent over two views: view `a` of instance `i` has the matching view
/// `b` as its only positive and the other `2(n-1)` views as negatives. Both
/// inputs must have unit rows; gradients are returned per view.
pub fn instance_discrimination_loss(
    view_a: ArrayView2<'_, f64>,
    view_b: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if view_a.dim() != view_b.dim() {
        return Err(CoinError::dim("instance_discrimination_loss", format!("{:?}", view_a.dim()), format!("{:?}", view_b.dim())));
    }
    let n = view_a.nrows();
    if n < 2 {
        return Err(CoinError::BatchSize {
            op: "pretrain_ssl",
            min: 2,
            got: n,
        });
    }
    let stacked = ndarray::concatenate(Axis(0), &[view_a, view_b]).expect("shapes checked");
    let ids: Vec<usize> = (0..n).chain(0..n).collect();
    let LossResult { value, grad } = sup_con_loss(LabeledBatch::new(stacked.view(), &ids)?, tau)?;
    let grad_a = grad.slice(ndarray::s![..n, ..]).to_owned();
    let grad_b = grad.slice(ndarray::s![n.., ..]).to_owned();
    Ok((value, grad_a, grad_b))
}

/// Instance-discrimination pretraining of `f` and `g` on unlabelled rows.
///
/// Per epoch: one shuffle, then per batch two augmented views of every
/// instance (view one of each instance in batch order, then view two).
/// `w_h` is never touched; zero epochs leave the parameters unchanged.
pub fn pretrain_ssl<R: Rng + ?Sized>(
    params: &mut ModelParams,
    data: ArrayView2<'_, f64>,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for _ in 0..cfg.epochs {
        for rows in shuffled_batches(data.nrows(), cfg.batch_size, rng) {
            let mut views = [
                Array2::zeros((rows.len(), data.ncols())),
                Array2::zeros((rows.len(), data.ncols())),
            ];
            for view in views.iter_mut() {
                for (i, &r) in rows.iter().enumerate() {
                    view.row_mut(i).assign(&augment(data.row(r), &cfg.augment, rng)?);
                }
            }
            let [a, b] = views;
            let fa = params.forward(a.view(), false)?;
            let fb = params.forward(b.view(), false)?;
            let (_, ga, gb) = instance_discrimination_loss(fa.v().view(), fb.v().view(), cfg.tau)?;
            let grads_a = params.backward(&fa, ga.view(), None)?;
            let grads_b = params.backward(&fb, gb.view(), None)?;
            params.descend(&grads_a, cfg.eta, ParamGroups::ENCODER_PROJECTOR);
            params.descend(&grads_b, cfg.eta, ParamGroups::ENCODER_PROJECTOR);
        }
    }
    Ok(())
}

/// One contrastive-initialization step on a batch; returns (loss, correct predictions).
fn init_step(params: &mut ModelParams, x: ArrayView2<'_, f64>, labels: &[usize], cfg: &TrainConfig) -> Result<(f64, usize)> {
    let fwd = params.forward(x, true)?;
    let correct = count_correct(fwd.logits.as_ref().expect("requested"), labels);
    let loss = sup_con_loss(LabeledBatch::new(fwd.v().view(), labels)?, cfg.tau)?;
    let grads = params.backward(&fwd, loss.grad.view(), None)?;
    params.descend(&grads, cfg.eta, ParamGroups::ENCODER_PROJECTOR);
    Ok((loss.value, correct))
}

fn finetune_step(params: &mut ModelParams, x: ArrayView2<'_, f64>, labels: &[usize], cfg: &TrainConfig) -> Result<(f64, usize)> {
    let fwd = params.forward(x, true)?;
    let logits = fwd.logits.as_ref().expect("requested");
    let correct = count_correct(logits, labels);
    let lambda = cfg.effective_lambda();
    let (value, grads) = if cfg.method == Method::Ce {
        let ce = cross_entropy(logits.view(), labels)?;
        let zero_v = Array2::zeros(fwd.v().dim());
        (ce.value, params.backward(&fwd, zero_v.view(), Some(ce.grad.view()))?)
    } else {
        let batch = LabeledBatch::new(fwd.v().view(), labels)?;
        let loss = combined_loss(batch, logits.view(), cfg.tau, lambda)?;
        (loss.value, params.backward(&fwd, loss.grad_v.view(), Some(loss.grad_logits.view()))?)
    };
    params.descend(&grads, cfg.eta, ParamGroups::ALL);
    Ok((value, correct))
}

fn count_correct(logits: &Array2<f64>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| crate::metrics::argmax(*row) == y)
        .count()
}

type StepFn = fn(&mut ModelParams, ArrayView2<'_, f64>, &[usize], &TrainConfig) -> Result<(f64, usize)>;

fn run_stage<R: Rng + ?Sized>(
    params: &mut ModelParams,
    train: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
    step: StepFn,
    on_epoch: &mut dyn FnMut(&ModelParams, EpochStats) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    for _ in 0..epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for rows in shuffled_batches(train.len(), cfg.batch_size, rng) {
            let x = train.features.select(Axis(0), &rows);
            let labels = gather_labels(&train.labels, &rows);
            let (loss, hits) = step(params, x.view(), &labels, cfg)?;
            if !loss.is_finite() {
                return Err(CoinError::Numeric(format!("training loss became {loss}")));
            }
            loss_sum += loss;
            batches += 1;
            correct += hits;
            seen += rows.len();
        }
        let stats = EpochStats {
            mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            train_acc: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(params, stats)?;
    }
    Ok(())
}

/// Contrastive initialization: `epochs` passes of supervised contrastive
/// descent on `w_f` and `w_g`. The classifier is left bitwise unchanged.
pub fn coin_init_stage<R: Rng + ?Sized>(
    params: &mut ModelParams,
    train: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&ModelParams, EpochStats) -> Result<()>,
) -> Result<()> {
    run_stage(params, train, epochs, cfg, rng, init_step, on_epoch)
}

/// Fine-tuning on `L_ce + lambda * L_con` over all parameter groups
/// (`lambda = 0` for CE-Tuning).
pub fn finetune_stage<R: Rng + ?Sized>(
    params: &mut ModelParams,
    train: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&ModelParams, EpochStats) -> Result<()>,
) -> Result<()> {
    run_stage(params, train, epochs, cfg, rng, finetune_step, on_epoch)
}

/// Whole pipeline for one method and seed.
pub fn run(
    cfg: &TrainConfig,
    stack: &StackConfig,
    pretrain: &PretrainConfig,
    data: &Dataset,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    stack.validate()?;
    pretrain.validate()?;
    if data.dims() != stack.d_in {
        return Err(CoinError::validation("stack.d_in", format!("dataset has {} features, stack expects {}", data.dims(), stack.d_in)));
    }
    if data.num_classes != stack.num_classes {
        return Err(CoinError::validation(
            "stack.num_classes",
            format!("dataset has {} classes, stack expects {}", data.num_classes, stack.num_classes),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, test) = train_test_split(data, opts.test_fraction, &mut rng)?;
    let mut params = init_params(stack, &mut rng)?;

    let start = Instant::now();
    pretrain_ssl(&mut params, train.features.view(), pretrain, &mut rng)?;
    let pretrain_seconds = start.elapsed().as_secs_f64();
    params.reinit_heads(stack, &mut rng);

    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    let mut timing = RunTiming {
        pretrain_seconds,
        ..RunTiming::default()
    };
    let record = |stage: Stage, p: &ModelParams, s: EpochStats, per_epoch: &mut Vec<EpochRecord>| -> Result<()> {
        let (test_acc, sdbw) = evaluate(p, &test, opts.metric_layer)?;
        per_epoch.push(EpochRecord {
            epoch: per_epoch.len() + 1,
            stage,
            train_loss: s.mean_loss,
            train_acc: s.train_acc,
            test_acc,
            s_dbw: sdbw,
        });
        Ok(())
    };

    coin_init_stage(&mut params, &train, cfg.init_epochs(), cfg, &mut rng, &mut |p, s| {
        timing.init_seconds += s.seconds;
        record(Stage::Init, p, s, &mut per_epoch)
    })?;
    finetune_stage(&mut params, &train, cfg.finetune_epochs(), cfg, &mut rng, &mut |p, s| {
        timing.finetune_seconds += s.seconds;
        record(Stage::Finetune, p, s, &mut per_epoch)
    })?;

    let (final_accuracy, final_s_dbw) = match per_epoch.last() {
        Some(r) => (r.test_acc, r.s_dbw),
        None => evaluate(&params, &test, opts.metric_layer)?,
    };
    Ok(RunOutcome {
        report: RunReport {
            method: cfg.method,
            seed: cfg.seed,
            per_epoch,
            final_accuracy,
            final_s_dbw,
            timing,
        },
        params,
    })
}
