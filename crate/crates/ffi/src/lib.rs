//! C ABI over `coin-core`.
//!
//! Conventions:
//! - Every fallible function returns a [`CoinStatus`]. On failure a message
//!   is kept per thread and can be read with [`coin_last_error_message`].
//! - Objects cross the boundary as opaque handles ([`CoinDataset`],
//!   [`CoinModel`]) created by `*_new`/`*_load`-style calls and released with
//!   the matching `*_free`. Freeing NULL is a no-op.
//! - Matrices are dense, row-major `double` buffers; the caller owns every
//!   buffer it passes in and states its length.
//! - Panics never unwind into C; they surface as `COIN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coin_core::datagen::{make_blobs, Dataset};
use coin_core::expcli::{self, ExperimentSpec, Overrides};
use coin_core::losses::{sup_con_loss, LabeledBatch};
use coin_core::metrics::s_dbw;
use coin_core::model::{load_checkpoint, save_checkpoint, ModelParams, StackConfig};
use coin_core::CoinError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoinStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Bad shapes, out-of-range parameters, malformed specs or checkpoints.
    InvalidArgument = 2,
    /// Non-finite values or a zero-norm embedding.
    Numeric = 3,
    /// The input does not admit the requested quantity (e.g. S_Dbw of one class).
    Degenerate = 4,
    Io = 5,
    Panic = 6,
}

/// Which representation [`coin_model_features`] returns.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoinLayer {
    /// Encoder output.
    Z = 0,
    /// Unit-norm projection.
    V = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoinSDbw {
    pub scat: f64,
    pub dens_bw: f64,
    pub score: f64,
}

/// Labelled feature matrix.
pub struct CoinDataset(Dataset);

/// Trained parameters together with their architecture.
pub struct CoinModel {
    params: ModelParams,
    config: StackConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &CoinError) -> CoinStatus {
    match err {
        CoinError::Dimension { .. }
        | CoinError::Parameter(_)
        | CoinError::BatchSize { .. }
        | CoinError::Split(_)
        | CoinError::Parse { .. }
        | CoinError::Validation { .. } => CoinStatus::InvalidArgument,
        CoinError::Numeric(_) | CoinError::DegenerateEmbedding { .. } => CoinStatus::Numeric,
        CoinError::MetricUndefined(_) | CoinError::DegenerateData(_) => CoinStatus::Degenerate,
        CoinError::Io { .. } => CoinStatus::Io,
    }
}

struct Failure(CoinStatus, String);

impl From<CoinError> for Failure {
    fn from(e: CoinError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CoinStatus::NullPointer, format!("`{what}` is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CoinStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic for `coin_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CoinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CoinStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CoinStatus::Panic
        }
    }
}

unsafe fn matrix<'a>(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = rows.checked_mul(cols).ok_or_else(|| invalid(format!("`{what}` shape overflows")))?;
    let slice = std::slice::from_raw_parts(data, len);
    ArrayView2::from_shape((rows, cols), slice).map_err(|e| invalid(e.to_string()))
}

unsafe fn label_slice<'a>(data: *const usize, n: usize) -> Result<&'a [usize], Failure> {
    if data.is_null() {
        return Err(null("labels"));
    }
    Ok(std::slice::from_raw_parts(data, n))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn copy_into(src: &[f64], dst: *mut f64, dst_len: usize, what: &str) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null(what));
    }
    if dst_len < src.len() {
        return Err(invalid(format!("`{what}` holds {dst_len} values, {} needed", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn coin_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coin_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Gaussian blobs drawn from `ChaCha8(seed)`; rows are grouped by class.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn coin_dataset_make_blobs(
    classes: usize,
    dims: usize,
    per_class: usize,
    center_scale: f64,
    spread: f64,
    seed: u64,
    out: *mut *mut CoinDataset,
) -> CoinStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = make_blobs(classes, dims, per_class, center_scale, spread, &mut rng)?;
        out.write(Box::into_raw(Box::new(CoinDataset(ds))));
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn coin_dataset_free(ds: *mut CoinDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of rows, columns and classes.
///
/// # Safety
/// `ds` must be a live handle; each out pointer must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn coin_dataset_shape(
    ds: *const CoinDataset,
    rows: *mut usize,
    cols: *mut usize,
    classes: *mut usize,
) -> CoinStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.0;
        for (p, v) in [(rows, ds.len()), (cols, ds.dims()), (classes, ds.num_classes)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Copies the row-major features into `out` (`out_len >= rows * cols`).
///
/// # Safety
/// `ds` must be a live handle and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn coin_dataset_features(ds: *const CoinDataset, out: *mut f64, out_len: usize) -> CoinStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.0;
        let flat = ds.features.as_standard_layout();
        copy_into(flat.as_slice().expect("standard layout"), out, out_len, "out")
    })
}

/// Copies the labels into `out` (`out_len >= rows`).
///
/// # Safety
/// `ds` must be a live handle and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn coin_dataset_labels(ds: *const CoinDataset, out: *mut usize, out_len: usize) -> CoinStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < ds.len() {
            return Err(invalid(format!("`out` holds {out_len} labels, {} needed", ds.len())));
        }
        ptr::copy_nonoverlapping(ds.labels.as_ptr(), out, ds.len());
        Ok(())
    })
}

/// Loads a checkpoint written by `coin` or [`coin_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn coin_model_load(path: *const c_char, out: *mut *mut CoinModel) -> CoinStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (params, config) = load_checkpoint(&path)?;
        out.write(Box::into_raw(Box::new(CoinModel { params, config })));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn coin_model_save(model: *const CoinModel, path: *const c_char) -> CoinStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&m.params, &m.config, &path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn coin_model_free(model: *mut CoinModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, encoder width, projection width and class count.
///
/// # Safety
/// `model` must be a live handle; each out pointer must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn coin_model_dims(
    model: *const CoinModel,
    d_in: *mut usize,
    d_z: *mut usize,
    d_v: *mut usize,
    classes: *mut usize,
) -> CoinStatus {
    guard(|| {
        let c = &model.as_ref().ok_or_else(|| null("model"))?.config;
        for (p, v) in [(d_in, c.d_in), (d_z, c.d_z), (d_v, c.d_v), (classes, c.num_classes)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Features of `rows` inputs at `layer`, written row-major into `out`
/// (`rows * d_z` or `rows * d_v` values).
///
/// # Safety
/// `x` must hold `rows * cols` doubles and `out` be valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn coin_model_features(
    model: *const CoinModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    layer: CoinLayer,
    out: *mut f64,
    out_len: usize,
) -> CoinStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = matrix(x, rows, cols, "x")?;
        let z = m.params.encode(x)?;
        let feats = match layer {
            CoinLayer::Z => z,
            CoinLayer::V => m.params.project(z.view())?,
        };
        let flat = feats.as_standard_layout();
        copy_into(flat.as_slice().expect("standard layout"), out, out_len, "out")
    })
}

/// Class predictions (argmax of the classifier logits) for `rows` inputs.
///
/// # Safety
/// `x` must hold `rows * cols` doubles and `out` be valid for `rows` writes.
#[no_mangle]
pub unsafe extern "C" fn coin_model_predict(
    model: *const CoinModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut usize,
) -> CoinStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = matrix(x, rows, cols, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let logits = m.params.classify(m.params.encode(x)?.view())?;
        for (i, row) in logits.rows().into_iter().enumerate() {
            out.add(i).write(coin_core::metrics::argmax(row));
        }
        Ok(())
    })
}

/// Supervised contrastive loss of unit-norm rows `v`. When `grad` is not
/// NULL it receives `dL/dv` (`rows * cols` values).
///
/// # Safety
/// `v` must hold `rows * cols` doubles, `labels` `rows` entries, `value` be
/// writable and `grad` NULL or valid for `rows * cols` writes.
#[no_mangle]
pub unsafe extern "C" fn coin_sup_con_loss(
    v: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    tau: f64,
    value: *mut f64,
    grad: *mut f64,
) -> CoinStatus {
    guard(|| {
        let v = matrix(v, rows, cols, "v")?;
        let labels = label_slice(labels, rows)?;
        let r = sup_con_loss(LabeledBatch::new(v, labels)?, tau)?;
        write_out(value, r.value, "value")?;
        if !grad.is_null() {
            let mut g = ArrayViewMut2::from_shape_ptr((rows, cols), grad);
            g.assign(&r.grad);
        }
        Ok(())
    })
}

/// S_Dbw of `rows` feature vectors clustered by `labels`.
///
/// # Safety
/// `features` must hold `rows * cols` doubles, `labels` `rows` entries and
/// `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn coin_s_dbw(
    features: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    out: *mut CoinSDbw,
) -> CoinStatus {
    guard(|| {
        let x = matrix(features, rows, cols, "features")?;
        let labels = label_slice(labels, rows)?;
        let r = s_dbw(x, labels)?;
        write_out(
            out,
            CoinSDbw {
                scat: r.scat,
                dens_bw: r.dens_bw,
                score: r.score,
            },
            "out",
        )
    })
}

/// Equivalent of `coin run --spec <spec_path> [--out <out_dir>]`. `out_dir`
/// may be NULL to use the spec's own `out_dir`.
///
/// # Safety
/// `spec_path` must be a NUL-terminated string; `out_dir` NULL or one.
#[no_mangle]
pub unsafe extern "C" fn coin_run_spec(spec_path: *const c_char, out_dir: *const c_char) -> CoinStatus {
    guard(|| {
        let spec = ExperimentSpec::load(&path_arg(spec_path, "spec_path")?)?;
        let ov = Overrides {
            out_dir: if out_dir.is_null() {
                None
            } else {
                Some(path_arg(out_dir, "out_dir")?)
            },
            ..Overrides::default()
        };
        expcli::cmd_run(spec, &ov)?;
        Ok(())
    })
}
