//! C ABI over the bcpnn crate.
//!
//! Conventions: every fallible call returns a [`BcpnnStatus`]; on any
//! non-OK status a thread-local message is set, readable via
//! [`bcpnn_last_error`] until the next failing call on the same thread.
//! Handles are opaque; each `*_free` accepts null and owns the handle.
//! No call unwinds across the boundary — internal panics surface as
//! `BCPNN_STATUS_RUNTIME`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use bcpnn::model::{build_network, AnyNetwork, HypercolumnGeometry};
use bcpnn::precision::{ArithMode, EmArith, F32Arith, F64Arith};
use bcpnn::trainer::TrainerError;
use bcpnn::{evaluate, load_idx, make_synthetic_clusters, predict_batch};
use bcpnn::{Dataset, Encoding, Mat, Network, TrainConfig};

/// Result class of an API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcpnnStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or an out-of-domain scalar argument.
    InvalidArgument = 1,
    /// Rejected configuration (geometry, hyperparameters).
    Config = 2,
    /// Dataset problems: unreadable, malformed, missing labels.
    Data = 3,
    /// Training/inference failure, file IO, internal errors.
    Runtime = 4,
}

/// Arithmetic mode of a network or training run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcpnnMode {
    F64 = 0,
    F32 = 1,
    Bf14 = 2,
    Bf15 = 3,
    Bf16 = 4,
    Bf20 = 5,
    Bf24 = 6,
    Bf28 = 7,
}

/// Training hyperparameters and model geometry. Obtain defaults with
/// `bcpnn_config_default`, then override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BcpnnConfig {
    pub mode: BcpnnMode,
    pub lambda_hidden: f64,
    pub lambda_output: f64,
    pub k_b: f64,
    /// Stddev of the seeded support noise in the unsupervised phase.
    pub support_noise: f64,
    pub n_epochs1: usize,
    pub n_epochs2: usize,
    pub n_cycles: usize,
    pub batch_size: usize,
    pub fan_in: usize,
    pub swaps_per_hcu: usize,
    /// 0 = default cadence (one rewire per hidden-HCU-count batches).
    pub mask_update_period: usize,
    pub n_workers: usize,
    pub seed: u64,
    pub hidden_hcus: usize,
    pub hidden_mcus: usize,
}

/// Opaque sample container.
pub struct BcpnnDataset {
    inner: Dataset,
}

/// Opaque trained (or in-training) network of any arithmetic mode.
pub struct BcpnnNetwork {
    inner: AnyNetwork,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: BcpnnStatus, msg: impl AsRef<str>) -> BcpnnStatus {
    let c = CString::new(msg.as_ref().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
    status
}

/// Message for the most recent failing call on this thread. Never null;
/// empty before the first failure. The pointer is invalidated by the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn bcpnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn guarded(f: impl FnOnce() -> BcpnnStatus) -> BcpnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(BcpnnStatus::Runtime, "internal panic"),
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, BcpnnStatus> {
    if p.is_null() {
        return Err(fail(BcpnnStatus::InvalidArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BcpnnStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn arith_mode(m: BcpnnMode) -> ArithMode {
    let name = match m {
        BcpnnMode::F64 => "f64",
        BcpnnMode::F32 => "f32",
        BcpnnMode::Bf14 => "bf14",
        BcpnnMode::Bf15 => "bf15",
        BcpnnMode::Bf16 => "bf16",
        BcpnnMode::Bf20 => "bf20",
        BcpnnMode::Bf24 => "bf24",
        BcpnnMode::Bf28 => "bf28",
    };
    name.parse().expect("fixed mode table")
}

fn mode_tag(m: ArithMode) -> BcpnnMode {
    match m.to_string().as_str() {
        "f64" => BcpnnMode::F64,
        "f32" => BcpnnMode::F32,
        "bf14" => BcpnnMode::Bf14,
        "bf15" => BcpnnMode::Bf15,
        "bf16" => BcpnnMode::Bf16,
        "bf20" => BcpnnMode::Bf20,
        "bf24" => BcpnnMode::Bf24,
        _ => BcpnnMode::Bf28,
    }
}

/// Fills `out` with the library defaults (f32 arithmetic, 30×100 hidden
/// geometry). Null `out` is a no-op.
#[no_mangle]
pub extern "C" fn bcpnn_config_default(out: *mut BcpnnConfig) {
    if out.is_null() {
        return;
    }
    let t = TrainConfig::default();
    let cfg = BcpnnConfig {
        mode: BcpnnMode::F32,
        lambda_hidden: t.lambda_hidden,
        lambda_output: t.lambda_output,
        k_b: t.k_b,
        support_noise: t.support_noise,
        n_epochs1: t.n_epochs1,
        n_epochs2: t.n_epochs2,
        n_cycles: t.n_cycles,
        batch_size: t.batch_size,
        fan_in: t.fan_in,
        swaps_per_hcu: t.swaps_per_hcu,
        mask_update_period: 0,
        n_workers: t.n_workers,
        seed: t.seed,
        hidden_hcus: 30,
        hidden_mcus: 100,
    };
    unsafe { *out = cfg };
}

// ---------------------------------------------------------------------------
// Datasets

/// Loads an IDX image/label pair (gzip accepted) into a new dataset handle.
///
/// # Safety
/// `images` and `labels` must be valid NUL-terminated strings; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut BcpnnDataset,
) -> BcpnnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "out is null");
        }
        let images = match cstr(images, "images path") {
            Ok(s) => PathBuf::from(s),
            Err(e) => return e,
        };
        let labels = match cstr(labels, "labels path") {
            Ok(s) => PathBuf::from(s),
            Err(e) => return e,
        };
        match load_idx(&images, &labels) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(BcpnnDataset { inner: ds }));
                BcpnnStatus::Ok
            }
            Err(e) => fail(BcpnnStatus::Data, e.to_string()),
        }
    })
}

/// Draws a labeled synthetic cluster dataset.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_dataset_synthetic(
    seed: u64,
    clusters: usize,
    samples: usize,
    features: usize,
    spread: f64,
    out: *mut *mut BcpnnDataset,
) -> BcpnnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "out is null");
        }
        if clusters == 0 || samples == 0 || features == 0 || !(spread >= 0.0) {
            return fail(
                BcpnnStatus::InvalidArgument,
                "clusters, samples, features must be positive and spread non-negative",
            );
        }
        let ds = make_synthetic_clusters(seed, clusters, samples, features, spread);
        *out = Box::into_raw(Box::new(BcpnnDataset { inner: ds }));
        BcpnnStatus::Ok
    })
}

/// Produces a complement-coded copy: each feature x becomes the pair
/// (x, 1−x). Fails on an already-encoded dataset.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_dataset_encode_complement(
    ds: *const BcpnnDataset,
    out: *mut *mut BcpnnDataset,
) -> BcpnnStatus {
    guarded(|| {
        if ds.is_null() || out.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "ds and out must be non-null");
        }
        match (*ds).inner.clone().encode_complement() {
            Ok(enc) => {
                *out = Box::into_raw(Box::new(BcpnnDataset { inner: enc }));
                BcpnnStatus::Ok
            }
            Err(e) => fail(BcpnnStatus::Data, e.to_string()),
        }
    })
}

/// Sample count; 0 for null.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_dataset_n_samples(ds: *const BcpnnDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.n_samples()
    }
}

/// Feature count per sample (after any encoding); 0 for null.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_dataset_n_features(ds: *const BcpnnDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.n_features()
    }
}

/// Frees a dataset handle; null is a no-op.
///
/// # Safety
/// `ds` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_dataset_free(ds: *mut BcpnnDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---------------------------------------------------------------------------
// Training and inference

fn geometry_for(ds: &Dataset) -> Result<(HypercolumnGeometry, HypercolumnGeometry), BcpnnStatus> {
    let input = match ds.encoding {
        Encoding::Complement => HypercolumnGeometry::new(ds.n_features() / 2, 2),
        Encoding::Raw => HypercolumnGeometry::new(ds.n_features(), 1),
    }
    .map_err(|e| fail(BcpnnStatus::Data, e.to_string()))?;
    let classes = ds.n_classes();
    if classes == 0 {
        return Err(fail(BcpnnStatus::Data, "training data has no labels"));
    }
    let output = HypercolumnGeometry::new(1, classes)
        .map_err(|e| fail(BcpnnStatus::Data, e.to_string()))?;
    Ok((input, output))
}

fn train_config(c: &BcpnnConfig) -> TrainConfig {
    TrainConfig {
        mode: arith_mode(c.mode),
        lambda_hidden: c.lambda_hidden,
        lambda_output: c.lambda_output,
        k_b: c.k_b,
        support_noise: c.support_noise,
        n_epochs1: c.n_epochs1,
        n_epochs2: c.n_epochs2,
        n_cycles: c.n_cycles,
        batch_size: c.batch_size,
        fan_in: c.fan_in,
        swaps_per_hcu: c.swaps_per_hcu,
        mask_update_period: if c.mask_update_period == 0 {
            None
        } else {
            Some(c.mask_update_period)
        },
        n_workers: c.n_workers,
        seed: c.seed,
    }
}

fn fit_any<P: bcpnn::ScalarArith>(
    p: P,
    cfg: &TrainConfig,
    hidden: HypercolumnGeometry,
    ds: &Dataset,
) -> Result<Network<P>, BcpnnStatus> {
    let (input, output) = geometry_for(ds)?;
    let mut net = build_network(p, input, hidden, output, cfg)
        .map_err(|e| fail(BcpnnStatus::Config, e.to_string()))?;
    net.fit(ds, cfg).map_err(|e| match e {
        TrainerError::MissingLabels => fail(BcpnnStatus::Data, e.to_string()),
        _ => fail(BcpnnStatus::Runtime, e.to_string()),
    })?;
    Ok(net)
}

/// Runs both training phases on `ds` per `cfg` and returns a new network
/// handle.
///
/// # Safety
/// `cfg` and `ds` must be live handles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_train(
    cfg: *const BcpnnConfig,
    ds: *const BcpnnDataset,
    out: *mut *mut BcpnnNetwork,
) -> BcpnnStatus {
    guarded(|| {
        if cfg.is_null() || ds.is_null() || out.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "cfg, ds, out must be non-null");
        }
        let c = &*cfg;
        let t = train_config(c);
        let data = &(*ds).inner;
        if let Err(e) = t.validate(data.n_features()) {
            return fail(BcpnnStatus::Config, e.to_string());
        }
        let hidden = match HypercolumnGeometry::new(c.hidden_hcus, c.hidden_mcus) {
            Ok(g) => g,
            Err(e) => return fail(BcpnnStatus::Config, e.to_string()),
        };
        let net = match t.mode {
            ArithMode::F64 => fit_any(F64Arith, &t, hidden, data).map(AnyNetwork::F64),
            ArithMode::F32 => fit_any(F32Arith, &t, hidden, data).map(AnyNetwork::F32),
            ArithMode::Reduced(f) => {
                fit_any(EmArith::new(f), &t, hidden, data).map(AnyNetwork::Reduced)
            }
        };
        match net {
            Ok(n) => {
                *out = Box::into_raw(Box::new(BcpnnNetwork { inner: n }));
                BcpnnStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Test accuracy of `net` on a labeled dataset, written to `accuracy`.
///
/// # Safety
/// `net` and `ds` must be live handles; `accuracy` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_evaluate(
    net: *const BcpnnNetwork,
    ds: *const BcpnnDataset,
    accuracy: *mut f64,
) -> BcpnnStatus {
    guarded(|| {
        if net.is_null() || ds.is_null() || accuracy.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "net, ds, accuracy must be non-null");
        }
        let data = &(*ds).inner;
        let res = match &(*net).inner {
            AnyNetwork::F64(n) => evaluate(n, data),
            AnyNetwork::F32(n) => evaluate(n, data),
            AnyNetwork::Reduced(n) => evaluate(n, data),
        };
        match res {
            Ok(a) => {
                *accuracy = a;
                BcpnnStatus::Ok
            }
            Err(TrainerError::MissingLabels) => fail(BcpnnStatus::Data, "dataset has no labels"),
            Err(e) => fail(BcpnnStatus::Runtime, e.to_string()),
        }
    })
}

/// Classifies one sample of `n_features` values (matching the network's
/// input width); the winning class index is written to `class_out`.
///
/// # Safety
/// `net` must be a live handle; `features` must point to `n_features`
/// readable floats; `class_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_predict(
    net: *const BcpnnNetwork,
    features: *const f32,
    n_features: usize,
    class_out: *mut u32,
) -> BcpnnStatus {
    guarded(|| {
        if net.is_null() || features.is_null() || class_out.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "net, features, class_out must be non-null");
        }
        let row = slice::from_raw_parts(features, n_features);
        let ds = Dataset {
            features: Mat::from_vec(1, n_features, row.to_vec()),
            labels: None,
            encoding: Encoding::Raw,
        };
        let res = match &(*net).inner {
            AnyNetwork::F64(n) => predict_batch(n, &ds),
            AnyNetwork::F32(n) => predict_batch(n, &ds),
            AnyNetwork::Reduced(n) => predict_batch(n, &ds),
        };
        match res {
            Ok(preds) => {
                *class_out = preds[0];
                BcpnnStatus::Ok
            }
            Err(e) => fail(BcpnnStatus::Runtime, e.to_string()),
        }
    })
}

/// Arithmetic mode stored in the network.
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_network_mode(net: *const BcpnnNetwork) -> BcpnnMode {
    if net.is_null() {
        return BcpnnMode::F64;
    }
    mode_tag((*net).inner.mode())
}

/// Serializes the network to the versioned binary model format.
///
/// # Safety
/// `net` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_network_save(
    net: *const BcpnnNetwork,
    path: *const c_char,
) -> BcpnnStatus {
    guarded(|| {
        if net.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "net is null");
        }
        let path = match cstr(path, "path") {
            Ok(s) => PathBuf::from(s),
            Err(e) => return e,
        };
        let bytes = match &(*net).inner {
            AnyNetwork::F64(n) => n.serialize(),
            AnyNetwork::F32(n) => n.serialize(),
            AnyNetwork::Reduced(n) => n.serialize(),
        };
        match std::fs::write(&path, bytes) {
            Ok(()) => BcpnnStatus::Ok,
            Err(e) => fail(BcpnnStatus::Runtime, format!("cannot write {}: {e}", path.display())),
        }
    })
}

/// Loads a model file into a new network handle; the arithmetic mode comes
/// from the file header.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_network_load(
    path: *const c_char,
    out: *mut *mut BcpnnNetwork,
) -> BcpnnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BcpnnStatus::InvalidArgument, "out is null");
        }
        let path = match cstr(path, "path") {
            Ok(s) => PathBuf::from(s),
            Err(e) => return e,
        };
        match AnyNetwork::load(&path) {
            Ok(n) => {
                *out = Box::into_raw(Box::new(BcpnnNetwork { inner: n }));
                BcpnnStatus::Ok
            }
            Err(e) => fail(BcpnnStatus::Runtime, e.to_string()),
        }
    })
}

/// Frees a network handle; null is a no-op.
///
/// # Safety
/// `net` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn bcpnn_network_free(net: *mut BcpnnNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
