//! Numerical kernels for the batch update rule. Every kernel is generic over
//! a [`ScalarArith`] provider and runs the identical code path in f64, f32,
//! or emulated reduced precision.
//!
//! Determinism: all accumulations have a fixed scalar order per output
//! element (samples ascending, then pre-units ascending), independent of
//! cache blocking and of how work is banded across threads. Two runs with
//! the same inputs produce bit-identical outputs at any thread count.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::mat::Mat;
use crate::model::{HypercolumnGeometry, LayerPairState};
use crate::plasticity::ConnectivityMask;
use crate::precision::ScalarArith;

/// Floor for all probability traces; keeps every log() finite.
pub const EPS_TRACE: f64 = 1e-8;

/// Column-block width for the support / outer-product loops: keeps the
/// weight panel resident in cache while a batch streams through it.
const BLOCK_J: usize = 512;

static MAC_COUNT: AtomicU64 = AtomicU64::new(0);

/// Multiply-accumulate operations executed by the support and batch-moment
/// kernels since the last reset. Skipped zero-activation terms are not
/// executed and not counted.
pub fn mac_count() -> u64 {
    MAC_COUNT.load(Ordering::Relaxed)
}

pub fn reset_mac_count() {
    MAC_COUNT.store(0, Ordering::Relaxed);
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("NaN support input")]
    NanInput,
    #[error("nonpositive trace")]
    NonpositiveTrace,
    #[error("lambda {0} outside [0, 1]")]
    LambdaRange(f64),
}

fn dims(what: &str, got: (usize, usize), want: (usize, usize)) -> KernelError {
    KernelError::DimensionMismatch(format!("{what}: got {got:?}, want {want:?}"))
}

#[inline]
fn is_zero<P: ScalarArith>(p: P, x: P::R) -> bool {
    x == p.zero()
}

/// Support: `out[b][j] = Σ_i a_pre[b][i]·w[i][j] + bias[j]`.
///
/// Terms with `a_pre[b][i] == 0` are skipped; they contribute an exact ±0
/// product whose omission cannot change any downstream activation.
pub fn compute_support<P: ScalarArith>(
    p: P,
    a_pre: &Mat<P::R>,
    state: &LayerPairState<P>,
    out: &mut Mat<P::R>,
) -> Result<(), KernelError> {
    let (n_pre, n_post) = (state.weights.rows(), state.weights.cols());
    if a_pre.cols() != n_pre {
        return Err(dims("support a_pre", (a_pre.rows(), a_pre.cols()), (a_pre.rows(), n_pre)));
    }
    if out.rows() != a_pre.rows() || out.cols() != n_post {
        return Err(dims("support out", (out.rows(), out.cols()), (a_pre.rows(), n_post)));
    }
    if state.bias.len() != n_post {
        return Err(dims("support bias", (state.bias.len(), 1), (n_post, 1)));
    }

    let nnz: u64 = a_pre
        .as_slice()
        .iter()
        .filter(|&&a| !is_zero(p, a))
        .count() as u64;
    MAC_COUNT.fetch_add(nnz * n_post as u64, Ordering::Relaxed);

    // Feature-major staging so the j-blocked loop below streams each weight
    // row slice once per batch instead of once per sample.
    let batch = a_pre.rows();
    let mut pre_t = Mat::<P::R>::zeros(n_pre, batch);
    for b in 0..batch {
        for (i, &v) in a_pre.row(b).iter().enumerate() {
            pre_t.set(i, b, v);
        }
    }
    let pre_t = &pre_t;

    let weights = &state.weights;
    let bias = &state.bias;
    let bands = rayon::current_num_threads().max(1);
    let rows_per_band = batch.div_ceil(bands).max(1);
    out.as_mut_slice()
        .par_chunks_mut(rows_per_band * n_post)
        .enumerate()
        .for_each(|(band, out_band)| {
            let _flush = p.flush_scope();
            let b0 = band * rows_per_band;
            let nb = out_band.len() / n_post;
            for j0 in (0..n_post).step_by(BLOCK_J) {
                let j1 = (j0 + BLOCK_J).min(n_post);
                for out_row in out_band.chunks_mut(n_post) {
                    out_row[j0..j1].copy_from_slice(&bias[j0..j1]);
                }
                // Per (sample, j): bias first, then pre-units ascending —
                // the same per-entry sequence as a sample-major traversal.
                for i in 0..n_pre {
                    let trow = &pre_t.row(i)[b0..b0 + nb];
                    let wrow = &weights.row(i)[j0..j1];
                    for (br, &a) in trow.iter().enumerate() {
                        if is_zero(p, a) {
                            continue;
                        }
                        let acc = &mut out_band[br * n_post + j0..br * n_post + j1];
                        for (o, &w) in acc.iter_mut().zip(wrow) {
                            *o = p.add_raw(*o, p.mul_raw(a, w));
                        }
                    }
                }
            }
        });
    Ok(())
}

/// Per-sample, per-HCU softmax with max subtraction:
/// `out = exp(s − max_HCU s) / Σ_HCU exp(s − max_HCU s)`.
pub fn hcu_softmax<P: ScalarArith>(
    p: P,
    support: &Mat<P::R>,
    geom: &HypercolumnGeometry,
    out: &mut Mat<P::R>,
) -> Result<(), KernelError> {
    let n = geom.total_units();
    if support.cols() != n {
        return Err(dims("softmax support", (support.rows(), support.cols()), (support.rows(), n)));
    }
    if out.rows() != support.rows() || out.cols() != n {
        return Err(dims("softmax out", (out.rows(), out.cols()), (support.rows(), n)));
    }
    let m = geom.mcus_per_hcu;
    let nan_hit = AtomicU64::new(0);
    out.as_mut_slice()
        .par_chunks_mut(n)
        .zip(support.as_slice().par_chunks(n))
        .for_each(|(orow, srow)| {
            for h in 0..geom.n_hcus {
                let s = &srow[h * m..(h + 1) * m];
                let o = &mut orow[h * m..(h + 1) * m];
                let mut mx = s[0];
                for &v in s {
                    if p.is_nan(v) {
                        nan_hit.store(1, Ordering::Relaxed);
                        return;
                    }
                    mx = p.max(mx, v);
                }
                let mut sum = p.zero();
                for (oj, &sj) in o.iter_mut().zip(s) {
                    let e = p.exp(p.sub(sj, mx));
                    *oj = e;
                    sum = p.add(sum, e);
                }
                for oj in o.iter_mut() {
                    *oj = p.div(*oj, sum);
                }
            }
        });
    if nan_hit.load(Ordering::Relaxed) != 0 {
        return Err(KernelError::NanInput);
    }
    Ok(())
}

/// Batch moment accumulator: means of `a_pre`, `a_post`, and their outer
/// product over the batch, all in provider arithmetic (sum samples
/// ascending, one division by the sample count at the end).
pub struct Moments<P: ScalarArith> {
    pub mean_pre: Vec<P::R>,
    pub mean_post: Vec<P::R>,
    pub mean_outer: Mat<P::R>,
    /// Samples the moments were taken over.
    pub count: usize,
    /// Feature-major staging of `a_pre`, kept to size the next reuse.
    scratch: Mat<P::R>,
}

impl<P: ScalarArith> Moments<P> {
    pub fn new(n_pre: usize, n_post: usize) -> Self {
        Moments {
            mean_pre: vec![P::R::default(); n_pre],
            mean_post: vec![P::R::default(); n_post],
            mean_outer: Mat::zeros(n_pre, n_post),
            count: 0,
            scratch: Mat::zeros(0, 0),
        }
    }
}

/// Computes batch moments of one (sub-)batch into `out`.
pub fn batch_moments<P: ScalarArith>(
    p: P,
    a_pre: &Mat<P::R>,
    a_post: &Mat<P::R>,
    out: &mut Moments<P>,
) -> Result<(), KernelError> {
    batch_moments_range(p, a_pre, a_post, 0..a_pre.rows(), out)
}

/// Moments over the row span `rows` only — the per-worker view of a batch.
/// Accumulation order per entry is rows ascending, exactly as the full-batch
/// call visits that span.
pub fn batch_moments_range<P: ScalarArith>(
    p: P,
    a_pre: &Mat<P::R>,
    a_post: &Mat<P::R>,
    rows: std::ops::Range<usize>,
    out: &mut Moments<P>,
) -> Result<(), KernelError> {
    let (n_pre, n_post) = (out.mean_outer.rows(), out.mean_outer.cols());
    if a_pre.cols() != n_pre || a_post.cols() != n_post || a_pre.rows() != a_post.rows() {
        return Err(dims(
            "moments",
            (a_pre.cols(), a_post.cols()),
            (n_pre, n_post),
        ));
    }
    if rows.end > a_pre.rows() || rows.start > rows.end {
        return Err(dims("moments rows", (rows.start, rows.end), (a_pre.rows(), 0)));
    }
    let batch = rows.len();
    if batch == 0 {
        return Err(KernelError::DimensionMismatch("empty batch".into()));
    }
    let r0 = rows.start;
    out.count = batch;
    let inv = p.div(p.ingest(1.0), p.ingest(batch as f64));

    // Feature-major copy of the batch so the per-feature loops below stream
    // contiguously and zero-skip on the pre side.
    if out.scratch.rows() != n_pre || out.scratch.cols() != batch {
        out.scratch = Mat::zeros(n_pre, batch);
    }
    for b in 0..batch {
        let row = a_pre.row(r0 + b);
        for (i, &v) in row.iter().enumerate() {
            out.scratch.set(i, b, v);
        }
    }
    let pre_t = &out.scratch;

    let nnz: u64 = pre_t
        .as_slice()
        .iter()
        .filter(|&&a| !is_zero(p, a))
        .count() as u64;
    MAC_COUNT.fetch_add(nnz * n_post as u64, Ordering::Relaxed);

    // mean_post: samples ascending per output unit.
    for v in out.mean_post.iter_mut() {
        *v = p.zero();
    }
    for b in 0..batch {
        let row = a_post.row(r0 + b);
        for (s, &v) in out.mean_post.iter_mut().zip(row) {
            *s = p.add(*s, v);
        }
    }
    for v in out.mean_post.iter_mut() {
        *v = p.mul(*v, inv);
    }

    // mean_pre and the outer product share the feature-major pass; bands of
    // pre-units are disjoint, so this parallelizes without changing the
    // per-entry accumulation order. Inside a band the post dimension is
    // blocked so the touched slice of `a_post` stays cache-resident; each
    // outer-product entry still accumulates samples ascending.
    let mean_pre = &mut out.mean_pre;
    let bands = rayon::current_num_threads().max(1);
    let rows_per_band = n_pre.div_ceil(bands).max(1);
    out.mean_outer
        .as_mut_slice()
        .par_chunks_mut(rows_per_band * n_post)
        .zip(mean_pre.par_chunks_mut(rows_per_band))
        .enumerate()
        .for_each(|(band, (outer_band, pre_band))| {
            let _flush = p.flush_scope();
            let i0 = band * rows_per_band;
            for j0 in (0..n_post).step_by(BLOCK_J) {
                let j1 = (j0 + BLOCK_J).min(n_post);
                for (ir, mpre) in pre_band.iter_mut().enumerate() {
                    let trow = pre_t.row(i0 + ir);
                    let orow = &mut outer_band[ir * n_post + j0..ir * n_post + j1];
                    let mut s = p.zero();
                    for o in orow.iter_mut() {
                        *o = p.zero();
                    }
                    for (b, &a) in trow.iter().enumerate() {
                        if is_zero(p, a) {
                            continue;
                        }
                        if j0 == 0 {
                            s = p.add(s, a);
                        }
                        let prow = &a_post.row(r0 + b)[j0..j1];
                        for (o, &q) in orow.iter_mut().zip(prow) {
                            *o = p.add_raw(*o, p.mul_raw(a, q));
                        }
                    }
                    if j0 == 0 {
                        *mpre = p.mul(s, inv);
                    }
                    for o in orow.iter_mut() {
                        *o = p.mul(*o, inv);
                    }
                }
            }
        });
    Ok(())
}

/// EWMA application: `trace ← (1−λ)·trace + λ·mean`, then clamp to
/// [`EPS_TRACE`], for all three traces.
pub fn apply_ewma<P: ScalarArith>(
    p: P,
    state: &mut LayerPairState<P>,
    moments: &Moments<P>,
    lambda: f64,
) -> Result<(), KernelError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(KernelError::LambdaRange(lambda));
    }
    let (n_pre, n_post) = (state.weights.rows(), state.weights.cols());
    if moments.mean_pre.len() != n_pre
        || moments.mean_post.len() != n_post
        || moments.mean_outer.rows() != n_pre
        || moments.mean_outer.cols() != n_post
    {
        return Err(dims(
            "ewma moments",
            (moments.mean_pre.len(), moments.mean_post.len()),
            (n_pre, n_post),
        ));
    }
    let keep = p.ingest(1.0 - lambda);
    let lam = p.ingest(lambda);
    let eps = p.ingest(EPS_TRACE);
    let blend = |t: &mut P::R, m: P::R| {
        let v = p.add(p.mul(keep, *t), p.mul(lam, m));
        *t = if v < eps { eps } else { v };
    };
    for (t, &m) in state.trace_ci.iter_mut().zip(&moments.mean_pre) {
        blend(t, m);
    }
    for (t, &m) in state.trace_cj.iter_mut().zip(&moments.mean_post) {
        blend(t, m);
    }
    state
        .trace_cij
        .as_mut_slice()
        .par_chunks_mut(n_post)
        .zip(moments.mean_outer.as_slice().par_chunks(n_post))
        .for_each(|(trow, mrow)| {
            for (t, &m) in trow.iter_mut().zip(mrow) {
                blend(t, m);
            }
        });
    Ok(())
}

/// One-call marginal update: batch moments followed by the EWMA blend.
/// The trainer's data-parallel path computes the same moments in sub-batches
/// and recombines them before the identical blend.
pub fn update_marginals<P: ScalarArith>(
    p: P,
    state: &mut LayerPairState<P>,
    a_pre: &Mat<P::R>,
    a_post: &Mat<P::R>,
    lambda: f64,
) -> Result<(), KernelError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(KernelError::LambdaRange(lambda));
    }
    let mut m = Moments::new(state.weights.rows(), state.weights.cols());
    batch_moments(p, a_pre, a_post, &mut m)?;
    apply_ewma(p, state, &m, lambda)
}

/// Weight/bias refresh from the traces:
/// `w[i][j] = ln(C_ij/(C_i·C_j))`, `bias[j] = k_b·ln(C_j)`.
pub fn update_weights_bias<P: ScalarArith>(
    p: P,
    state: &mut LayerPairState<P>,
    k_b: f64,
) -> Result<(), KernelError> {
    let n_post = state.weights.cols();
    let zero = p.zero();
    if state.trace_ci.iter().any(|&c| !(c > zero)) || state.trace_cj.iter().any(|&c| !(c > zero)) {
        return Err(KernelError::NonpositiveTrace);
    }
    let kb = p.ingest(k_b);
    for (b, &cj) in state.bias.iter_mut().zip(&state.trace_cj) {
        *b = p.mul(kb, p.ln(cj));
    }
    let trace_ci = &state.trace_ci;
    let trace_cj = &state.trace_cj;
    let bad = AtomicU64::new(0);
    state
        .weights
        .as_mut_slice()
        .par_chunks_mut(n_post)
        .zip(state.trace_cij.as_slice().par_chunks(n_post))
        .zip(trace_ci.par_iter())
        .for_each(|((wrow, crow), &ci)| {
            for ((w, &cij), &cj) in wrow.iter_mut().zip(crow).zip(trace_cj) {
                if !(cij > zero) {
                    bad.store(1, Ordering::Relaxed);
                    return;
                }
                *w = p.ln(p.div(cij, p.mul(ci, cj)));
            }
        });
    if bad.load(Ordering::Relaxed) != 0 {
        return Err(KernelError::NonpositiveTrace);
    }
    Ok(())
}

/// Zeroes the weights of silenced (feature, hidden-HCU) pairs. Traces are
/// never masked.
pub fn apply_mask<P: ScalarArith>(
    p: P,
    state: &mut LayerPairState<P>,
    mask: &ConnectivityMask,
    post_geom: &HypercolumnGeometry,
) -> Result<(), KernelError> {
    check_mask_dims(state, mask, post_geom)?;
    let m = post_geom.mcus_per_hcu;
    let n_post = post_geom.total_units();
    state
        .weights
        .as_mut_slice()
        .par_chunks_mut(n_post)
        .enumerate()
        .for_each(|(i, wrow)| {
            for h in 0..mask.n_hcus() {
                if !mask.is_active(i, h) {
                    for w in &mut wrow[h * m..(h + 1) * m] {
                        *w = p.zero();
                    }
                }
            }
        });
    Ok(())
}

/// Fused weight refresh + mask: bit-identical to `update_weights_bias`
/// followed by `apply_mask`, but only evaluates logs on active entries.
pub fn update_weights_bias_masked<P: ScalarArith>(
    p: P,
    state: &mut LayerPairState<P>,
    k_b: f64,
    mask: &ConnectivityMask,
    post_geom: &HypercolumnGeometry,
) -> Result<(), KernelError> {
    check_mask_dims(state, mask, post_geom)?;
    let n_post = state.weights.cols();
    let zero = p.zero();
    if state.trace_ci.iter().any(|&c| !(c > zero)) || state.trace_cj.iter().any(|&c| !(c > zero)) {
        return Err(KernelError::NonpositiveTrace);
    }
    let kb = p.ingest(k_b);
    for (b, &cj) in state.bias.iter_mut().zip(&state.trace_cj) {
        *b = p.mul(kb, p.ln(cj));
    }
    let m = post_geom.mcus_per_hcu;
    let trace_ci = &state.trace_ci;
    let trace_cj = &state.trace_cj;
    let bad = AtomicU64::new(0);
    state
        .weights
        .as_mut_slice()
        .par_chunks_mut(n_post)
        .zip(state.trace_cij.as_slice().par_chunks(n_post))
        .enumerate()
        .for_each(|(i, (wrow, crow))| {
            let ci = trace_ci[i];
            for h in 0..mask.n_hcus() {
                let cols = h * m..(h + 1) * m;
                if mask.is_active(i, h) {
                    for ((w, &cij), &cj) in wrow[cols.clone()]
                        .iter_mut()
                        .zip(&crow[cols.clone()])
                        .zip(&trace_cj[cols])
                    {
                        if !(cij > zero) {
                            bad.store(1, Ordering::Relaxed);
                            return;
                        }
                        *w = p.ln(p.div(cij, p.mul(ci, cj)));
                    }
                } else {
                    for w in &mut wrow[cols] {
                        *w = p.zero();
                    }
                }
            }
        });
    if bad.load(Ordering::Relaxed) != 0 {
        return Err(KernelError::NonpositiveTrace);
    }
    Ok(())
}

fn check_mask_dims<P: ScalarArith>(
    state: &LayerPairState<P>,
    mask: &ConnectivityMask,
    post_geom: &HypercolumnGeometry,
) -> Result<(), KernelError> {
    if mask.n_features() != state.weights.rows()
        || mask.n_hcus() != post_geom.n_hcus
        || post_geom.total_units() != state.weights.cols()
    {
        return Err(dims(
            "mask",
            (mask.n_features(), mask.n_hcus()),
            (state.weights.rows(), post_geom.n_hcus),
        ));
    }
    Ok(())
}

/// Per-sample argmax over the (single-HCU) output activity; ties take the
/// lowest class index.
pub fn predict_classes<R: Copy + Default + PartialOrd>(a_out: &Mat<R>) -> Vec<u32> {
    (0..a_out.rows())
        .map(|b| {
            let row = a_out.row(b);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}
