//! Training orchestration: the unsupervised input→hidden phase, the
//! supervised hidden→output phase, evaluation, the in-process data-parallel
//! batch reducer, and the analytic cost model.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::kernels::{self, KernelError, Moments};
use crate::mat::Mat;
use crate::model::{HypercolumnGeometry, LayerPairState, ModelError, Network, TrainConfig};
use crate::plasticity::{self, PlasticityError};
use crate::precision::ScalarArith;

/// Rows per forward-pass chunk outside training batches (evaluation,
/// hidden-code caching). Per-row results are independent of the chunking.
const FORWARD_CHUNK: usize = 512;

const HIDDEN_PHASE: u64 = 0;
const OUTPUT_PHASE: u64 = 1;

/// Per-epoch shuffle stream. The purpose tag occupies the high word, so
/// these can never collide with the mask/synthetic streams (low-word tags).
fn shuffle_stream(phase: u64, epoch: usize) -> u64 {
    (0x7368_7566u64 << 32) | (phase << 24) | (epoch as u64 & 0x00ff_ffff)
}

/// Per-epoch support-noise stream, disjoint from every shuffle stream.
fn noise_stream(epoch: usize) -> u64 {
    (0x6e6f_6973u64 << 32) | (epoch as u64)
}

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {got} features but the input layer expects {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("dataset has no labels")]
    MissingLabels,
    #[error("label {label} outside the {n_classes}-class output layer")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error("n_workers = {n_workers} exceeds batch_size = {batch_size}")]
    WorkersExceedBatch { n_workers: usize, batch_size: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Plasticity(#[from] PlasticityError),
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub wall_seconds: f64,
    pub images_per_sec: f64,
    /// Mask swaps executed this epoch (always 0 in the supervised phase).
    pub mask_swaps: u64,
    /// Max-norm of the trained pair's joint trace.
    pub trace_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub phase: &'static str,
    pub epochs: Vec<EpochStats>,
    /// Path of the last saved snapshot, when the caller checkpoints.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    fn new(phase: &'static str) -> Self {
        TrainReport {
            phase,
            epochs: Vec::new(),
            checkpoint: None,
        }
    }
}

/// In-process stand-in for the distributed mean reduction: a batch is cut
/// into `n_workers` contiguous sub-batches, each worker computes partial
/// moments, and the partials combine by a weighted mean in fixed worker
/// order: m = Σ_k (n_k / n) · m_k, in provider arithmetic. One worker
/// short-circuits to the plain single-pass kernel.
pub struct WorkerPool<P: ScalarArith> {
    n_workers: usize,
    partials: Vec<Moments<P>>,
    combined: Moments<P>,
}

impl<P: ScalarArith> WorkerPool<P> {
    pub fn new(n_workers: usize, n_pre: usize, n_post: usize) -> Self {
        assert!(n_workers >= 1, "worker pool needs at least one worker");
        let partials = if n_workers > 1 {
            (0..n_workers).map(|_| Moments::new(n_pre, n_post)).collect()
        } else {
            Vec::new()
        };
        WorkerPool {
            n_workers,
            partials,
            combined: Moments::new(n_pre, n_post),
        }
    }

    /// Contiguous balanced sub-batch spans, all non-empty (`n ≤ rows`).
    fn spans(rows: usize, n: usize) -> Vec<Range<usize>> {
        let (base, rem) = (rows / n, rows % n);
        let mut out = Vec::with_capacity(n);
        let mut at = 0;
        for k in 0..n {
            let len = base + usize::from(k < rem);
            out.push(at..at + len);
            at += len;
        }
        out
    }

    pub fn moments(
        &mut self,
        p: P,
        a_pre: &Mat<P::R>,
        a_post: &Mat<P::R>,
    ) -> Result<&Moments<P>, TrainerError> {
        let rows = a_pre.rows();
        // A trailing partial batch may carry fewer rows than workers; the
        // surplus workers simply get no sub-batch.
        let n_eff = self.n_workers.min(rows);
        if n_eff <= 1 {
            kernels::batch_moments(p, a_pre, a_post, &mut self.combined)?;
            return Ok(&self.combined);
        }
        let spans = Self::spans(rows, n_eff);
        for (part, span) in self.partials[..n_eff].iter_mut().zip(&spans) {
            kernels::batch_moments_range(p, a_pre, a_post, span.clone(), part)?;
        }
        let total = p.ingest(rows as f64);
        let c = &mut self.combined;
        c.count = rows;
        for v in c.mean_pre.iter_mut() {
            *v = p.zero();
        }
        for v in c.mean_post.iter_mut() {
            *v = p.zero();
        }
        for v in c.mean_outer.as_mut_slice().iter_mut() {
            *v = p.zero();
        }
        for (part, span) in self.partials[..n_eff].iter().zip(&spans) {
            let ratio = p.div(p.ingest(span.len() as f64), total);
            for (acc, &m) in c.mean_pre.iter_mut().zip(&part.mean_pre) {
                *acc = p.add(*acc, p.mul(ratio, m));
            }
            for (acc, &m) in c.mean_post.iter_mut().zip(&part.mean_post) {
                *acc = p.add(*acc, p.mul(ratio, m));
            }
            for (acc, &m) in c
                .mean_outer
                .as_mut_slice()
                .iter_mut()
                .zip(part.mean_outer.as_slice())
            {
                *acc = p.add(*acc, p.mul(ratio, m));
            }
        }
        Ok(&self.combined)
    }
}

fn check_input<P: ScalarArith>(net: &Network<P>, ds: &Dataset) -> Result<(), TrainerError> {
    if ds.n_samples() == 0 {
        return Err(TrainerError::EmptyDataset);
    }
    let expected = net.input.total_units();
    if ds.n_features() != expected {
        return Err(TrainerError::FeatureDimMismatch {
            expected,
            got: ds.n_features(),
        });
    }
    Ok(())
}

fn check_workers(config: &TrainConfig) -> Result<(), TrainerError> {
    if config.n_workers > config.batch_size {
        return Err(TrainerError::WorkersExceedBatch {
            n_workers: config.n_workers,
            batch_size: config.batch_size,
        });
    }
    Ok(())
}

/// Ingests the selected sample rows into provider representation.
fn gather_batch<P: ScalarArith>(p: P, ds: &Dataset, idx: &[u32]) -> Mat<P::R> {
    let mut out = Mat::zeros(idx.len(), ds.n_features());
    for (dst, &src) in idx.iter().enumerate() {
        for (o, &x) in out.row_mut(dst).iter_mut().zip(ds.features.row(src as usize)) {
            *o = p.ingest(f64::from(x));
        }
    }
    out
}

fn epoch_permutation(seed: u64, phase: u64, epoch: usize, n: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shuffle_stream(phase, epoch));
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Support + per-HCU softmax through one pair.
fn forward_pair<P: ScalarArith>(
    p: P,
    pair: &LayerPairState<P>,
    post_geom: &HypercolumnGeometry,
    a_pre: &Mat<P::R>,
) -> Result<Mat<P::R>, KernelError> {
    let mut support = Mat::zeros(a_pre.rows(), pair.weights.cols());
    kernels::compute_support(p, a_pre, pair, &mut support)?;
    let mut act = Mat::zeros(support.rows(), support.cols());
    kernels::hcu_softmax(p, &support, post_geom, &mut act)?;
    Ok(act)
}

fn trace_max<P: ScalarArith>(p: P, pair: &LayerPairState<P>) -> f64 {
    pair.trace_cij
        .as_slice()
        .iter()
        .map(|&v| p.emit(v).abs())
        .fold(0.0, f64::max)
}

/// Unsupervised phase: per epoch, shuffle; per batch, optionally rewire the
/// mask, forward the batch through the hidden pair, then run `n_cycles` of
/// trace blending and masked weight/bias rebuilds.
///
/// The support matrix receives seeded Gaussian noise before the softmax
/// (training only): the MCUs of an HCU start from identical weights and
/// share one mask column, so noiseless dynamics would keep them identical
/// forever.
pub fn fit_hidden<P: ScalarArith>(
    net: &mut Network<P>,
    ds: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport, TrainerError> {
    fit_hidden_with(net, ds, config, |_, _| {})
}

pub fn fit_hidden_with<P, F>(
    net: &mut Network<P>,
    ds: &Dataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport, TrainerError>
where
    P: ScalarArith,
    F: FnMut(&Network<P>, &EpochStats),
{
    let p = net.provider;
    check_input(net, ds)?;
    config.validate(ds.n_features())?;
    check_workers(config)?;
    let n = ds.n_samples();
    let period = config.mask_period(&net.hidden);
    let mut pool = WorkerPool::new(
        config.n_workers,
        net.input.total_units(),
        net.hidden.total_units(),
    );
    let mut report = TrainReport::new("hidden");
    for epoch in 0..config.n_epochs1 {
        let t0 = Instant::now();
        let mut swaps = 0u64;
        let idx = epoch_permutation(config.seed, HIDDEN_PHASE, epoch, n);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(noise_stream(epoch));
        let noise = Normal::new(0.0, config.support_noise)
            .expect("validated: finite σ ≥ 0");
        for (b_ix, batch_idx) in idx.chunks(config.batch_size).enumerate() {
            // Batch counter is 1-based and resets every epoch.
            if (b_ix + 1) % period == 0 {
                let scores = plasticity::mi_scores(p, &net.hidden_pair, &net.hidden)?;
                swaps += plasticity::rewire(&mut net.mask, &scores, config.swaps_per_hcu)?;
            }
            let a_pre = gather_batch(p, ds, batch_idx);
            let mut support = Mat::zeros(a_pre.rows(), net.hidden.total_units());
            kernels::compute_support(p, &a_pre, &net.hidden_pair, &mut support)?;
            if config.support_noise > 0.0 {
                for v in support.as_mut_slice() {
                    *v = p.add(*v, p.ingest(noise.sample(&mut noise_rng)));
                }
            }
            let mut act = Mat::zeros(support.rows(), support.cols());
            kernels::hcu_softmax(p, &support, &net.hidden, &mut act)?;
            // The batch activations are fixed across the cycle loop, so the
            // moments are computed once; re-running the blend each cycle is
            // bit-identical to recomputing them.
            let m = pool.moments(p, &a_pre, &act)?;
            for _ in 0..config.n_cycles {
                kernels::apply_ewma(p, &mut net.hidden_pair, m, config.lambda_hidden)?;
                kernels::update_weights_bias_masked(
                    p,
                    &mut net.hidden_pair,
                    config.k_b,
                    &net.mask,
                    &net.hidden,
                )?;
            }
        }
        let wall = t0.elapsed().as_secs_f64();
        let stats = EpochStats {
            epoch,
            wall_seconds: wall,
            images_per_sec: n as f64 / wall.max(1e-12),
            mask_swaps: swaps,
            trace_max: trace_max(p, &net.hidden_pair),
        };
        on_epoch(net, &stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Hidden activations for the whole dataset, in dataset order. Valid while
/// the hidden pair is frozen; each row's forward pass is independent of the
/// chunking, so this equals any per-batch forward bit-for-bit.
fn hidden_codes<P: ScalarArith>(
    net: &Network<P>,
    ds: &Dataset,
) -> Result<Mat<P::R>, TrainerError> {
    let p = net.provider;
    let n = ds.n_samples();
    let mut codes = Mat::zeros(n, net.hidden.total_units());
    let idx: Vec<u32> = (0..n as u32).collect();
    for chunk in idx.chunks(FORWARD_CHUNK) {
        let a_pre = gather_batch(p, ds, chunk);
        let act = forward_pair(p, &net.hidden_pair, &net.hidden, &a_pre)?;
        let base = chunk[0] as usize;
        for r in 0..act.rows() {
            codes.row_mut(base + r).copy_from_slice(act.row(r));
        }
    }
    Ok(codes)
}

/// Supervised phase: hidden pair frozen, output activity clamped to one-hot
/// labels, dense (unmasked) weight/bias updates on the hidden→output pair.
pub fn fit_output<P: ScalarArith>(
    net: &mut Network<P>,
    ds: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport, TrainerError> {
    fit_output_with(net, ds, config, |_, _| {})
}

pub fn fit_output_with<P, F>(
    net: &mut Network<P>,
    ds: &Dataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport, TrainerError>
where
    P: ScalarArith,
    F: FnMut(&Network<P>, &EpochStats),
{
    let p = net.provider;
    check_input(net, ds)?;
    config.validate(ds.n_features())?;
    check_workers(config)?;
    let labels = ds.labels.as_ref().ok_or(TrainerError::MissingLabels)?;
    let n_classes = net.output.total_units();
    if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= n_classes) {
        return Err(TrainerError::LabelOutOfRange {
            label: bad,
            n_classes,
        });
    }
    let codes = hidden_codes(net, ds)?;
    let n = ds.n_samples();
    let one = p.ingest(1.0);
    let mut pool = WorkerPool::new(config.n_workers, net.hidden.total_units(), n_classes);
    let mut report = TrainReport::new("output");
    for epoch in 0..config.n_epochs2 {
        let t0 = Instant::now();
        let idx = epoch_permutation(config.seed, OUTPUT_PHASE, epoch, n);
        for batch_idx in idx.chunks(config.batch_size) {
            let rows = batch_idx.len();
            let mut a_pre = Mat::zeros(rows, codes.cols());
            let mut a_post = Mat::zeros(rows, n_classes);
            for (r, &src) in batch_idx.iter().enumerate() {
                a_pre.row_mut(r).copy_from_slice(codes.row(src as usize));
                a_post.set(r, labels[src as usize] as usize, one);
            }
            let m = pool.moments(p, &a_pre, &a_post)?;
            for _ in 0..config.n_cycles {
                kernels::apply_ewma(p, &mut net.output_pair, m, config.lambda_output)?;
                kernels::update_weights_bias(p, &mut net.output_pair, config.k_b)?;
            }
        }
        let wall = t0.elapsed().as_secs_f64();
        let stats = EpochStats {
            epoch,
            wall_seconds: wall,
            images_per_sec: n as f64 / wall.max(1e-12),
            mask_swaps: 0,
            trace_max: trace_max(p, &net.output_pair),
        };
        on_epoch(net, &stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Predicted class per sample under the noise-free forward pass (support →
/// per-HCU softmax at both stages, lowest-index tie-break). Labels are not
/// consulted.
pub fn predict_batch<P: ScalarArith>(
    net: &Network<P>,
    ds: &Dataset,
) -> Result<Vec<u32>, TrainerError> {
    check_input(net, ds)?;
    let p = net.provider;
    let mut preds = Vec::with_capacity(ds.n_samples());
    let idx: Vec<u32> = (0..ds.n_samples() as u32).collect();
    for chunk in idx.chunks(FORWARD_CHUNK) {
        let a_pre = gather_batch(p, ds, chunk);
        let hid = forward_pair(p, &net.hidden_pair, &net.hidden, &a_pre)?;
        let out = forward_pair(p, &net.output_pair, &net.output, &hid)?;
        preds.extend(kernels::predict_classes(&out));
    }
    Ok(preds)
}

/// Fraction of correctly classified samples.
pub fn evaluate<P: ScalarArith>(net: &Network<P>, ds: &Dataset) -> Result<f64, TrainerError> {
    let labels = ds.labels.as_ref().ok_or(TrainerError::MissingLabels)?;
    let preds = predict_batch(net, ds)?;
    let correct = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / ds.n_samples() as f64)
}

/// Analytic per-epoch multiply-accumulate bound of the unsupervised phase:
/// n_cycles · N_B · B_S · N_H · (N_F + N_O), constant factor 1.
pub fn estimate_cost(
    config: &TrainConfig,
    n_batches: usize,
    input: &HypercolumnGeometry,
    hidden: &HypercolumnGeometry,
    output: &HypercolumnGeometry,
) -> u64 {
    (config.n_cycles as u64)
        * (n_batches as u64)
        * (config.batch_size as u64)
        * (hidden.total_units() as u64)
        * ((input.total_units() + output.total_units()) as u64)
}

impl<P: ScalarArith> Network<P> {
    /// Both training phases back to back.
    pub fn fit(
        &mut self,
        ds: &Dataset,
        config: &TrainConfig,
    ) -> Result<(TrainReport, TrainReport), TrainerError> {
        let hidden = fit_hidden(self, ds, config)?;
        let output = fit_output(self, ds, config)?;
        Ok((hidden, output))
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<f64, TrainerError> {
        evaluate(self, ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_clusters;
    use crate::model::build_network;
    use crate::precision::F64Arith;

    fn geom(h: usize, m: usize) -> HypercolumnGeometry {
        HypercolumnGeometry::new(h, m).unwrap()
    }

    /// Complement-encoded cluster data plus a network sized for it.
    fn cluster_setup(
        n_clusters: usize,
        n_samples: usize,
        raw_features: usize,
        spread: f64,
        hidden: HypercolumnGeometry,
        config: &TrainConfig,
    ) -> (Dataset, Network<F64Arith>) {
        let ds = make_synthetic_clusters(9, n_clusters, n_samples, raw_features, spread)
            .encode_complement()
            .unwrap();
        let net = build_network(
            F64Arith,
            geom(raw_features, 2),
            hidden,
            geom(1, n_clusters),
            config,
        )
        .unwrap();
        (ds, net)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            fan_in: 8,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let cfg = TrainConfig {
            n_epochs1: 0,
            n_epochs2: 0,
            ..small_config()
        };
        let (ds, mut net) = cluster_setup(2, 32, 4, 0.1, geom(2, 2), &cfg);
        let before = net.clone();
        fit_hidden(&mut net, &ds, &cfg).unwrap();
        fit_output(&mut net, &ds, &cfg).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn two_mcus_separate_two_clusters() {
        let cfg = TrainConfig {
            lambda_hidden: 0.05,
            n_epochs1: 5,
            batch_size: 16,
            fan_in: 12,
            support_noise: 0.1,
            seed: 3,
            ..TrainConfig::default()
        };
        let (ds, mut net) = cluster_setup(2, 256, 6, 0.03, geom(1, 2), &cfg);
        fit_hidden(&mut net, &ds, &cfg).unwrap();

        // Cluster-mean inputs; the winning MCU must differ between them.
        let p = net.provider;
        let labels = ds.labels.as_ref().unwrap();
        let mut winners = Vec::new();
        for class in 0..2u32 {
            let rows: Vec<u32> = (0..ds.n_samples() as u32)
                .filter(|&b| labels[b as usize] == class)
                .collect();
            let mut mean = Mat::<f64>::zeros(1, ds.n_features());
            for &b in &rows {
                for (m, &x) in mean.row_mut(0).iter_mut().zip(ds.features.row(b as usize)) {
                    *m += f64::from(x) / rows.len() as f64;
                }
            }
            let mut a = Mat::zeros(1, ds.n_features());
            for (o, &x) in a.row_mut(0).iter_mut().zip(mean.row(0)) {
                *o = p.ingest(x);
            }
            let mut support = Mat::zeros(1, 2);
            kernels::compute_support(p, &a, &net.hidden_pair, &mut support).unwrap();
            let s = support.row(0);
            winners.push(usize::from(s[1] > s[0]));
        }
        assert_ne!(winners[0], winners[1], "both cluster means drive the same MCU");
    }

    #[test]
    fn single_class_lambda_one_concentrates_bias() {
        let cfg = TrainConfig {
            lambda_output: 1.0,
            n_epochs1: 0,
            n_epochs2: 1,
            batch_size: 32,
            fan_in: 8,
            support_noise: 0.0,
            ..TrainConfig::default()
        };
        let (mut ds, mut net) = cluster_setup(3, 32, 4, 0.1, geom(2, 2), &cfg);
        ds.labels = Some(vec![0; ds.n_samples()]);
        fit_output(&mut net, &ds, &cfg).unwrap();
        let p = net.provider;
        let bias: Vec<f64> = net.output_pair.bias.iter().map(|&b| p.emit(b)).collect();
        assert!(bias[1] < bias[0] && bias[2] < bias[0], "bias = {bias:?}");
    }

    /// A large k_b makes the ln C_j prior a winner-locks-in feedback that
    /// collapses several clusters onto one MCU; small k_b plus noise lets
    /// the competition assign every cluster its own unit.
    #[test]
    fn memorized_clusters_evaluate_perfectly() {
        let cfg = TrainConfig {
            lambda_hidden: 0.2,
            lambda_output: 0.2,
            k_b: 0.1,
            n_epochs1: 40,
            n_epochs2: 30,
            batch_size: 8,
            fan_in: 16,
            support_noise: 1.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (ds, mut net) = cluster_setup(4, 64, 8, 0.01, geom(4, 4), &cfg);
        net.fit(&ds, &cfg).unwrap();
        assert_eq!(net.evaluate(&ds).unwrap(), 1.0);
    }

    #[test]
    fn untrained_network_predicts_class_zero() {
        let cfg = small_config();
        let (mut ds, net) = cluster_setup(5, 40, 4, 0.2, geom(2, 3), &cfg);
        // Balanced labels over 5 classes; w = 0 ⇒ uniform output ⇒ the
        // tie-break always picks class 0.
        let class0 = ds
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .filter(|&&l| l == 0)
            .count();
        assert_eq!(
            net.evaluate(&ds).unwrap(),
            class0 as f64 / ds.n_samples() as f64
        );
        ds.labels = None;
        assert!(matches!(net.evaluate(&ds), Err(TrainerError::MissingLabels)));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let cfg = small_config();
        let (mut ds, mut net) = cluster_setup(2, 32, 4, 0.1, geom(2, 2), &cfg);
        ds.labels.as_mut().unwrap()[3] = 7;
        assert!(matches!(
            fit_output(&mut net, &ds, &cfg),
            Err(TrainerError::LabelOutOfRange { label: 7, n_classes: 2 })
        ));
    }

    #[test]
    fn dimension_and_emptiness_guards() {
        let cfg = small_config();
        let (ds, mut net) = cluster_setup(2, 32, 4, 0.1, geom(2, 2), &cfg);
        let skinny = ds.subset(0, 0);
        assert!(matches!(
            fit_hidden(&mut net, &skinny, &cfg),
            Err(TrainerError::EmptyDataset)
        ));
        let raw = make_synthetic_clusters(1, 2, 8, 5, 0.1);
        assert!(matches!(
            fit_hidden(&mut net, &raw, &cfg),
            Err(TrainerError::FeatureDimMismatch { expected: 8, got: 5 })
        ));
        let wide = TrainConfig {
            n_workers: 64,
            batch_size: 16,
            ..small_config()
        };
        assert!(matches!(
            fit_hidden(&mut net, &ds, &wide),
            Err(TrainerError::WorkersExceedBatch { n_workers: 64, batch_size: 16 })
        ));
    }

    #[test]
    fn output_phase_freezes_hidden_pair() {
        let cfg = TrainConfig {
            n_epochs1: 1,
            n_epochs2: 2,
            ..small_config()
        };
        let (ds, mut net) = cluster_setup(2, 48, 4, 0.1, geom(2, 2), &cfg);
        fit_hidden(&mut net, &ds, &cfg).unwrap();
        let hidden_before = net.hidden_pair.clone();
        let mask_before = net.mask.clone();
        fit_output(&mut net, &ds, &cfg).unwrap();
        assert_eq!(net.hidden_pair, hidden_before);
        assert_eq!(net.mask, mask_before);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = TrainConfig {
            n_epochs1: 2,
            n_epochs2: 2,
            n_workers: 2,
            ..small_config()
        };
        let run = || {
            let (ds, mut net) = cluster_setup(3, 60, 4, 0.1, geom(2, 2), &cfg);
            net.fit(&ds, &cfg).unwrap();
            net.serialize()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn report_counts_configured_epochs() {
        let cfg = TrainConfig {
            n_epochs1: 3,
            n_epochs2: 2,
            ..small_config()
        };
        let (ds, mut net) = cluster_setup(2, 32, 4, 0.1, geom(2, 2), &cfg);
        let (rh, ro) = net.fit(&ds, &cfg).unwrap();
        assert_eq!((rh.phase, rh.epochs.len()), ("hidden", 3));
        assert_eq!((ro.phase, ro.epochs.len()), ("output", 2));
        assert!(rh.epochs.iter().all(|e| e.images_per_sec > 0.0));
    }

    #[test]
    fn epoch_permutations_are_permutations() {
        for epoch in 0..3 {
            let mut idx = epoch_permutation(7, HIDDEN_PHASE, epoch, 101);
            idx.sort_unstable();
            assert_eq!(idx, (0..101).collect::<Vec<u32>>());
        }
        assert_ne!(
            epoch_permutation(7, HIDDEN_PHASE, 0, 101),
            epoch_permutation(7, HIDDEN_PHASE, 1, 101)
        );
        assert_ne!(
            epoch_permutation(7, HIDDEN_PHASE, 0, 101),
            epoch_permutation(7, OUTPUT_PHASE, 0, 101)
        );
    }

    fn random_activity(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        use rand::Rng;
        let mut m = Mat::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = rng.random_range(0.0..1.0);
        }
        m
    }

    #[test]
    fn worker_partials_recombine_to_full_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // 10 rows across 4 workers → spans 3,3,2,2: unequal on purpose.
        let a_pre = random_activity(&mut rng, 10, 5);
        let a_post = random_activity(&mut rng, 10, 3);
        let p = F64Arith;
        let mut direct = Moments::new(5, 3);
        kernels::batch_moments(p, &a_pre, &a_post, &mut direct).unwrap();
        for n_workers in [1, 2, 3, 4, 7, 10] {
            let mut pool = WorkerPool::new(n_workers, 5, 3);
            let m = pool.moments(p, &a_pre, &a_post).unwrap();
            assert_eq!(m.count, 10);
            let err = m
                .mean_outer
                .as_slice()
                .iter()
                .zip(direct.mean_outer.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-15, "n_workers = {n_workers}: outer err {err}");
            for (a, b) in m.mean_pre.iter().zip(&direct.mean_pre) {
                assert!((a - b).abs() < 1e-15);
            }
            for (a, b) in m.mean_post.iter().zip(&direct.mean_post) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_worker_matches_plain_kernel_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a_pre = random_activity(&mut rng, 6, 4);
        let a_post = random_activity(&mut rng, 6, 2);
        let p = F64Arith;
        let mut direct = Moments::new(4, 2);
        kernels::batch_moments(p, &a_pre, &a_post, &mut direct).unwrap();
        let mut pool = WorkerPool::new(1, 4, 2);
        let m = pool.moments(p, &a_pre, &a_post).unwrap();
        assert_eq!(m.mean_outer.as_slice(), direct.mean_outer.as_slice());
        assert_eq!(m.mean_pre, direct.mean_pre);
        assert_eq!(m.mean_post, direct.mean_post);
    }

    #[test]
    fn more_workers_than_rows_degrades_gracefully() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a_pre = random_activity(&mut rng, 3, 4);
        let a_post = random_activity(&mut rng, 3, 2);
        let p = F64Arith;
        let mut direct = Moments::new(4, 2);
        kernels::batch_moments(p, &a_pre, &a_post, &mut direct).unwrap();
        let mut pool = WorkerPool::new(8, 4, 2);
        let m = pool.moments(p, &a_pre, &a_post).unwrap();
        for (a, b) in m.mean_outer.as_slice().iter().zip(direct.mean_outer.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cost_formula_matches_pinned_example() {
        let cfg = TrainConfig {
            n_cycles: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (input, hidden, output) = (geom(3, 1), geom(5, 2), geom(1, 2));
        assert_eq!(estimate_cost(&cfg, 2, &input, &hidden, &output), 400);
        let doubled = geom(10, 2);
        assert_eq!(estimate_cost(&cfg, 2, &input, &doubled, &output), 800);
    }
}
