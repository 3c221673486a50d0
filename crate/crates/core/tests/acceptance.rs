//! Release gate. Each test covers one numbered criterion and prints a single
//! `criterion N: PASS/FAIL (…)` line (visible with `--nocapture`, or on
//! failure). Criteria 1 and 2 train on the bundled MNIST archives and
//! dominate the runtime; everything else finishes in seconds.
//!
//! The tests serialize on a process-wide mutex so that wall-clock budgets
//! are measured with the machine to themselves.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use bcpnn::kernels::{self, Moments};
use bcpnn::model::{build_network, HypercolumnGeometry, Network, TrainConfig};
use bcpnn::plasticity::{init_mask, mi_scores, rewire};
use bcpnn::precision::{ArithMode, EmArith, F32Arith, F64Arith, FloatFormat};
use bcpnn::trainer::{estimate_cost, evaluate, fit_hidden};
use bcpnn::{load_idx, mac_count, make_synthetic_clusters, reset_mac_count, Dataset, Mat, EPS_TRACE};

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: usize, pass: bool, detail: String) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {word} ({detail})");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist_pair(dir: &Path, images: &str, labels: &str) -> Dataset {
    load_idx(&dir.join(images), &dir.join(labels))
        .expect("bundled MNIST archives")
        .encode_complement()
        .expect("raw archives")
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xacce_0000 | tag)
}

fn geom(h: usize, m: usize) -> HypercolumnGeometry {
    HypercolumnGeometry::new(h, m).unwrap()
}

// -------------------------------------------------------------------------
// 1. Full MNIST, native f32, tuned defaults: ≥94% test accuracy within a
//    20-minute wall budget.

#[test]
fn criterion_1_mnist_accuracy() {
    let _g = serial();
    let dir = mnist_dir();
    let train = mnist_pair(&dir, "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz");
    let test = mnist_pair(&dir, "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz");

    let config = TrainConfig::default();
    let input = geom(784, 2);
    let hidden = geom(30, 100);
    let output = geom(1, 10);

    let started = Instant::now();
    let mut net = build_network(F32Arith, input, hidden, output, &config).unwrap();
    net.fit(&train, &config).unwrap();
    let wall = started.elapsed().as_secs_f64();
    let acc = evaluate(&net, &test).unwrap();

    let pass = acc >= 0.94 && wall <= 1200.0;
    verdict(1, pass, format!("accuracy {:.2}% vs ≥94.00%, wall {wall:.0}s vs ≤1200s", acc * 100.0));
}

// -------------------------------------------------------------------------
// 2. Reduced-precision resilience ladder at reduced scale, shared seed.

#[test]
fn criterion_2_precision_ladder() {
    let _g = serial();
    let dir = mnist_dir();
    let train = mnist_pair(&dir, "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz")
        .subset(0, 10_000);
    let test = mnist_pair(&dir, "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")
        .subset(0, 2_000);

    let mut config = TrainConfig::default();
    config.n_epochs1 = 6;
    config.n_epochs2 = 20;
    let input = geom(784, 2);
    let hidden = geom(6, 100);
    let output = geom(1, 10);

    let started = Instant::now();
    let run = |mode: ArithMode| -> f64 {
        let mut c = config.clone();
        c.mode = mode;
        match mode {
            ArithMode::F32 => {
                let mut net = build_network(F32Arith, input, hidden, output, &c).unwrap();
                net.fit(&train, &c).unwrap();
                evaluate(&net, &test).unwrap()
            }
            ArithMode::Reduced(f) => {
                let mut net = build_network(EmArith::new(f), input, hidden, output, &c).unwrap();
                net.fit(&train, &c).unwrap();
                evaluate(&net, &test).unwrap()
            }
            ArithMode::F64 => unreachable!("ladder never runs f64"),
        }
    };

    let f32_acc = run(ArithMode::F32);
    let acc = |m: u32| run(ArithMode::Reduced(FloatFormat::new(m).unwrap()));
    let bf28 = acc(19);
    let bf24 = acc(15);
    let bf20 = acc(11);
    let bf16 = acc(7);
    let bf15 = acc(6);
    let bf14 = acc(5);
    let wall = started.elapsed().as_secs_f64();

    let near = |a: f64, pts: f64| (f32_acc - a).abs() <= pts;
    let pass = near(bf28, 0.015)
        && near(bf24, 0.015)
        && near(bf20, 0.015)
        && near(bf16, 0.06)
        && bf14 <= 0.20
        && bf15 > bf14
        && bf15 < bf16
        && wall <= 3600.0;
    verdict(
        2,
        pass,
        format!(
            "f32 {:.1}% bf28 {:.1}% bf24 {:.1}% bf20 {:.1}% bf16 {:.1}% bf15 {:.1}% bf14 {:.1}%, wall {wall:.0}s vs ≤3600s",
            f32_acc * 100.0,
            bf28 * 100.0,
            bf24 * 100.0,
            bf20 * 100.0,
            bf16 * 100.0,
            bf15 * 100.0,
            bf14 * 100.0
        ),
    );
}

// -------------------------------------------------------------------------
// 3. Kernel equivalence against naive scalar oracles, ≥100 random
//    instances per kernel, ≤8×8, 1e-12 relative in f64.

const REL_TOL: f64 = 1e-12;

fn rel_close(got: f64, want: f64) -> bool {
    if got == want {
        return true;
    }
    (got - want).abs() <= REL_TOL * want.abs().max(got.abs())
}

/// Random (rows×units) activity in (0,1); about one entry in five is an
/// exact zero so the sparse path is exercised.
fn rand_activity(r: &mut ChaCha8Rng, rows: usize, units: usize) -> Mat<f64> {
    Mat::fill_with(rows, units, |_, _| {
        if r.random::<f64>() < 0.2 { 0.0 } else { r.random::<f64>() * 0.9 + 0.05 }
    })
}

/// Pair state with strictly positive traces placed so that every derived
/// log stays well away from zero (relative comparisons remain meaningful).
fn rand_state(r: &mut ChaCha8Rng, n_pre: usize, n_post: usize) -> bcpnn::LayerPairState<F64Arith> {
    bcpnn::LayerPairState::<F64Arith> {
        weights: Mat::fill_with(n_pre, n_post, |_, _| r.random::<f64>() * 0.9 + 0.1),
        bias: (0..n_post).map(|_| r.random::<f64>() * 0.9 + 0.1).collect(),
        trace_ci: (0..n_pre).map(|_| r.random::<f64>() * 0.4 + 0.1).collect(),
        trace_cj: (0..n_post).map(|_| r.random::<f64>() * 0.4 + 0.1).collect(),
        trace_cij: Mat::fill_with(n_pre, n_post, |_, _| r.random::<f64>() * 0.6 + 0.3),
    }
}

fn small_geom(r: &mut ChaCha8Rng) -> HypercolumnGeometry {
    let h = r.random_range(1..=4usize);
    let m = r.random_range(1..=(8 / h).max(1));
    geom(h, m)
}

#[test]
fn criterion_3_kernel_oracles() {
    let _g = serial();
    let p = F64Arith;
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64, what: &str| {
        let err = if got == want {
            0.0
        } else {
            (got - want).abs() / want.abs().max(got.abs()).max(f64::MIN_POSITIVE)
        };
        worst = worst.max(err);
        assert!(rel_close(got, want), "{what}: got {got}, oracle {want}");
    };

    for _ in 0..120 {
        let post = small_geom(&mut r);
        let (n_pre, n_post) = (r.random_range(1..=8usize), post.total_units());
        let batch = r.random_range(1..=6usize);
        let state = rand_state(&mut r, n_pre, n_post);
        let a_pre = rand_activity(&mut r, batch, n_pre);

        // support
        let mut out = Mat::zeros(batch, n_post);
        kernels::compute_support(p, &a_pre, &state, &mut out).unwrap();
        for b in 0..batch {
            for j in 0..n_post {
                let mut s = state.bias[j];
                for i in 0..n_pre {
                    s += a_pre.at(b, i) * state.weights.at(i, j);
                }
                track(out.at(b, j), s, "compute_support");
            }
        }

        // softmax over the same support
        let mut act = Mat::zeros(batch, n_post);
        kernels::hcu_softmax(p, &out, &post, &mut act).unwrap();
        let m = post.mcus_per_hcu;
        for b in 0..batch {
            for h in 0..post.n_hcus {
                let s: Vec<f64> = (h * m..(h + 1) * m).map(|j| out.at(b, j)).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = exps.iter().sum();
                for (k, e) in exps.iter().enumerate() {
                    track(act.at(b, h * m + k), e / tot, "hcu_softmax");
                }
            }
        }

        // marginal EWMA from batch means
        let lambda = r.random::<f64>() * 0.2 + 0.005;
        let mut upd = state.clone();
        kernels::update_marginals(p, &mut upd, &a_pre, &act, lambda).unwrap();
        for i in 0..n_pre {
            let mean: f64 = (0..batch).map(|b| a_pre.at(b, i)).sum::<f64>() / batch as f64;
            let want = ((1.0 - lambda) * state.trace_ci[i] + lambda * mean).max(EPS_TRACE);
            track(upd.trace_ci[i], want, "update_marginals C_i");
        }
        for j in 0..n_post {
            let mean: f64 = (0..batch).map(|b| act.at(b, j)).sum::<f64>() / batch as f64;
            let want = ((1.0 - lambda) * state.trace_cj[j] + lambda * mean).max(EPS_TRACE);
            track(upd.trace_cj[j], want, "update_marginals C_j");
        }
        for i in 0..n_pre {
            for j in 0..n_post {
                let mean: f64 =
                    (0..batch).map(|b| a_pre.at(b, i) * act.at(b, j)).sum::<f64>() / batch as f64;
                let want = ((1.0 - lambda) * state.trace_cij.at(i, j) + lambda * mean).max(EPS_TRACE);
                track(upd.trace_cij.at(i, j), want, "update_marginals C_ij");
            }
        }

        // weight/bias rule on traces kept away from ratio 1
        let k_b = r.random::<f64>() * 0.6 + 0.4;
        let mut wb = state.clone();
        kernels::update_weights_bias(p, &mut wb, k_b).unwrap();
        for j in 0..n_post {
            track(wb.bias[j], k_b * state.trace_cj[j].ln(), "update_weights_bias bias");
        }
        for i in 0..n_pre {
            for j in 0..n_post {
                let want =
                    (state.trace_cij.at(i, j) / (state.trace_ci[i] * state.trace_cj[j])).ln();
                track(wb.weights.at(i, j), want, "update_weights_bias w");
            }
        }

        // mask application zeroes silenced columns exactly
        let fan = r.random_range(1..=n_pre);
        let mask = init_mask(&mut r, n_pre, post.n_hcus, fan).unwrap();
        let mut masked = wb.clone();
        kernels::apply_mask(p, &mut masked, &mask, &post).unwrap();
        for i in 0..n_pre {
            for j in 0..n_post {
                let want = if mask.is_active(i, post.hcu_of(j)) { wb.weights.at(i, j) } else { 0.0 };
                track(masked.weights.at(i, j), want, "apply_mask");
            }
        }

        // mutual-information scores
        let scores = mi_scores(p, &state, &post).unwrap();
        for i in 0..n_pre {
            let p1 = state.trace_ci[i];
            let p0 = 1.0 - p1;
            for h in 0..post.n_hcus {
                let mut want = 0.0;
                for j in h * m..(h + 1) * m {
                    let pj = state.trace_cj[j];
                    let p11 = state.trace_cij.at(i, j);
                    if p11 > 0.0 {
                        want += p11 * (p11 / (p1 * pj)).ln();
                    }
                    let p01 = pj - p11;
                    if p01 > 0.0 {
                        want += p01 * (p01 / (p0 * pj)).ln();
                    }
                }
                track(scores.at(i, h), want, "mi_scores");
            }
        }
    }
    verdict(3, true, format!("6 kernels × 120 instances, worst relative error {worst:.2e} vs ≤1e-12"));
}

// -------------------------------------------------------------------------
// 4. Trace consistency: with complement inputs and normalized hidden
//    activity, joint traces summed over any hidden HCU reproduce the
//    input marginal.

#[test]
fn criterion_4_trace_consistency() {
    let _g = serial();
    let p = F64Arith;
    let mut r = rng(4);
    let input = geom(12, 2);
    let hidden = geom(3, 4);
    let (n_pre, n_post) = (input.total_units(), hidden.total_units());
    let config = TrainConfig { mode: ArithMode::F64, fan_in: 16, ..TrainConfig::default() };
    let net = build_network(p, input, hidden, geom(1, 2), &config).unwrap();
    let mut state = net.hidden_pair;

    let batch = 32;
    for _ in 0..50 {
        // complement pairs (x, 1−x)
        let mut a_pre = Mat::<f64>::zeros(batch, n_pre);
        for b in 0..batch {
            for h in 0..input.n_hcus {
                let x = r.random::<f64>();
                a_pre.set(b, 2 * h, x);
                a_pre.set(b, 2 * h + 1, 1.0 - x);
            }
        }
        // random support, normalized per hidden HCU
        let support = Mat::fill_with(batch, n_post, |_, _| r.random::<f64>() * 4.0 - 2.0);
        let mut a_post = Mat::zeros(batch, n_post);
        kernels::hcu_softmax(p, &support, &hidden, &mut a_post).unwrap();

        let mut m = Moments::new(n_pre, n_post);
        kernels::batch_moments(p, &a_pre, &a_post, &mut m).unwrap();
        kernels::apply_ewma(p, &mut state, &m, 0.01).unwrap();
    }

    let mcu = hidden.mcus_per_hcu;
    let mut worst: f64 = 0.0;
    for i in 0..n_pre {
        for h in 0..hidden.n_hcus {
            let sum: f64 = (h * mcu..(h + 1) * mcu).map(|j| state.trace_cij.at(i, j)).sum();
            worst = worst.max((sum - state.trace_ci[i]).abs());
        }
    }
    let min_trace = state
        .trace_ci
        .iter()
        .chain(&state.trace_cj)
        .chain(state.trace_cij.as_slice())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let pass = worst <= 1e-10 && min_trace > EPS_TRACE;
    verdict(4, pass, format!("max |Σ_j C_ij − C_i| = {worst:.2e} vs ≤1e-10, min trace {min_trace:.2e} (clamp untriggered)"));
}

// -------------------------------------------------------------------------
// 5. Data-parallel equivalence: worker count never changes f64 results
//    beyond 1e-10 max-norm.

#[test]
fn criterion_5_worker_equivalence() {
    let _g = serial();
    let ds = make_synthetic_clusters(505, 8, 1000, 32, 0.08)
        .encode_complement()
        .unwrap();
    let input = geom(32, 2);
    let hidden = geom(4, 16);
    let output = geom(1, 8);

    let run = |workers: usize| -> Network<F64Arith> {
        let config = TrainConfig {
            mode: ArithMode::F64,
            n_epochs1: 1,
            n_epochs2: 0,
            batch_size: 250,
            fan_in: 24,
            n_workers: workers,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut net = build_network(F64Arith, input, hidden, output, &config).unwrap();
        fit_hidden(&mut net, &ds, &config).unwrap();
        net
    };

    let base = run(1);
    let mut worst: f64 = 0.0;
    for workers in [2usize, 4, 8] {
        let net = run(workers);
        let pairs = [(&net.hidden_pair, &base.hidden_pair)];
        for (got, want) in pairs {
            let diff = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
            };
            worst = worst
                .max(diff(got.weights.as_slice(), want.weights.as_slice()))
                .max(diff(&got.bias, &want.bias))
                .max(diff(&got.trace_ci, &want.trace_ci))
                .max(diff(&got.trace_cj, &want.trace_cj))
                .max(diff(got.trace_cij.as_slice(), want.trace_cij.as_slice()));
        }
    }
    verdict(5, worst <= 1e-10, format!("workers {{2,4,8}} vs 1: max-norm {worst:.2e} vs ≤1e-10"));
}

// -------------------------------------------------------------------------
// 6. Mask rewiring invariants over 10^4 calls.

#[test]
fn criterion_6_mask_invariants() {
    let _g = serial();
    let mut r = rng(6);
    let (n_features, n_hcus, fan) = (48usize, 4usize, 12usize);
    let mut mask = init_mask(&mut r, n_features, n_hcus, fan).unwrap();

    let mut violations = 0u64;
    let mut swaps_total = 0u64;
    for _ in 0..10_000 {
        let scores = Mat::<f64>::fill_with(n_features, n_hcus, |_, _| r.random::<f64>());
        let before: Vec<f64> = (0..n_hcus)
            .map(|h| {
                (0..n_features)
                    .filter(|&i| mask.is_active(i, h))
                    .map(|i| scores.at(i, h))
                    .sum()
            })
            .collect();
        swaps_total += rewire(&mut mask, &scores, r.random_range(1..=3)).unwrap();
        for h in 0..n_hcus {
            if mask.active_count(h) != fan {
                violations += 1;
            }
            let after: f64 = (0..n_features)
                .filter(|&i| mask.is_active(i, h))
                .map(|i| scores.at(i, h))
                .sum();
            if after < before[h] - 1e-12 {
                violations += 1;
            }
        }
    }
    verdict(
        6,
        violations == 0,
        format!("10000 rewire calls, {swaps_total} swaps, cardinality+score violations {violations} vs 0"),
    );
}

// -------------------------------------------------------------------------
// 7. Cost model: MAC counter within 2× of the analytic bound; linear in
//    hidden size within 10%.

#[test]
fn criterion_7_cost_model() {
    let _g = serial();
    let ds = make_synthetic_clusters(707, 16, 2048, 64, 0.08);
    let input = geom(64, 1);
    let output = geom(1, 16);
    let config = TrainConfig {
        mode: ArithMode::F64,
        n_epochs1: 1,
        n_epochs2: 0,
        batch_size: 256,
        fan_in: 64,
        seed: 3,
        ..TrainConfig::default()
    };
    let n_batches = ds.n_samples().div_ceil(config.batch_size);

    let measure = |hidden: HypercolumnGeometry| -> u64 {
        let mut net = build_network(F64Arith, input, hidden, output, &config).unwrap();
        reset_mac_count();
        fit_hidden(&mut net, &ds, &config).unwrap();
        mac_count()
    };

    let h1 = geom(4, 8);
    let m1 = measure(h1);
    let m2 = measure(geom(8, 8));
    let m4 = measure(geom(16, 8));
    let bound = estimate_cost(&config, n_batches, &input, &h1, &output);

    let ratio = m1 as f64 / bound as f64;
    let lin2 = m2 as f64 / (2.0 * m1 as f64);
    let lin4 = m4 as f64 / (2.0 * m2 as f64);
    let pass = (0.5..=2.0).contains(&ratio)
        && (0.9..=1.1).contains(&lin2)
        && (0.9..=1.1).contains(&lin4);
    verdict(
        7,
        pass,
        format!("measured/bound {ratio:.2} vs [0.5,2], doubling ratios {lin2:.3}/{lin4:.3} vs [0.9,1.1]"),
    );
}

// -------------------------------------------------------------------------
// 8. Throughput grows with batch size: images/s at batch 512 ≥ batch 16.

#[test]
fn criterion_8_batch_throughput() {
    let _g = serial();
    let dir = mnist_dir();
    let train = mnist_pair(&dir, "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz")
        .subset(0, 10_000);
    let input = geom(784, 2);
    let hidden = geom(30, 100);
    let output = geom(1, 10);

    let throughput = |batch: usize| -> f64 {
        let config = TrainConfig { n_epochs1: 1, n_epochs2: 0, batch_size: batch, ..TrainConfig::default() };
        let mut net = build_network(F32Arith, input, hidden, output, &config).unwrap();
        let started = Instant::now();
        fit_hidden(&mut net, &train, &config).unwrap();
        train.n_samples() as f64 / started.elapsed().as_secs_f64()
    };

    let small = throughput(16);
    let large = throughput(512);
    verdict(8, large >= small, format!("batch 512: {large:.0} img/s vs batch 16: {small:.0} img/s"));
}

// -------------------------------------------------------------------------
// 9. Determinism: two same-seed smoke runs through the CLI produce
//    bit-identical model files.

#[test]
fn criterion_9_smoke_determinism() {
    let _g = serial();
    let bin = env!("CARGO_BIN_EXE_bcpnn");
    let dir = tempfile::tempdir().unwrap();

    let run = |tag: &str| -> Vec<u8> {
        let out = dir.path().join(tag);
        let cfg = dir.path().join(format!("{tag}.conf"));
        std::fs::write(
            &cfg,
            format!(
                "[data]\nsource=synthetic\nclusters=5\ntrain_samples=512\ntest_samples=128\nfeatures=32\nencoding=complement\n\n\
                 [model]\nhidden_hcus=4\nhidden_mcus=8\n\n\
                 [train]\nmode=f32\nn_epochs1=2\nn_epochs2=2\nbatch_size=64\nfan_in=24\nswaps_per_hcu=2\nn_workers=2\nseed=42\n\n\
                 [run]\nout_dir={}\nmetrics_format=json\n",
                out.display()
            ),
        )
        .unwrap();
        let status = std::process::Command::new(bin)
            .args(["train", cfg.to_str().unwrap()])
            .output()
            .expect("spawn CLI");
        assert!(
            status.status.success(),
            "train exited {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr)
        );
        std::fs::read(out.join("model.bin")).expect("model file")
    };

    let a = run("a");
    let b = run("b");
    let pass = a == b;
    verdict(9, pass, format!("two runs, model files {} bytes each, byte-identical: {pass}", a.len()));
}
