// Scratch harness for hyperparameter exploration on MNIST. Not part of the
// library surface.

use std::path::Path;

use bcpnn::model::{build_network, HypercolumnGeometry, TrainConfig};
use bcpnn::precision::{ArithMode, EmArith, F32Arith, F64Arith};
use bcpnn::trainer::{fit_hidden_with, fit_output_with};
use bcpnn::{data, ScalarArith};

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T
where
    T::Err: std::fmt::Debug,
{
    std::env::args()
        .nth(n)
        .map(|s| s.parse().expect("bad arg"))
        .unwrap_or(default)
}

fn run<P: ScalarArith>(
    p: P,
    cfg: &TrainConfig,
    hidden: HypercolumnGeometry,
    n_train: usize,
    n_test: usize,
    raw: bool,
    kb_out: f64,
) {
    let dir = Path::new("data/mnist");
    let enc = |d: data::Dataset| {
        if raw {
            d
        } else {
            d.encode_complement().unwrap()
        }
    };
    let train = enc(data::load_idx(
        &dir.join("train-images-idx3-ubyte.gz"),
        &dir.join("train-labels-idx1-ubyte.gz"),
    )
    .unwrap())
    .subset(0, n_train);
    let test = enc(data::load_idx(
        &dir.join("t10k-images-idx3-ubyte.gz"),
        &dir.join("t10k-labels-idx1-ubyte.gz"),
    )
    .unwrap())
    .subset(0, n_test);

    let input = if raw {
        HypercolumnGeometry::new(784, 1).unwrap()
    } else {
        HypercolumnGeometry::new(784, 2).unwrap()
    };
    let output = HypercolumnGeometry::new(1, 10).unwrap();
    let mut net = build_network(p, input, hidden, output, cfg).unwrap();
    let t0 = std::time::Instant::now();
    fit_hidden_with(&mut net, &train, cfg, |_, e| {
        eprintln!(
            "  hidden epoch {}: {:.1}s {:.0} img/s swaps={} cmax={:.4}",
            e.epoch, e.wall_seconds, e.images_per_sec, e.mask_swaps, e.trace_max
        );
    })
    .unwrap();
    let cfg_out = TrainConfig { k_b: kb_out, ..cfg.clone() };
    fit_output_with(&mut net, &train, &cfg_out, |_, e| {
        eprintln!(
            "  output epoch {}: {:.1}s {:.0} img/s",
            e.epoch, e.wall_seconds, e.images_per_sec
        );
    })
    .unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let t1 = std::time::Instant::now();
    let acc = net.evaluate(&test).unwrap();
    println!(
        "acc={acc:.4} train={train_time:.0}s eval={:.0}s mode={} lh={} lo={} kb={}/{kb_out} e1={} e2={} bs={} fan={} noise={} swaps={} period={:?} hidden={}x{} n={n_train}",
        t1.elapsed().as_secs_f64(),
        cfg.mode,
        cfg.lambda_hidden,
        cfg.lambda_output,
        cfg.k_b,
        cfg.n_epochs1,
        cfg.n_epochs2,
        cfg.batch_size,
        cfg.fan_in,
        cfg.support_noise,
        cfg.swaps_per_hcu,
        cfg.mask_update_period,
        hidden.n_hcus,
        hidden.mcus_per_hcu,
    );
}

fn main() {
    let mode: ArithMode = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "f32".into())
        .parse()
        .unwrap();
    let cfg = TrainConfig {
        lambda_hidden: arg(2, 0.01),
        lambda_output: arg(3, 0.001),
        k_b: arg(4, -100.0),
        n_epochs1: arg(5, 3),
        n_epochs2: arg(6, 3),
        batch_size: arg(7, 256),
        fan_in: arg(8, 128),
        support_noise: arg(9, 0.1),
        swaps_per_hcu: arg(10, 16),
        mask_update_period: Some(arg(11, 30)),
        seed: arg(14, 1),
        n_workers: arg(15, 1),
        mode,
        ..TrainConfig::default()
    };
    let n_train = arg(12, 60000);
    let n_test = arg(13, 10000);
    let hcus = arg(16, 30);
    let mcus = arg(17, 100);
    let raw = arg(18, 0u8) == 1;
    let kb_out = arg(19, cfg.k_b);
    let hidden = HypercolumnGeometry::new(hcus, mcus).unwrap();
    match mode {
        ArithMode::F64 => run(F64Arith, &cfg, hidden, n_train, n_test, raw, kb_out),
        ArithMode::F32 => run(F32Arith, &cfg, hidden, n_train, n_test, raw, kb_out),
        ArithMode::Reduced(f) => run(EmArith::new(f), &cfg, hidden, n_train, n_test, raw, kb_out),
    }
}
