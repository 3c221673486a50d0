// Scratch micro-benchmark of the hot kernels at MNIST shapes.

use bcpnn::kernels::{apply_ewma, batch_moments, compute_support, hcu_softmax, update_weights_bias_masked, Moments};
use bcpnn::model::{build_network, HypercolumnGeometry, TrainConfig};
use bcpnn::precision::F32Arith;
use bcpnn::Mat;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let p = F32Arith;
    let (n_pre, n_post, batch) = (1568usize, 3000usize, 256usize);
    let input = HypercolumnGeometry::new(784, 2).unwrap();
    let hidden = HypercolumnGeometry::new(30, 100).unwrap();
    let output = HypercolumnGeometry::new(1, 10).unwrap();
    let cfg = TrainConfig { fan_in: 128, ..TrainConfig::default() };
    let mut net = build_network(p, input, hidden, output, &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut a_pre = Mat::<f32>::zeros(batch, n_pre);
    for v in a_pre.as_mut_slice() {
        // ~57% nonzero, like complement-coded MNIST
        *v = if rng.random::<f32>() < 0.57 { rng.random::<f32>() } else { 0.0 };
    }
    let mut a_post = Mat::<f32>::zeros(batch, n_post);
    for v in a_post.as_mut_slice() {
        *v = rng.random::<f32>() * 0.01;
    }
    for v in net.hidden_pair.weights.as_mut_slice() {
        *v = rng.random::<f32>() - 0.5;
    }

    let mut out = Mat::<f32>::zeros(batch, n_post);
    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps {
        compute_support(p, &a_pre, &net.hidden_pair, &mut out).unwrap();
    }
    println!("support: {:.3} s/call", t.elapsed().as_secs_f64() / reps as f64);

    let mut act = Mat::<f32>::zeros(batch, n_post);
    let t = Instant::now();
    for _ in 0..reps {
        hcu_softmax(p, &out, &hidden, &mut act).unwrap();
    }
    println!("softmax: {:.3} s/call", t.elapsed().as_secs_f64() / reps as f64);

    let mut m = Moments::new(n_pre, n_post);
    let t = Instant::now();
    for _ in 0..reps {
        batch_moments(p, &a_pre, &a_post, &mut m).unwrap();
    }
    println!("moments: {:.3} s/call", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        apply_ewma(p, &mut net.hidden_pair, &m, 0.01).unwrap();
    }
    println!("ewma:    {:.3} s/call", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        update_weights_bias_masked(p, &mut net.hidden_pair, 1.0, &net.mask, &hidden).unwrap();
    }
    println!("update:  {:.3} s/call", t.elapsed().as_secs_f64() / reps as f64);
}
