//! Batch kernels under the rayon backend and the sequential fallback.
//!
//! `cargo bench -p cyclevc-autograd` measures the rayon build, once on the
//! global pool and once pinned to a single worker. Adding
//! `--no-default-features` measures the plain sequential code path; the group
//! names carry the backend so reports from both builds sit side by side.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cyclevc_autograd::kernels::ConvGeom;
use cyclevc_autograd::{conv1d, ctc_nll, par, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn backend() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs `f` on a one-thread rayon pool when the backend is rayon.
fn single_worker<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

fn conv2d_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("conv2d/{}", backend()));
    for &batch in &[1usize, 8] {
        let geom = ConvGeom { batch, h: 64, w: 24, cin: 8, kh: 3, kw: 3, cout: 16, sh: 2, sw: 2, ph: 1, pw: 1 };
        let x = random(batch * 64 * 24 * 8, 1);
        let w = random(3 * 3 * 8 * 16, 2);
        let dy = random(batch * geom.out_h() * geom.out_w() * 16, 3);
        group.bench_with_input(BenchmarkId::new("fwd_bwd", batch), &batch, |b, _| {
            b.iter(|| {
                let y = geom.forward(&x, &w);
                let g = geom.backward(&x, &w, &dy, true, true);
                (y, g)
            })
        });
        group.bench_with_input(BenchmarkId::new("fwd_bwd_1worker", batch), &batch, |b, _| {
            b.iter(|| {
                single_worker(|| {
                    let y = geom.forward(&x, &w);
                    let g = geom.backward(&x, &w, &dy, true, true);
                    (y, g)
                })
            })
        });
    }
    group.finish();
}

fn conv_stack_graph(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("conv1d_graph/{}", backend()));
    let x = Tensor::new(&[8, 100, 16], random(8 * 100 * 16, 4));
    let w = Tensor::new(&[5, 16, 16], random(5 * 16 * 16, 5));
    let run = || {
        let g = Graph::new();
        let (xv, wv) = (g.variable(x.clone()), g.variable(w.clone()));
        let y = conv1d(conv1d(xv, wv, 2).relu(), wv, 2).square().mean_all();
        g.backward(y).wrt(wv)
    };
    group.bench_function("two_layers", |b| b.iter(run));
    group.bench_function("two_layers_1worker", |b| b.iter(|| single_worker(run)));
    group.finish();
}

fn ctc_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("ctc/{}", backend()));
    let (batch, frames, vocab) = (8, 40, 20);
    let logits = Tensor::new(&[batch, frames, vocab], random(batch * frames * vocab, 6));
    let targets: Vec<Vec<usize>> = (0..batch).map(|b| (0..12).map(|i| 1 + (i * 7 + b) % (vocab - 1)).collect()).collect();
    let lengths = vec![frames; batch];
    let run = || {
        let g = Graph::new();
        let lv = g.variable(logits.clone());
        let loss = ctc_nll(lv.log_softmax(), &targets, &lengths, 0).sum_all();
        g.backward(loss).wrt(lv)
    };
    group.bench_function("nll_grad", |b| b.iter(run));
    group.bench_function("nll_grad_1worker", |b| b.iter(|| single_worker(run)));
    group.finish();
}

criterion_group!(benches, conv2d_kernels, conv_stack_graph, ctc_batch);
criterion_main!(benches);
