//! Kernel-level comparisons: one matrix-vector product and one LSTM cell
//! step, dense against block-sparse at decoder-typical shapes.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use feather_bench::{random_matrix, random_vec, sparse_pair};
use feather_core::sparsity::{dense_matvec, lstm_step, KernelMat, LstmState};

fn bench_matvec(c: &mut Criterion) {
    let rows = 1024;
    let cols = 512;
    let weights = random_matrix(rows, cols, 3);
    let (sparse, dense) = sparse_pair(&weights, 0.9);
    let x = random_vec(cols, 5);

    let mut group = c.benchmark_group("matvec_1024x512");
    group.bench_function("dense", |b| {
        b.iter(|| dense_matvec(black_box(&dense), black_box(&x)).unwrap())
    });
    group.bench_function("sparse_0.9", |b| {
        b.iter(|| sparse.matvec(black_box(&x)).unwrap())
    });
    group.finish();
}

fn bench_lstm_step(c: &mut Criterion) {
    let hidden = 256;
    let input = 128;
    let weights = random_matrix(4 * hidden, input + hidden, 11);
    let (sparse, dense) = sparse_pair(&weights, 0.9);
    let sparse = KernelMat::Sparse(sparse);
    let dense = KernelMat::Dense(dense);
    let bias = random_vec(4 * hidden, 13);
    let x = random_vec(input, 17);
    let state = LstmState {
        h: random_vec(hidden, 19),
        c: random_vec(hidden, 23),
    };

    let mut group = c.benchmark_group("lstm_step_h256");
    group.bench_function("dense", |b| {
        b.iter(|| {
            lstm_step(
                black_box(&dense),
                black_box(&bias),
                black_box(&x),
                black_box(&state),
                None,
            )
            .unwrap()
        })
    });
    group.bench_function("sparse_0.9", |b| {
        b.iter(|| {
            lstm_step(
                black_box(&sparse),
                black_box(&bias),
                black_box(&x),
                black_box(&state),
                None,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matvec, bench_lstm_step);
criterion_main!(benches);
