//! Benchmarks for the hot paths: matmul, the RICA cost/gradient sweep, the
//! projected optimizer step, untied forward propagation, LCN, and the
//! communication predictor.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ufl_core::config::{parse_layer_chain, RunConfig};
use ufl_core::distsim::{partition_network, predicted_comm_bytes};
use ufl_core::layers::{lcn_apply, untied_forward, LcnConfig};
use ufl_core::network::Network;
use ufl_core::rica::{rica_objective_and_gradient, sgd_step, OptimizerState, RicaParams};
use ufl_core::tensor::{matmul, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for size in [32usize, 64, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, vec![size, size]);
        let b = random_tensor(&mut rng, vec![size, size]);
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_rica_gradient(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = RicaParams::init(16, 256, 0.1, 1e-6, &mut rng).unwrap();
    let x = random_tensor(&mut rng, vec![24, 256]);
    c.bench_function("rica_objective_and_gradient 16x256 m24", |b| {
        b.iter(|| rica_objective_and_gradient(black_box(&p), black_box(&x)).unwrap())
    });
}

fn bench_sgd_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = RicaParams::init(16, 256, 0.1, 1e-6, &mut rng).unwrap();
    let state = OptimizerState::seeded(1e-5, 0.9, 16, 256, 3).unwrap();
    let x = random_tensor(&mut rng, vec![24, 256]);
    c.bench_function("sgd_step 16x256 m24", |b| {
        b.iter_batched(
            || (params.clone(), state.clone()),
            |(mut p, mut s)| sgd_step(&mut p, &mut s, black_box(&x)).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn bench_untied_forward(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.input = (32, 32, 1);
    cfg.layers = parse_layer_chain("untied:field=16x16,stride=8,block=2x2x2").unwrap();
    let net = Network::init(&cfg).unwrap();
    let layer = match &net.layers[0] {
        ufl_core::network::Layer::Untied(u) => u,
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = random_tensor(&mut rng, vec![24, 32, 32, 1]);
    c.bench_function("untied_forward 3x3 grid m24", |b| {
        b.iter(|| untied_forward(black_box(layer), black_box(&batch)).unwrap())
    });
}

fn bench_lcn(c: &mut Criterion) {
    let cfg = LcnConfig::new(9, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = random_tensor(&mut rng, vec![72, 72, 8]);
    c.bench_function("lcn_apply 72x72x8 window 9", |b| {
        b.iter(|| lcn_apply(black_box(&map), black_box(&cfg)).unwrap())
    });
}

fn bench_predicted_comm(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.input = (40, 40, 1);
    cfg.layers = parse_layer_chain(
        "untied:field=8x8,stride=8,block=2x2x2 | untied:field=3x3,stride=1,block=1x1x4 | dense:k=6",
    )
    .unwrap();
    let net = Network::init(&cfg).unwrap();
    let partition = partition_network(&net, 4).unwrap();
    c.bench_function("predicted_comm_bytes P4", |b| {
        b.iter(|| predicted_comm_bytes(black_box(&net), black_box(&partition), 24, 8).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_rica_gradient,
    bench_sgd_step,
    bench_untied_forward,
    bench_lcn,
    bench_predicted_comm
);
criterion_main!(benches);
