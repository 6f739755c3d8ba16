use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vae2_bench::fixture;
use vae2_core::bounds;
use vae2_core::nn::{l1_loss, standard_normal};
use vae2_core::vae2::vae2_loss;
use vae2_core::{MlpConfig, MlpParams, OutputActivation, Tape, Tensor};

fn mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = MlpParams::init(MlpConfig::backbone(20, 10, OutputActivation::Sigmoid), &mut rng).unwrap();
    let x = standard_normal(&mut rng, &[64, 20]);
    let target = Tensor::full(&[64, 10], 0.5);
    c.bench_function("mlp_forward_64", |b| b.iter(|| params.eval(black_box(&x)).unwrap()));
    c.bench_function("mlp_forward_backward_64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let net = params.bind(&mut tape, true);
            let xi = tape.constant(x.clone());
            let t = tape.constant(target.clone());
            let y = net.forward(&mut tape, xi).unwrap();
            let loss = l1_loss(&mut tape, y, t).unwrap();
            let mut g = tape.backward(loss).unwrap();
            net.grads(&tape, &mut g)
        })
    });
}

fn vae2_step(c: &mut Criterion) {
    let f = fixture(0).unwrap();
    c.bench_function("vae2_generator_step_64", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| vae2_loss(&f.model, black_box(&f.batch), &f.config, &mut rng).unwrap())
    });
    let mut epoch = f.config.clone();
    epoch.epochs = 1;
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("vae2_epoch_400", |b| {
        b.iter(|| vae2_core::vae2::train(f.model.clone(), &f.dataset, &epoch).unwrap())
    });
    g.finish();
}

fn bounds_sweep(c: &mut Criterion) {
    c.bench_function("bounds_sweep_100", |b| b.iter(|| bounds::sweep(100, bounds::MAX_SIZE, black_box(0)).unwrap()));
}

criterion_group!(benches, mlp, vae2_step, bounds_sweep);
criterion_main!(benches);
