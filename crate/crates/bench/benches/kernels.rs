use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use odeflow::density::TraceMode;
use odeflow::mpf::{mpf_step, FlowVelocityNet, LikelihoodSpec, ObsFeature, ParticleSet, PriorSpec};
use odeflow::nn::NetField;
use odeflow::ode::integrate;
use odeflow::rng::seeded;
use odeflow::{Activation, ParamSet, Scheme, TimeGrid};

fn rk4(c: &mut Criterion) {
    let net = ParamSet::random(&[8, 32, 8], &[Activation::Tanh, Activation::Identity], &mut seeded(1)).unwrap();
    let field = NetField::new(&net).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let x0 = vec![0.1; 8];
    c.bench_function("rk4_100_steps_d8_h32", |b| {
        b.iter(|| integrate(black_box(&x0), &grid, &field, Scheme::Rk4).unwrap())
    });
}

fn mlp_vjp(c: &mut Criterion) {
    let net = ParamSet::random(&[16, 64, 64, 16], &[Activation::Tanh, Activation::Tanh, Activation::Identity], &mut seeded(2))
        .unwrap();
    let x = vec![0.3; 16];
    let cot = vec![1.0; 16];
    c.bench_function("mlp_vjp_16_64_64_16", |b| b.iter(|| net.vjp(black_box(&x), black_box(&cot)).unwrap()));
}

fn mpf_stage(c: &mut Criterion) {
    let mut rng = seeded(3);
    let net = FlowVelocityNet::random(1, 8, 32, ObsFeature::Raw, &mut rng).unwrap();
    let prior = PriorSpec::new(vec![0.0], vec![1.0]).unwrap();
    let ps = ParticleSet::from_prior(&prior, 100, &mut rng).unwrap();
    let lik = LikelihoodSpec::new(1.0).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    c.bench_function("mpf_step_n100_exact", |b| {
        b.iter(|| mpf_step(black_box(&ps), &[0.5], lik, &net, &grid, TraceMode::Exact).unwrap())
    });
}

criterion_group!(benches, rk4, mlp_vjp, mpf_stage);
criterion_main!(benches);
