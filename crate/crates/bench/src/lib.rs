//! Criterion benchmarks for the hot paths: denoiser forward/backward, DDIM
//! sampling, the NLL estimator, one coupling iteration and the discrete oracle.

use std::hint::black_box;

use criterion::{BatchSize, Criterion};
use mecdiff::diffusion::{self, NllOptions};
use mecdiff::metrics::discrete_mec_oracle;
use mecdiff::rng::{self, Rng};
use mecdiff::{CondInput, CouplingPair, CouplingTrainer, Denoiser, DenoiserConfig, DiffusionModel, NoiseSchedule, RLConfig, SampleConfig};

fn model(data_dim: usize, hidden: usize, rng: &mut Rng) -> DiffusionModel {
    let cfg = DenoiserConfig { data_dim, cond_dim: None, hidden_dims: vec![hidden, hidden], time_embed_dim: 16, cond_drop_prob: 0.1 };
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    DiffusionModel::new(Denoiser::new_unconditional(cfg, rng).unwrap(), sched)
}

pub fn benchmarks(c: &mut Criterion) {
    let mut r = rng::seeded(0);
    let m = model(2, 64, &mut r);
    let x = rng::normal_tensor(&mut r, 128, 2);
    let t: Vec<usize> = (0..128).map(|i| 1 + i * 7).collect();

    c.bench_function("denoise/128x2/h64", |b| b.iter(|| m.predict(black_box(&x), &t, CondInput::Null).unwrap()));

    let mut m_train = m.clone();
    let mut opt = mecdiff::AdamState::with_lr(m_train.denoiser.params(), 1e-3).unwrap();
    c.bench_function("train_step/128x2/h64", |b| {
        b.iter(|| diffusion::train_step(&mut m_train, &mut opt, &x, None, 0.0, Some(1.0), &mut r).unwrap())
    });

    let sc = SampleConfig { n_steps: 50, guidance: 0.0, eta: 1.0, record_trajectory: false, seed: 0 };
    c.bench_function("sample/64x2/ddim50", |b| b.iter(|| diffusion::sample(&m, None, 64, &sc, &mut r).unwrap()));

    let x0 = rng::normal_tensor(&mut r, 64, 2);
    c.bench_function("estimate_nll/64x2/k3", |b| b.iter(|| diffusion::estimate_nll(&m, &x0, None, &NllOptions::new(3), &mut r).unwrap()));

    let small = model(2, 32, &mut r);
    let pair = CouplingPair::from_anchors(small.clone(), small, &mut r).unwrap();
    let dx = rng::normal_tensor(&mut r, 500, 2);
    let dy = rng::normal_tensor(&mut r, 500, 2);
    let cfg = RLConfig { grad_accum: 1, ddim_steps: 10, ..RLConfig::default() };
    c.bench_function("coupling_iteration/b16/ddim10", |b| {
        b.iter_batched(
            || CouplingTrainer::new(pair.clone(), cfg.clone()).unwrap(),
            |mut tr| tr.step(&dx, &dy, &mut rng::seeded(1)).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let px = [0.35, 0.25, 0.2, 0.15, 0.05];
    let py = [0.3, 0.3, 0.2, 0.1, 0.1];
    c.bench_function("mec_oracle/5x5", |b| {
        b.iter(|| discrete_mec_oracle(black_box(&px), black_box(&py), 1e-9, &mut rng::seeded(2)).unwrap())
    });
}
