use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use airfeel::channel::{transmit, ActivityVector, ChannelConfig};
use airfeel::decoder::{decode, DecoderParams, BASELINE_LAYERS};
use airfeel::feel_sim::{FeelConfig, Receiver, Simulation};
use airfeel::par::{self, Exec};
use airfeel::rng;
use airfeel::ura_codebook::{init_base, synthesize, InitScheme, ShearMatrix};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn decode_batch(c: &mut Criterion) {
    let (n, d, trials) = (256, 64, 32);
    let cb = synthesize(
        &init_base(n, d, InitScheme::Gaussian, 1, None).unwrap(),
        &ShearMatrix::identity(d),
    )
    .unwrap();
    let params = DecoderParams::baseline(BASELINE_LAYERS);
    let prior = vec![1.0 / n as f64; n];
    let mut g = rng::stream(2, &[0]);
    let ys: Vec<_> = (0..trials)
        .map(|i| {
            let k = g.random_range(7..=13);
            let x = ActivityVector::from_indices(n, (0..k).map(|_| g.random_range(0..n)));
            transmit(&x, &cb, &ChannelConfig { snr_db: 10.0, seed: i }).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("decode_batch");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::map_indexed(exec, ys.len(), |i| {
                    decode(&ys[i], &cb, &prior, &params, 0.02, None).is_ok()
                })
            })
        });
    }
    group.finish();
}

fn feel_round(c: &mut Criterion) {
    let cfg = FeelConfig::default();
    let mut group = c.benchmark_group("feel_round");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || {
                    Simulation::new(cfg.clone(), Receiver::Pa, f64::INFINITY, 3)
                        .unwrap()
                        .with_exec(exec)
                },
                |mut sim| black_box(sim.run_round().unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, decode_batch, feel_round);
criterion_main!(benches);
