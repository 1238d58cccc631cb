use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icmp_compute::hopfield::{hebb_couplings, Pattern};
use icmp_compute::icmp::EchoMessage;
use icmp_compute::life::LifeGrid;
use icmp_compute::ocarith::OcWord;
use icmp_compute::par;

fn checksum_trials(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let msgs: Vec<EchoMessage> = (0..4096)
        .map(|_| {
            let data = (0..32).map(|_| OcWord(rng.random())).collect();
            EchoMessage::request(OcWord(rng.random()), OcWord(rng.random()), data).seal()
        })
        .collect();
    let mut g = c.benchmark_group("checksum_validate_4096");
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_indexed_sequential(msgs.len(), |i| msgs[i].validate() as u8))
    });
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| {
        b.iter(|| par::map_indexed_parallel(msgs.len(), |i| msgs[i].validate() as u8))
    });
    g.finish();
}

fn hebb(c: &mut Criterion) {
    let mut g = c.benchmark_group("hebb_couplings");
    g.sample_size(10);
    for n in [256usize, 512] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patterns: Vec<Pattern> = (0..32).map(|_| Pattern::random(n, &mut rng)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &patterns, |b, p| {
            b.iter(|| hebb_couplings(p, 15).unwrap())
        });
    }
    g.finish();
}

fn life_control(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = LifeGrid::random(200, 500, 0.3, &mut rng).unwrap();
    let mut g = c.benchmark_group("life_step_200x500");
    g.bench_function("sequential", |b| b.iter(|| grid.step_oracle_sequential()));
    g.bench_function("dispatch", |b| b.iter(|| grid.step_oracle()));
    g.finish();
}

criterion_group!(benches, checksum_trials, hebb, life_control);
criterion_main!(benches);
