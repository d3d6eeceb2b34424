//! Compares the sequential convolution core against the rayon-parallel
//! one, plus an end-to-end RL iteration, across image sizes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use unroll_deconv::grid::{conv_same_seq, BoundaryMode, Grid};
use unroll_deconv::rl::{rl_update_image, rl_update_kernel, RlState, DEFAULT_EPS};

#[cfg(feature = "parallel")]
use unroll_deconv::grid::conv_same_par;

fn conv_benches(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_same");
    for size in [32usize, 128, 512] {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let image = Grid::uniform(size, size, &mut rng);
        let kernel = Grid::uniform(9, 9, &mut rng);
        group.bench_with_input(BenchmarkId::new("seq", size), &size, |b, _| {
            b.iter(|| conv_same_seq(&image, &kernel, BoundaryMode::ZeroPadSame).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", size), &size, |b, _| {
            b.iter(|| conv_same_par(&image, &kernel, BoundaryMode::ZeroPadSame).unwrap())
        });
    }
    group.finish();
}

fn rl_iteration(c: &mut Criterion) {
    let mut group = c.benchmark_group("rl_iteration");
    for size in [64usize, 256] {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let y = Grid::uniform(size, size, &mut rng);
        let state = RlState {
            x: Grid::uniform(size, size, &mut rng),
            kernel: Grid::uniform(5, 5, &mut rng),
            iteration: 0,
        };
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| {
                let h = rl_update_kernel(&y, &state, BoundaryMode::ZeroPadSame, DEFAULT_EPS)
                    .unwrap();
                rl_update_image(&y, &state.x, &h, BoundaryMode::ZeroPadSame, DEFAULT_EPS).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_benches, rl_iteration);
criterion_main!(benches);
