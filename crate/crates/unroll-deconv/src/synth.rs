//! Bundled synthetic digit-like fixtures: seeded stroke drawings used by
//! the benchmark when no IDX dataset file is supplied.

use crate::grid::{conv_same, BoundaryMode, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// A 28x28 digit-like image: a few smooth dark strokes on a white
/// background (pen on paper), intensities in [0,1]. Deterministic in
/// (seed, index).
///
/// The bright background is deliberate: the sigmoid-constrained network
/// represents bright fields with positive weights, which keeps the
/// rational layer denominators positive and the training well-behaved,
/// whereas an all-black background pins the estimate at mid-gray.
pub fn digit_like(seed: u64, index: usize) -> Grid {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let side = 28usize;
    let mut img = Grid::zeros(side, side);
    let strokes = rng.gen_range(2..=4);
    for _ in 0..strokes {
        // quadratic Bezier stroke within the central 20x20 region
        let p = |rng: &mut ChaCha20Rng| {
            (rng.gen_range(4.0..24.0), rng.gen_range(4.0..24.0))
        };
        let (x0, y0) = p(&mut rng);
        let (x1, y1) = p(&mut rng);
        let (cx, cy) = p(&mut rng);
        let steps = 60;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * x0 + 2.0 * u * t * cx + t * t * x1;
            let y = u * u * y0 + 2.0 * u * t * cy + t * t * y1;
            splat(&mut img, y, x);
        }
    }
    // light smoothing, then clamp
    let blur = Grid::from_vec(
        3,
        3,
        vec![0.06, 0.12, 0.06, 0.12, 0.28, 0.12, 0.06, 0.12, 0.06],
    )
    .unwrap();
    conv_same(&img, &blur, BoundaryMode::ZeroPadSame)
        .unwrap()
        .map(|v| 1.0 - v.clamp(0.0, 1.0))
}

fn splat(img: &mut Grid, y: f64, x: f64) {
    let (i0, j0) = (y.floor() as isize, x.floor() as isize);
    let (fy, fx) = (y - y.floor(), x - x.floor());
    for (di, dj, w) in [
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ] {
        let (i, j) = (i0 + di, j0 + dj);
        if i >= 0 && j >= 0 && (i as usize) < img.rows() && (j as usize) < img.cols() {
            let v = img.get(i as usize, j as usize) + 1.4 * w;
            img.set(i as usize, j as usize, v.min(1.0));
        }
    }
}
