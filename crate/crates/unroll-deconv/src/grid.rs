//! Dense 2D grids of f64 and the convolution/correlation primitives the
//! rest of the toolkit is built on.
//!
//! Grids are immutable value objects once constructed; every operation
//! returns a fresh grid, so they are safe to share across threads.

use crate::error::{DeconvError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Boundary handling for same-size convolution and correlation.
///
/// `Circular` wraps indices (makes the RL fixed-point identities exact);
/// `ZeroPadSame` treats out-of-range samples as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryMode {
    Circular,
    ZeroPadSame,
}

/// Additive white Gaussian noise parameters. Deterministic given the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(DeconvError::InvalidArgument(format!(
                "noise sigma must be >= 0, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }
}

/// Row-major dense 2D array of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "grid dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "grid dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(DeconvError::ShapeMismatch(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Uniform U(0,1) entries from a seeded generator.
    pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Self {
        let dist = Uniform::new(0.0, 1.0);
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    /// Unit impulse at the centre index (floor(rows/2), floor(cols/2)).
    pub fn delta(rows: usize, cols: usize) -> Self {
        let mut g = Self::zeros(rows, cols);
        let c = (rows / 2) * cols + cols / 2;
        g.data[c] = 1.0;
        g
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_same_shape(other)?;
        Ok(Grid {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Grid {
        self.map(|v| c * v)
    }

    /// Squared L2 distance to another grid of the same shape.
    pub fn sq_dist(&self, other: &Grid) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }

    fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(DeconvError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Sample with boundary handling; `i`/`j` may be out of range.
    #[inline]
    pub(crate) fn sample(&self, i: isize, j: isize, mode: BoundaryMode) -> f64 {
        match mode {
            BoundaryMode::Circular => {
                let i = i.rem_euclid(self.rows as isize) as usize;
                let j = j.rem_euclid(self.cols as isize) as usize;
                self.data[i * self.cols + j]
            }
            BoundaryMode::ZeroPadSame => {
                if i < 0 || j < 0 || i >= self.rows as isize || j >= self.cols as isize {
                    0.0
                } else {
                    self.data[i as usize * self.cols + j as usize]
                }
            }
        }
    }
}

/// 180-degree rotation (reversal of both axes).
pub fn flip180(g: &Grid) -> Grid {
    let mut data = g.data.clone();
    data.reverse();
    Grid {
        rows: g.rows,
        cols: g.cols,
        data,
    }
}

/// Elementwise max(v, 0).
pub fn relu_map(g: &Grid) -> Grid {
    g.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Elementwise logistic sigmoid; outputs strictly in (0,1).
pub fn sigmoid_map(g: &Grid) -> Grid {
    g.map(sigmoid)
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise num / (den + eps).
pub fn safe_div(num: &Grid, den: &Grid, eps: f64) -> Result<Grid> {
    num.zip_map(den, |n, d| n / (d + eps))
}

fn check_kernel_fits(image: &Grid, krows: usize, kcols: usize) -> Result<()> {
    if krows > image.rows || kcols > image.cols {
        return Err(DeconvError::KernelTooLarge {
            krows,
            kcols,
            irows: image.rows,
            icols: image.cols,
        });
    }
    Ok(())
}

#[inline]
fn conv_row(out: &mut [f64], i: usize, image: &Grid, kernel: &Grid, mode: BoundaryMode) {
    let (m, n) = kernel.shape();
    let (cu, cv) = (m / 2, n / 2);
    for j in 0..image.cols {
        let mut acc = 0.0;
        for u in 0..m {
            let si = i as isize - (u as isize - cu as isize);
            for v in 0..n {
                let sj = j as isize - (v as isize - cv as isize);
                acc += kernel.get(u, v) * image.sample(si, sj, mode);
            }
        }
        out[j] = acc;
    }
}

// Work per output row below which the parallel path is not worth spawning.
#[cfg(feature = "parallel")]
const PAR_ROW_WORK: usize = 1 << 14;

/// Same-size 2D convolution with kernel centre (floor(m/2), floor(n/2)).
///
/// Dispatches to the data-parallel path when built with the `parallel`
/// feature and the instance is large enough; both paths produce bitwise
/// identical results (rows are independent, no cross-thread reduction).
pub fn conv_same(image: &Grid, kernel: &Grid, mode: BoundaryMode) -> Result<Grid> {
    #[cfg(feature = "parallel")]
    {
        if image.cols * kernel.len() >= PAR_ROW_WORK && image.rows > 1 {
            return conv_same_par(image, kernel, mode);
        }
    }
    conv_same_seq(image, kernel, mode)
}

/// Sequential reference path for [`conv_same`].
pub fn conv_same_seq(image: &Grid, kernel: &Grid, mode: BoundaryMode) -> Result<Grid> {
    check_kernel_fits(image, kernel.rows, kernel.cols)?;
    let mut out = Grid::zeros(image.rows, image.cols);
    let cols = image.cols;
    for i in 0..image.rows {
        conv_row(&mut out.data[i * cols..(i + 1) * cols], i, image, kernel, mode);
    }
    Ok(out)
}

/// Row-parallel path for [`conv_same`]; bitwise identical to the
/// sequential path.
#[cfg(feature = "parallel")]
pub fn conv_same_par(image: &Grid, kernel: &Grid, mode: BoundaryMode) -> Result<Grid> {
    check_kernel_fits(image, kernel.rows, kernel.cols)?;
    let mut out = Grid::zeros(image.rows, image.cols);
    let cols = image.cols;
    out.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| conv_row(row, i, image, kernel, mode));
    Ok(out)
}

/// Correlation of `ratio` against `image` restricted to an m x n kernel
/// window: out[u,v] = sum_{i,j} ratio[i,j] * image[i-(u-cu), j-(v-cv)].
pub fn corr_kernel_window(
    ratio: &Grid,
    image: &Grid,
    kshape: (usize, usize),
    mode: BoundaryMode,
) -> Result<Grid> {
    let (m, n) = kshape;
    if m == 0 || n == 0 {
        return Err(DeconvError::InvalidArgument(
            "kernel window must be non-empty".into(),
        ));
    }
    check_kernel_fits(image, m, n)?;
    ratio.check_same_shape(image)?;
    let (cu, cv) = (m / 2, n / 2);
    let mut out = Grid::zeros(m, n);
    for u in 0..m {
        for v in 0..n {
            let mut acc = 0.0;
            for i in 0..image.rows {
                let si = i as isize - (u as isize - cu as isize);
                for j in 0..image.cols {
                    let sj = j as isize - (v as isize - cv as isize);
                    acc += ratio.get(i, j) * image.sample(si, sj, mode);
                }
            }
            out.set(u, v, acc);
        }
    }
    Ok(out)
}

/// Adjoint of [`conv_same`] with respect to its image argument:
/// out[p,q] = sum_{u,v} kernel[u,v] * adj[p+(u-cu), q+(v-cv)].
///
/// Under ZeroPadSame no gradient flows to the virtual padding.
pub(crate) fn corr_image(adj: &Grid, kernel: &Grid, mode: BoundaryMode) -> Result<Grid> {
    check_kernel_fits(adj, kernel.rows, kernel.cols)?;
    let (m, n) = kernel.shape();
    let (cu, cv) = (m / 2, n / 2);
    let mut out = Grid::zeros(adj.rows, adj.cols);
    for p in 0..adj.rows {
        for q in 0..adj.cols {
            let mut acc = 0.0;
            for u in 0..m {
                let si = p as isize + (u as isize - cu as isize);
                for v in 0..n {
                    let sj = q as isize + (v as isize - cv as isize);
                    acc += kernel.get(u, v) * adj.sample(si, sj, mode);
                }
            }
            out.set(p, q, acc);
        }
    }
    Ok(out)
}

/// Adds seeded i.i.d. Gaussian(0, sigma^2) noise. sigma = 0 returns the
/// input bit-exactly.
pub fn add_awgn(g: &Grid, spec: &NoiseSpec) -> Grid {
    if spec.sigma == 0.0 {
        return g.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.sigma).expect("sigma validated nonnegative");
    let mut out = g.clone();
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_grid(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Grid {
        Grid::uniform(rows, cols, rng)
    }

    /// Independent triple-loop convolution oracle, written directly from
    /// the definition with explicit wrap/zero logic.
    fn naive_conv(image: &Grid, kernel: &Grid, mode: BoundaryMode) -> Grid {
        let (rows, cols) = image.shape();
        let (m, n) = kernel.shape();
        let (cu, cv) = (m as isize / 2, n as isize / 2);
        let mut out = Grid::zeros(rows, cols);
        for i in 0..rows as isize {
            for j in 0..cols as isize {
                let mut acc = 0.0;
                for u in 0..m as isize {
                    for v in 0..n as isize {
                        let (mut si, mut sj) = (i - (u - cu), j - (v - cv));
                        let val = match mode {
                            BoundaryMode::Circular => {
                                while si < 0 {
                                    si += rows as isize;
                                }
                                while sj < 0 {
                                    sj += cols as isize;
                                }
                                image.get(si as usize % rows, sj as usize % cols)
                            }
                            BoundaryMode::ZeroPadSame => {
                                if si < 0 || sj < 0 || si >= rows as isize || sj >= cols as isize {
                                    0.0
                                } else {
                                    image.get(si as usize, sj as usize)
                                }
                            }
                        };
                        acc += kernel.get(u as usize, v as usize) * val;
                    }
                }
                out.set(i as usize, j as usize, acc);
            }
        }
        out
    }

    fn naive_corr_window(
        ratio: &Grid,
        image: &Grid,
        (m, n): (usize, usize),
        mode: BoundaryMode,
    ) -> Grid {
        let (cu, cv) = (m as isize / 2, n as isize / 2);
        let mut out = Grid::zeros(m, n);
        for u in 0..m as isize {
            for v in 0..n as isize {
                let mut acc = 0.0;
                for i in 0..ratio.rows() as isize {
                    for j in 0..ratio.cols() as isize {
                        acc += ratio.get(i as usize, j as usize)
                            * image.sample(i - (u - cu), j - (v - cv), mode);
                    }
                }
                out.set(u as usize, v as usize, acc);
            }
        }
        out
    }

    #[test]
    fn flip_singleton_and_2x2() {
        let g = Grid::from_vec(1, 1, vec![3.5]).unwrap();
        assert_eq!(flip180(&g), g);
        let g = Grid::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = flip180(&g);
        assert_eq!(f.values(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn flip_is_involution() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let g = rand_grid(5, 7, &mut rng);
        assert_eq!(flip180(&flip180(&g)), g);
    }

    #[test]
    fn conv_identity_kernel_both_modes() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let g = rand_grid(6, 5, &mut rng);
        let id = Grid::from_vec(1, 1, vec![1.0]).unwrap();
        for mode in [BoundaryMode::Circular, BoundaryMode::ZeroPadSame] {
            assert_eq!(conv_same(&g, &id, mode).unwrap(), g);
        }
    }

    #[test]
    fn conv_all_ones_circular() {
        let g = Grid::filled(3, 3, 1.0);
        let k = Grid::filled(3, 3, 1.0);
        let out = conv_same(&g, &k, BoundaryMode::Circular).unwrap();
        for &v in out.values() {
            assert!((v - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for mode in [BoundaryMode::Circular, BoundaryMode::ZeroPadSame] {
            let img = rand_grid(6, 6, &mut rng);
            let k = rand_grid(3, 3, &mut rng);
            let got = conv_same(&img, &k, mode).unwrap();
            let want = naive_conv(&img, &k, mode);
            for (a, b) in got.values().iter().zip(want.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_even_kernel_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for mode in [BoundaryMode::Circular, BoundaryMode::ZeroPadSame] {
            let img = rand_grid(7, 5, &mut rng);
            let k = rand_grid(2, 4, &mut rng);
            let got = conv_same(&img, &k, mode).unwrap();
            let want = naive_conv(&img, &k, mode);
            for (a, b) in got.values().iter().zip(want.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let img = Grid::zeros(2, 2);
        let k = Grid::zeros(3, 3);
        assert!(conv_same(&img, &k, BoundaryMode::Circular).is_err());
    }

    #[test]
    fn conv_is_bilinear_circular() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let i1 = rand_grid(5, 5, &mut rng);
        let i2 = rand_grid(5, 5, &mut rng);
        let k = rand_grid(3, 3, &mut rng);
        let (a, b) = (1.7, -0.6);
        let lhs = conv_same(
            &i1.scale(a).add(&i2.scale(b)).unwrap(),
            &k,
            BoundaryMode::Circular,
        )
        .unwrap();
        let rhs = conv_same(&i1, &k, BoundaryMode::Circular)
            .unwrap()
            .scale(a)
            .add(&conv_same(&i2, &k, BoundaryMode::Circular).unwrap().scale(b))
            .unwrap();
        for (x, y) in lhs.values().iter().zip(rhs.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_circular_preserves_mass() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let img = rand_grid(8, 6, &mut rng);
        let k = rand_grid(3, 5, &mut rng);
        let out = conv_same(&img, &k, BoundaryMode::Circular).unwrap();
        let want = k.sum() * img.sum();
        assert!((out.sum() - want).abs() / want.abs() < 1e-9);
    }

    #[test]
    fn corr_window_constant_ratio_gives_total_mass() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let img = rand_grid(6, 6, &mut rng);
        let ones = Grid::filled(6, 6, 1.0);
        let out = corr_kernel_window(&ones, &img, (3, 3), BoundaryMode::Circular).unwrap();
        for &v in out.values() {
            assert!((v - img.sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn corr_window_delta_image_extracts_window() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ratio = rand_grid(7, 7, &mut rng);
        let img = Grid::delta(7, 7);
        let got = corr_kernel_window(&ratio, &img, (3, 3), BoundaryMode::ZeroPadSame).unwrap();
        let want = naive_corr_window(&ratio, &img, (3, 3), BoundaryMode::ZeroPadSame);
        for (a, b) in got.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        // with a centre delta the window is ratio sampled around the centre
        // with the (u-cu) offset convention
        let c = 3isize;
        for u in 0..3isize {
            for v in 0..3isize {
                let expect = ratio.get((c + (u - 1)) as usize, (c + (v - 1)) as usize);
                assert!((got.get(u as usize, v as usize) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corr_window_matches_oracle_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for mode in [BoundaryMode::Circular, BoundaryMode::ZeroPadSame] {
            for _ in 0..10 {
                let rows = rng.gen_range(3..=10);
                let cols = rng.gen_range(3..=10);
                let ratio = rand_grid(rows, cols, &mut rng);
                let img = rand_grid(rows, cols, &mut rng);
                let got = corr_kernel_window(&ratio, &img, (3, 3), mode).unwrap();
                let want = naive_corr_window(&ratio, &img, (3, 3), mode);
                for (a, b) in got.values().iter().zip(want.values()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn safe_div_basics() {
        let num = Grid::filled(2, 2, 1.0);
        let den = Grid::zeros(2, 2);
        let out = safe_div(&num, &den, 1e-8).unwrap();
        for &v in out.values() {
            assert!((v - 1e8).abs() / 1e8 < 1e-12);
        }
        let den1 = Grid::filled(2, 2, 1.0);
        let out = safe_div(&num, &den1, 1e-8).unwrap();
        for &v in out.values() {
            assert!((v - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
        }
        let bad = Grid::zeros(3, 2);
        assert!(safe_div(&num, &bad, 1e-8).is_err());
    }

    #[test]
    fn relu_and_sigmoid() {
        let g = Grid::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_map(&g).values(), &[0.0, 0.0, 2.0]);
        let s = sigmoid_map(&Grid::from_vec(1, 1, vec![0.0]).unwrap());
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        let s = sigmoid_map(&Grid::from_vec(1, 1, vec![-20.0]).unwrap());
        assert!(s.get(0, 0) > 0.0 && s.get(0, 0) < 1e-6);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let g = rand_grid(4, 4, &mut rng).map(|v| (v - 0.5) * 40.0);
        for &v in sigmoid_map(&g).values() {
            assert!(v > 0.0 && v < 1.0);
        }
        for &v in relu_map(&g).values() {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn awgn_zero_sigma_and_determinism() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let g = rand_grid(4, 4, &mut rng);
        let spec = NoiseSpec::new(0.0, 42).unwrap();
        assert_eq!(add_awgn(&g, &spec), g);
        let spec = NoiseSpec::new(0.3, 42).unwrap();
        assert_eq!(add_awgn(&g, &spec), add_awgn(&g, &spec));
    }

    #[test]
    fn awgn_sample_std() {
        let g = Grid::zeros(100, 100);
        let spec = NoiseSpec::new(0.1, 7).unwrap();
        let noisy = add_awgn(&g, &spec);
        let mean = noisy.mean();
        let var = noisy
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (noisy.len() as f64 - 1.0);
        let std = var.sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.05, "sample std {std}");
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(NoiseSpec::new(-0.1, 0).is_err());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_conv_bitwise_equals_sequential() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let img = rand_grid(40, 40, &mut rng);
        let k = rand_grid(7, 7, &mut rng);
        for mode in [BoundaryMode::Circular, BoundaryMode::ZeroPadSame] {
            assert_eq!(
                conv_same_par(&img, &k, mode).unwrap(),
                conv_same_seq(&img, &k, mode).unwrap()
            );
        }
    }
}
