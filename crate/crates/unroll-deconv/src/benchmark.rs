//! MNIST-style benchmark comparing blind RL against the unfolded
//! network on a set of synthetically blurred images. Used by the `bench`
//! CLI subcommand; independent per-image runs fan out to a worker pool.

use crate::durl::{train, TrainConfig};
use crate::error::Result;
use crate::grid::{BoundaryMode, Grid, NoiseSpec};
use crate::io::{gen_motion_kernel, make_blurred_pair, pad_for_kernel, parse_idx_images};
use crate::metrics::{isnr, kernel_rmse, psnr, ssim, SsimParams};
use crate::rl::rl_blind;
use crate::synth::digit_like;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::PathBuf;
use std::time::Instant;

pub const THREADS_ENV: &str = "UNROLL_DECONV_THREADS";

#[derive(Debug, Clone)]
pub enum BenchSource {
    /// Bundled synthetic digit-like fixtures.
    Synthetic,
    /// Images drawn from an MNIST IDX file.
    Idx(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub count: usize,
    pub layers: usize,
    pub epochs: usize,
    pub kshape: (usize, usize),
    pub sigma: f64,
    pub seed: u64,
    pub lr0: f64,
    pub lambda: f64,
    pub mode: BoundaryMode,
    pub source: BenchSource,
}

impl BenchConfig {
    pub fn desk_scale(count: usize, layers: usize, epochs: usize, seed: u64) -> Self {
        Self {
            count,
            layers,
            epochs,
            kshape: (5, 5),
            sigma: 0.0,
            seed,
            lr0: 0.1,
            lambda: 0.1,
            mode: BoundaryMode::ZeroPadSame,
            source: BenchSource::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub id: usize,
    pub method: &'static str,
    pub layers: usize,
    pub epochs: usize,
    pub psnr_db: f64,
    pub isnr_db: f64,
    pub ssim: f64,
    pub rmse_raw: f64,
    pub rmse_aligned: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodMeans {
    pub psnr_db: f64,
    pub isnr_db: f64,
    pub ssim: f64,
    pub rmse_raw: f64,
    pub rmse_aligned: f64,
}

#[derive(Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub rl: MethodMeans,
    pub durl: MethodMeans,
}

fn method_means<'a>(rows: impl Iterator<Item = &'a BenchRow>) -> MethodMeans {
    let mut m = MethodMeans::default();
    let mut count = 0usize;
    for r in rows {
        m.psnr_db += r.psnr_db;
        m.isnr_db += r.isnr_db;
        m.ssim += r.ssim;
        m.rmse_raw += r.rmse_raw;
        m.rmse_aligned += r.rmse_aligned;
        count += 1;
    }
    if count > 0 {
        let c = count as f64;
        m.psnr_db /= c;
        m.isnr_db /= c;
        m.ssim /= c;
        m.rmse_raw /= c;
        m.rmse_aligned /= c;
    }
    m
}

fn score(
    truth: &Grid,
    blurred: &Grid,
    estimate: &Grid,
    kernel_true: &Grid,
    kernel_est: &Grid,
    p: &SsimParams,
) -> Result<(f64, f64, f64, f64, f64)> {
    Ok((
        psnr(truth, estimate, 1.0)?,
        isnr(truth, blurred, estimate)?,
        ssim(truth, estimate, p)?,
        kernel_rmse(kernel_true, kernel_est, false)?,
        kernel_rmse(kernel_true, kernel_est, true)?,
    ))
}

fn run_one(cfg: &BenchConfig, truth28: &Grid, id: usize) -> Result<Vec<BenchRow>> {
    // IDX images (ink on black) get a zero-pad apron so kernel-sized blur
    // cannot push stroke mass off the canvas; the bundled fixtures are
    // ink-on-white with built-in margins, where a zero (black) apron
    // would itself be an artifact.
    let truth = match cfg.source {
        BenchSource::Idx(_) => pad_for_kernel(truth28, cfg.kshape),
        BenchSource::Synthetic => truth28.clone(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(id as u64).wrapping_mul(0x5851_f42d_4c95_7f2d));
    let max_len = cfg.kshape.0.min(cfg.kshape.1) as f64;
    let length = rng.gen_range(max_len * 0.4..max_len * 0.9);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let kernel = gen_motion_kernel(cfg.kshape, length, angle, rng.gen())?;
    let noise = NoiseSpec::new(cfg.sigma, rng.gen())?;
    let item = make_blurred_pair(&truth, &kernel, noise, cfg.mode, id)?;
    let ssim_params = SsimParams::for_shape(truth.rows(), truth.cols());
    let run_seed: u64 = rng.gen();

    let started = Instant::now();
    let (x_rl, h_rl, _) = rl_blind(&item.blurred, cfg.kshape, cfg.layers, run_seed, cfg.mode)?;
    let rl_seconds = started.elapsed().as_secs_f64();
    let (psnr_db, isnr_db, ssim_v, raw, aligned) =
        score(&truth, &item.blurred, &x_rl, &kernel, &h_rl, &ssim_params)?;
    let rl_row = BenchRow {
        id,
        method: "rl",
        layers: cfg.layers,
        epochs: cfg.layers,
        psnr_db,
        isnr_db,
        ssim: ssim_v,
        rmse_raw: raw,
        rmse_aligned: aligned,
        seconds: rl_seconds,
    };

    let mut tc = TrainConfig::new(cfg.layers, cfg.kshape);
    tc.epochs = cfg.epochs;
    tc.lr0 = cfg.lr0;
    tc.lambda = cfg.lambda;
    tc.mode = cfg.mode;
    tc.seed = run_seed;
    let started = Instant::now();
    let result = train(std::slice::from_ref(&item.blurred), &tc)?;
    let durl_seconds = started.elapsed().as_secs_f64();
    let (psnr_db, isnr_db, ssim_v, raw, aligned) = score(
        &truth,
        &item.blurred,
        &result.images[0],
        &kernel,
        &result.kernel,
        &ssim_params,
    )?;
    let durl_row = BenchRow {
        id,
        method: "durl",
        layers: cfg.layers,
        epochs: cfg.epochs,
        psnr_db,
        isnr_db,
        ssim: ssim_v,
        rmse_raw: raw,
        rmse_aligned: aligned,
        seconds: durl_seconds,
    };
    Ok(vec![rl_row, durl_row])
}

fn load_truths(cfg: &BenchConfig) -> Result<Vec<Grid>> {
    match &cfg.source {
        BenchSource::Synthetic => Ok((0..cfg.count).map(|i| digit_like(cfg.seed, i)).collect()),
        BenchSource::Idx(path) => {
            let bytes = std::fs::read(path)?;
            let all = parse_idx_images(&bytes)?;
            // seeded random draw without replacement
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            let mut indices: Vec<usize> = (0..all.len()).collect();
            for i in 0..cfg.count.min(indices.len()) {
                let j = rng.gen_range(i..indices.len());
                indices.swap(i, j);
            }
            Ok(indices
                .into_iter()
                .take(cfg.count)
                .map(|i| all[i].clone())
                .collect())
        }
    }
}

/// Runs the full benchmark; per-image runs execute on a worker pool
/// capped by the UNROLL_DECONV_THREADS env var when built with the
/// `parallel` feature. Row order (and every number) is independent of
/// the pool size.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let truths = load_truths(cfg)?;
    let per_image: Vec<Vec<BenchRow>> = run_fanout(cfg, &truths)?;
    let rows: Vec<BenchRow> = per_image.into_iter().flatten().collect();
    let rl = method_means(rows.iter().filter(|r| r.method == "rl"));
    let durl = method_means(rows.iter().filter(|r| r.method == "durl"));
    Ok(BenchReport { rows, rl, durl })
}

#[cfg(feature = "parallel")]
fn run_fanout(cfg: &BenchConfig, truths: &[Grid]) -> Result<Vec<Vec<BenchRow>>> {
    use rayon::prelude::*;
    let pool = match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        _ => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| crate::error::DeconvError::InvalidArgument(e.to_string()))?;
    pool.install(|| {
        truths
            .par_iter()
            .enumerate()
            .map(|(id, t)| run_one(cfg, t, id))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn run_fanout(cfg: &BenchConfig, truths: &[Grid]) -> Result<Vec<Vec<BenchRow>>> {
    truths
        .iter()
        .enumerate()
        .map(|(id, t)| run_one(cfg, t, id))
        .collect()
}

pub const CSV_HEADER: &str =
    "id,method,layers,epochs,psnr_db,isnr_db,ssim,rmse_raw,rmse_aligned,seconds";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.3}\n",
            r.id,
            r.method,
            r.layers,
            r.epochs,
            r.psnr_db,
            r.isnr_db,
            r.ssim,
            r.rmse_raw,
            r.rmse_aligned,
            r.seconds
        ));
    }
    out
}

pub fn to_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>4} {:>6} {:>7} {:>7} {:>9} {:>9} {:>7} {:>10} {:>10} {:>8}\n",
        "id", "method", "layers", "epochs", "psnr_db", "isnr_db", "ssim", "rmse_raw",
        "rmse_align", "seconds"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:>4} {:>6} {:>7} {:>7} {:>9.4} {:>9.4} {:>7.4} {:>10.3e} {:>10.3e} {:>8.2}\n",
            r.id, r.method, r.layers, r.epochs, r.psnr_db, r.isnr_db, r.ssim, r.rmse_raw,
            r.rmse_aligned, r.seconds
        ));
    }
    for (name, m) in [("rl", &report.rl), ("durl", &report.durl)] {
        out.push_str(&format!(
            "mean {:>6} {:>25.4} {:>9.4} {:>7.4} {:>10.3e} {:>10.3e}\n",
            name, m.psnr_db, m.isnr_db, m.ssim, m.rmse_raw, m.rmse_aligned
        ));
    }
    out
}
