//! Command-line front end: synthesis, deblurring, training, gradient
//! checking, benchmarking, and bit-exact replay of recorded runs.

use crate::autodiff::grad_check;
use crate::benchmark::{run_bench, to_csv, to_table, BenchConfig, BenchSource};
use crate::durl::{deblur_with_weights, durl_loss, forward_unrolled, train, TrainConfig, TrainState};
use crate::error::{DeconvError, Result};
use crate::grid::{conv_same, BoundaryMode, Grid, NoiseSpec};
use crate::io::{gen_motion_kernel, make_blurred_pair, read_kernel_text, read_pgm, write_kernel_text, write_pgm};
use crate::manifest::{finite, InputRecord, MetricsBlock, ReplaySpec, RunManifest};
use crate::metrics::{isnr, kernel_rmse, psnr, ssim, SsimParams};
use crate::rl::rl_blind;
use crate::autodiff::Tape;
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(name = "unroll-deconv", version, about = "Blind deconvolution: classic RL and its deep-unfolded variant")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Boundary {
    Circular,
    Zeropad,
}

impl From<Boundary> for BoundaryMode {
    fn from(b: Boundary) -> Self {
        match b {
            Boundary::Circular => BoundaryMode::Circular,
            Boundary::Zeropad => BoundaryMode::ZeroPadSame,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur an image with a kernel (from file or generated) plus AWGN.
    Blur {
        #[arg(long)]
        image: PathBuf,
        /// Kernel file (plain-text grid format).
        #[arg(long)]
        kernel: Option<PathBuf>,
        /// Generate a seeded motion kernel of this size instead.
        #[arg(long = "kernel-size", num_args = 2, value_names = ["M", "N"])]
        kernel_size: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Boundary::Zeropad)]
        boundary: Boundary,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Classic blind Richardson-Lucy deconvolution.
    Rl {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "kernel-size", num_args = 2, value_names = ["M", "N"], required = true)]
        kernel_size: Vec<usize>,
        /// Number of RL iterations.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Boundary::Zeropad)]
        boundary: Boundary,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Ground-truth image for evaluation metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Ground-truth kernel for RMSE.
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Train the deep-unfolded RL network on blurred image(s).
    Durl {
        /// Blurred input image(s); repeat for a batch sharing one kernel.
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        #[arg(long = "kernel-size", num_args = 2, value_names = ["M", "N"], required = true)]
        kernel_size: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 5000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = Boundary::Zeropad)]
        boundary: Boundary,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Deblur a new image with previously trained weights.
    Transfer {
        #[arg(long)]
        image: PathBuf,
        /// weights.json produced by a durl run.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Evaluate metrics between images (and optionally kernels).
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// Estimate image.
        #[arg(long)]
        image: PathBuf,
        /// Blurred observation, for ISNR.
        #[arg(long)]
        blurred: Option<PathBuf>,
        /// Ground-truth kernel.
        #[arg(long)]
        kernel: Option<PathBuf>,
        /// Estimated kernel.
        #[arg(long = "kernel-est")]
        kernel_est: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Square image side.
        #[arg(long, default_value_t = 8)]
        image: usize,
        /// Square kernel side.
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Benchmark RL vs the unfolded network over a set of images.
    Bench {
        /// Dataset: "mnist" (synthetic digit-like fixtures, or an IDX
        /// file via --idx).
        dataset: String,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long = "kernel-size", num_args = 2, value_names = ["M", "N"], default_values_t = [5, 5])]
        kernel_size: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = Boundary::Zeropad)]
        boundary: Boundary,
        /// MNIST IDX image file to draw from instead of fixtures.
        #[arg(long)]
        idx: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-execute a recorded run and verify it reproduces bit-exactly.
    Replay {
        manifest: PathBuf,
    },
}

/// Persisted trained weights, sufficient for `transfer`.
#[derive(Debug, Serialize, Deserialize)]
pub struct WeightsFile {
    pub cfg: TrainConfig,
    pub w_h: Vec<Grid>,
    pub w_x: Vec<Vec<Grid>>,
    pub x0: Vec<Grid>,
    pub h0: Vec<Grid>,
}

impl WeightsFile {
    fn from_state(cfg: &TrainConfig, state: &TrainState) -> Self {
        Self {
            cfg: cfg.clone(),
            w_h: state.w_h.clone(),
            w_x: state.w_x.clone(),
            x0: state.x0.clone(),
            h0: state.h0.clone(),
        }
    }

    fn into_state(self) -> (TrainConfig, TrainState) {
        let state = TrainState {
            acc_w_h: self.w_h.iter().map(|g| Grid::zeros(g.rows(), g.cols())).collect(),
            acc_w_x: self
                .w_x
                .iter()
                .map(|ws| ws.iter().map(|g| Grid::zeros(g.rows(), g.cols())).collect())
                .collect(),
            w_h: self.w_h,
            w_x: self.w_x,
            x0: self.x0,
            h0: self.h0,
            epoch: 0,
            loss_history: Vec::new(),
            tape_sizes: Vec::new(),
        };
        (self.cfg, state)
    }
}

fn read_image(path: &Path) -> Result<(Grid, InputRecord)> {
    let bytes = std::fs::read(path)?;
    Ok((read_pgm(&bytes)?, InputRecord::for_bytes(path, &bytes)))
}

fn read_kernel(path: &Path) -> Result<(Grid, InputRecord)> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    Ok((read_kernel_text(&text)?, InputRecord::for_bytes(path, &bytes)))
}

fn pair_from(v: &[usize]) -> Result<(usize, usize)> {
    match v {
        [m, n] => Ok((*m, *n)),
        _ => Err(DeconvError::InvalidArgument(
            "--kernel-size expects exactly two values".into(),
        )),
    }
}

fn truth_metrics(
    truth: Option<&Grid>,
    blurred: &Grid,
    estimate: &Grid,
    kernel_true: Option<&Grid>,
    kernel_est: Option<&Grid>,
    recon_ssim: f64,
) -> Result<MetricsBlock> {
    let mut block = MetricsBlock {
        recon_ssim: finite(recon_ssim),
        ..MetricsBlock::default()
    };
    if let Some(t) = truth {
        let p = SsimParams::for_shape(t.rows(), t.cols());
        block.psnr_db = finite(psnr(t, estimate, 1.0)?);
        block.isnr_db = finite(isnr(t, blurred, estimate)?);
        block.ssim = finite(ssim(t, estimate, &p)?);
    }
    if let (Some(kt), Some(ke)) = (kernel_true, kernel_est) {
        block.kernel_rmse_raw = finite(kernel_rmse(kt, ke, false)?);
        block.kernel_rmse_aligned = finite(kernel_rmse(kt, ke, true)?);
    }
    Ok(block)
}

struct BlurOutcome {
    manifest: RunManifest,
    blurred: Grid,
    kernel: Grid,
}

fn blur_core(
    image: &Path,
    kernel: Option<&Path>,
    kernel_size: Option<(usize, usize)>,
    sigma: f64,
    seed: u64,
    mode: BoundaryMode,
) -> Result<BlurOutcome> {
    let (truth, image_rec) = read_image(image)?;
    let mut inputs = vec![image_rec];
    let kernel_grid = match (kernel, kernel_size) {
        (Some(path), _) => {
            let (k, rec) = read_kernel(path)?;
            inputs.push(rec);
            k
        }
        (None, Some(size)) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let length = 0.6 * size.0.min(size.1) as f64;
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            gen_motion_kernel(size, length, angle, rng.gen())?
        }
        (None, None) => {
            return Err(DeconvError::InvalidArgument(
                "blur needs --kernel or --kernel-size".into(),
            ))
        }
    };
    let item = make_blurred_pair(&truth, &kernel_grid, NoiseSpec::new(sigma, seed)?, mode, 0)?;
    let p = SsimParams::for_shape(truth.rows(), truth.cols());
    let mut manifest = RunManifest::new(
        "blur",
        ReplaySpec::Blur {
            image: image.to_path_buf(),
            kernel: kernel.map(Path::to_path_buf),
            kernel_size,
            sigma,
            seed,
            mode,
        },
    );
    manifest.seeds.insert("master".into(), seed);
    manifest.inputs = inputs;
    manifest.final_metrics = Some(MetricsBlock {
        psnr_db: finite(psnr(&truth, &item.blurred, 1.0)?),
        ssim: finite(ssim(&truth, &item.blurred, &p)?),
        ..MetricsBlock::default()
    });
    Ok(BlurOutcome {
        manifest,
        blurred: item.blurred,
        kernel: kernel_grid,
    })
}

struct RlOutcome {
    manifest: RunManifest,
    image: Grid,
    kernel: Grid,
}

fn rl_core(
    image: &Path,
    truth: Option<&Path>,
    kernel_true: Option<&Path>,
    kshape: (usize, usize),
    iters: usize,
    seed: u64,
    mode: BoundaryMode,
) -> Result<RlOutcome> {
    let (y, image_rec) = read_image(image)?;
    let mut inputs = vec![image_rec];
    let truth_grid = match truth {
        Some(p) => {
            let (g, rec) = read_image(p)?;
            inputs.push(rec);
            Some(g)
        }
        None => None,
    };
    let kernel_true_grid = match kernel_true {
        Some(p) => {
            let (g, rec) = read_kernel(p)?;
            inputs.push(rec);
            Some(g)
        }
        None => None,
    };
    let (x, h, trace) = rl_blind(&y, kshape, iters, seed, mode)?;
    let p = SsimParams::for_shape(y.rows(), y.cols());
    let recon = conv_same(&x, &h, mode)?;
    let recon_ssim = ssim(&recon, &y, &p)?;
    let mut manifest = RunManifest::new(
        "rl",
        ReplaySpec::Rl {
            image: image.to_path_buf(),
            truth: truth.map(Path::to_path_buf),
            kernel_true: kernel_true.map(Path::to_path_buf),
            kshape,
            iters,
            seed,
            mode,
        },
    );
    manifest.seeds.insert("master".into(), seed);
    manifest.inputs = inputs;
    manifest.loss_history = trace;
    manifest.final_metrics = Some(truth_metrics(
        truth_grid.as_ref(),
        &y,
        &x,
        kernel_true_grid.as_ref(),
        Some(&h),
        recon_ssim,
    )?);
    Ok(RlOutcome {
        manifest,
        image: x,
        kernel: h,
    })
}

struct DurlOutcome {
    manifest: RunManifest,
    images: Vec<Grid>,
    kernel: Grid,
    weights: WeightsFile,
}

fn durl_core(
    images: &[PathBuf],
    truth: Option<&Path>,
    kernel_true: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<DurlOutcome> {
    let mut inputs = Vec::new();
    let mut y_batch = Vec::new();
    for path in images {
        let (y, rec) = read_image(path)?;
        inputs.push(rec);
        y_batch.push(y);
    }
    let truth_grid = match truth {
        Some(p) => {
            let (g, rec) = read_image(p)?;
            inputs.push(rec);
            Some(g)
        }
        None => None,
    };
    let kernel_true_grid = match kernel_true {
        Some(p) => {
            let (g, rec) = read_kernel(p)?;
            inputs.push(rec);
            Some(g)
        }
        None => None,
    };
    let result = train(&y_batch, cfg)?;
    let p = SsimParams::for_shape(y_batch[0].rows(), y_batch[0].cols());
    let recon = conv_same(&result.images[0], &result.kernels[0], cfg.mode)?;
    let recon_ssim = ssim(&recon, &y_batch[0], &p)?;
    let mut manifest = RunManifest::new(
        "durl",
        ReplaySpec::Durl {
            images: images.to_vec(),
            truth: truth.map(Path::to_path_buf),
            kernel_true: kernel_true.map(Path::to_path_buf),
            cfg: cfg.clone(),
        },
    );
    manifest.seeds.insert("master".into(), cfg.seed);
    manifest.inputs = inputs;
    manifest.loss_history = result.state.loss_history.clone();
    manifest.final_metrics = Some(truth_metrics(
        truth_grid.as_ref(),
        &y_batch[0],
        &result.images[0],
        kernel_true_grid.as_ref(),
        Some(&result.kernel),
        recon_ssim,
    )?);
    let weights = WeightsFile::from_state(cfg, &result.state);
    Ok(DurlOutcome {
        manifest,
        images: result.images,
        kernel: result.kernel,
        weights,
    })
}

struct TransferOutcome {
    manifest: RunManifest,
    image: Grid,
    kernel: Grid,
}

fn transfer_core(
    image: &Path,
    weights_path: &Path,
    truth: Option<&Path>,
    seed: u64,
) -> Result<TransferOutcome> {
    let (y, image_rec) = read_image(image)?;
    let weights_bytes = std::fs::read(weights_path)?;
    let weights_rec = InputRecord::for_bytes(weights_path, &weights_bytes);
    let weights: WeightsFile = serde_json::from_slice(&weights_bytes)
        .map_err(|e| DeconvError::Format(format!("weights file: {e}")))?;
    let mut inputs = vec![image_rec, weights_rec];
    let truth_grid = match truth {
        Some(p) => {
            let (g, rec) = read_image(p)?;
            inputs.push(rec);
            Some(g)
        }
        None => None,
    };
    let (cfg, state) = weights.into_state();
    let (x_hat, h_hat) = deblur_with_weights(&y, &state, &cfg, Some(seed), 0)?;
    let p = SsimParams::for_shape(y.rows(), y.cols());
    let recon = conv_same(&x_hat, &h_hat, cfg.mode)?;
    let recon_ssim = ssim(&recon, &y, &p)?;
    let mut manifest = RunManifest::new(
        "transfer",
        ReplaySpec::Transfer {
            image: image.to_path_buf(),
            weights: weights_path.to_path_buf(),
            truth: truth.map(Path::to_path_buf),
            seed,
        },
    );
    manifest.seeds.insert("master".into(), seed);
    manifest.inputs = inputs;
    manifest.final_metrics = Some(truth_metrics(
        truth_grid.as_ref(),
        &y,
        &x_hat,
        None,
        None,
        recon_ssim,
    )?);
    Ok(TransferOutcome {
        manifest,
        image: x_hat,
        kernel: h_hat,
    })
}

fn bench_core(
    count: usize,
    layers: usize,
    epochs: usize,
    kernel_size: (usize, usize),
    sigma: f64,
    seed: u64,
    lr: f64,
    lambda: f64,
    mode: BoundaryMode,
    idx: Option<&Path>,
) -> Result<(RunManifest, crate::benchmark::BenchReport)> {
    let cfg = BenchConfig {
        count,
        layers,
        epochs,
        kshape: kernel_size,
        sigma,
        seed,
        lr0: lr,
        lambda,
        mode,
        source: match idx {
            Some(p) => BenchSource::Idx(p.to_path_buf()),
            None => BenchSource::Synthetic,
        },
    };
    let report = run_bench(&cfg)?;
    let mut manifest = RunManifest::new(
        "bench",
        ReplaySpec::Bench {
            count,
            layers,
            epochs,
            kernel_size,
            sigma,
            seed,
            lr,
            lambda,
            mode,
            idx: idx.map(Path::to_path_buf),
        },
    );
    manifest.seeds.insert("master".into(), seed);
    if let Some(p) = idx {
        let bytes = std::fs::read(p)?;
        manifest.inputs.push(InputRecord::for_bytes(p, &bytes));
    }
    manifest.final_metrics = Some(MetricsBlock {
        psnr_db: finite(report.durl.psnr_db),
        isnr_db: finite(report.durl.isnr_db),
        ssim: finite(report.durl.ssim),
        kernel_rmse_raw: finite(report.durl.rmse_raw),
        kernel_rmse_aligned: finite(report.durl.rmse_aligned),
        recon_ssim: None,
    });
    for (name, m) in [("rl", &report.rl), ("durl", &report.durl)] {
        manifest.extra.insert(format!("mean_psnr_db_{name}"), m.psnr_db);
        manifest.extra.insert(format!("mean_isnr_db_{name}"), m.isnr_db);
        manifest.extra.insert(format!("mean_ssim_{name}"), m.ssim);
        manifest
            .extra
            .insert(format!("mean_rmse_aligned_{name}"), m.rmse_aligned);
    }
    Ok((manifest, report))
}

/// Builds the full training loss on random seeded inputs and checks the
/// autodiff gradient against central finite differences.
pub fn gradcheck_core(
    layers: usize,
    image_size: usize,
    kernel_size: usize,
    seed: u64,
) -> Result<(RunManifest, f64)> {
    let mode = BoundaryMode::ZeroPadSame;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let y = Grid::uniform(image_size, image_size, &mut rng);
    let x0 = Grid::uniform(image_size, image_size, &mut rng);
    let mut params = Vec::new();
    for _ in 0..layers {
        params.push(Grid::uniform(image_size, image_size, &mut rng));
    }
    for _ in 0..layers {
        params.push(Grid::uniform(kernel_size, kernel_size, &mut rng));
    }
    let p = SsimParams::for_shape(image_size, image_size);
    let err = grad_check(
        |ps: &[Grid]| {
            let mut tape = Tape::new();
            let iy = tape.leaf(y.clone());
            let ix0 = tape.leaf(x0.clone());
            let wx: Vec<usize> = ps[..layers].iter().map(|g| tape.leaf(g.clone())).collect();
            let wh: Vec<usize> = ps[layers..].iter().map(|g| tape.leaf(g.clone())).collect();
            let (x_l, h_l) = forward_unrolled(&mut tape, iy, ix0, &wx, &wh, mode, 1e-8)?;
            let loss = durl_loss(&mut tape, x_l, h_l, iy, 0.1, mode, &p)?;
            let ids = wx.into_iter().chain(wh).collect();
            Ok((tape, loss, ids))
        },
        &params,
        1e-4,
    )?;
    let mut manifest = RunManifest::new(
        "gradcheck",
        ReplaySpec::Gradcheck {
            layers,
            image_size,
            kernel_size,
            seed,
        },
    );
    manifest.seeds.insert("master".into(), seed);
    manifest.extra.insert("max_rel_error".into(), err);
    Ok((manifest, err))
}

fn verify_inputs(recorded: &[InputRecord]) -> Result<()> {
    for rec in recorded {
        let bytes = std::fs::read(&rec.path)?;
        let now = InputRecord::for_bytes(&rec.path, &bytes);
        if now.sha256 != rec.sha256 {
            return Err(DeconvError::Manifest(format!(
                "input {} changed since the original run",
                rec.path.display()
            )));
        }
    }
    Ok(())
}

fn replay_run(path: &Path) -> Result<bool> {
    let recorded = RunManifest::load(path)?;
    verify_inputs(&recorded.inputs)?;
    let fresh = match &recorded.replay {
        ReplaySpec::Blur {
            image,
            kernel,
            kernel_size,
            sigma,
            seed,
            mode,
        } => blur_core(image, kernel.as_deref(), *kernel_size, *sigma, *seed, *mode)?.manifest,
        ReplaySpec::Rl {
            image,
            truth,
            kernel_true,
            kshape,
            iters,
            seed,
            mode,
        } => {
            rl_core(
                image,
                truth.as_deref(),
                kernel_true.as_deref(),
                *kshape,
                *iters,
                *seed,
                *mode,
            )?
            .manifest
        }
        ReplaySpec::Durl {
            images,
            truth,
            kernel_true,
            cfg,
        } => durl_core(images, truth.as_deref(), kernel_true.as_deref(), cfg)?.manifest,
        ReplaySpec::Transfer {
            image,
            weights,
            truth,
            seed,
        } => transfer_core(image, weights, truth.as_deref(), *seed)?.manifest,
        ReplaySpec::Bench {
            count,
            layers,
            epochs,
            kernel_size,
            sigma,
            seed,
            lr,
            lambda,
            mode,
            idx,
        } => {
            bench_core(
                *count,
                *layers,
                *epochs,
                *kernel_size,
                *sigma,
                *seed,
                *lr,
                *lambda,
                *mode,
                idx.as_deref(),
            )?
            .0
        }
        ReplaySpec::Gradcheck {
            layers,
            image_size,
            kernel_size,
            seed,
        } => gradcheck_core(*layers, *image_size, *kernel_size, *seed)?.0,
    };
    let ok = recorded.reproduces(&fresh);
    if ok {
        println!("replay OK: final metrics reproduce bit-exactly");
    } else {
        println!("replay MISMATCH");
        println!("  recorded: {:?}", recorded.final_metrics);
        println!("  fresh:    {:?}", fresh.final_metrics);
    }
    Ok(ok)
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    Ok(path)
}

/// Executes a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let started = Instant::now();
    match cli.command {
        Command::Blur {
            image,
            kernel,
            kernel_size,
            sigma,
            seed,
            boundary,
            out,
        } => {
            let ksize = kernel_size.as_deref().map(pair_from).transpose()?;
            let mut outcome =
                blur_core(&image, kernel.as_deref(), ksize, sigma, seed, boundary.into())?;
            write_out(&out, "blurred.pgm", &write_pgm(&outcome.blurred))?;
            write_out(&out, "kernel.txt", write_kernel_text(&outcome.kernel).as_bytes())?;
            outcome.manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            outcome.manifest.save(&out)?;
            println!("wrote {}", out.join("blurred.pgm").display());
            Ok(0)
        }
        Command::Rl {
            image,
            kernel_size,
            epochs,
            seed,
            boundary,
            out,
            truth,
            kernel,
        } => {
            let kshape = pair_from(&kernel_size)?;
            let mut outcome = rl_core(
                &image,
                truth.as_deref(),
                kernel.as_deref(),
                kshape,
                epochs,
                seed,
                boundary.into(),
            )?;
            write_out(&out, "estimate.pgm", &write_pgm(&outcome.image))?;
            write_out(&out, "kernel_est.txt", write_kernel_text(&outcome.kernel).as_bytes())?;
            outcome.manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            outcome.manifest.save(&out)?;
            print_metrics(outcome.manifest.final_metrics.as_ref());
            Ok(0)
        }
        Command::Durl {
            image,
            kernel_size,
            layers,
            epochs,
            lr,
            lambda,
            batch,
            boundary,
            seed,
            out,
            truth,
            kernel,
        } => {
            let kshape = pair_from(&kernel_size)?;
            let mut cfg = TrainConfig::new(layers, kshape);
            cfg.epochs = epochs;
            cfg.lr0 = lr;
            cfg.lambda = lambda;
            cfg.batch_size = batch.max(image.len());
            cfg.mode = boundary.into();
            cfg.seed = seed;
            let mut outcome = durl_core(&image, truth.as_deref(), kernel.as_deref(), &cfg)?;
            for (i, img) in outcome.images.iter().enumerate() {
                write_out(&out, &format!("estimate_{i}.pgm"), &write_pgm(img))?;
            }
            write_out(&out, "kernel_est.txt", write_kernel_text(&outcome.kernel).as_bytes())?;
            let weights = serde_json::to_vec(&outcome.weights)
                .map_err(|e| DeconvError::Manifest(e.to_string()))?;
            write_out(&out, "weights.json", &weights)?;
            outcome.manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            outcome.manifest.save(&out)?;
            print_metrics(outcome.manifest.final_metrics.as_ref());
            Ok(0)
        }
        Command::Transfer {
            image,
            weights,
            seed,
            out,
            truth,
        } => {
            let mut outcome = transfer_core(&image, &weights, truth.as_deref(), seed)?;
            write_out(&out, "estimate.pgm", &write_pgm(&outcome.image))?;
            write_out(&out, "kernel_est.txt", write_kernel_text(&outcome.kernel).as_bytes())?;
            outcome.manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            outcome.manifest.save(&out)?;
            print_metrics(outcome.manifest.final_metrics.as_ref());
            Ok(0)
        }
        Command::Eval {
            truth,
            image,
            blurred,
            kernel,
            kernel_est,
        } => {
            let (t, _) = read_image(&truth)?;
            let (e, _) = read_image(&image)?;
            let p = SsimParams::for_shape(t.rows(), t.cols());
            println!("psnr_db = {:.6}", psnr(&t, &e, 1.0)?);
            println!("ssim = {:.6}", ssim(&t, &e, &p)?);
            if let Some(b) = blurred {
                let (b, _) = read_image(&b)?;
                println!("isnr_db = {:.6}", isnr(&t, &b, &e)?);
            }
            if let (Some(kt), Some(ke)) = (kernel, kernel_est) {
                let (kt, _) = read_kernel(&kt)?;
                let (ke, _) = read_kernel(&ke)?;
                println!("kernel_rmse_raw = {:.6e}", kernel_rmse(&kt, &ke, false)?);
                println!("kernel_rmse_aligned = {:.6e}", kernel_rmse(&kt, &ke, true)?);
            }
            Ok(0)
        }
        Command::Gradcheck {
            layers,
            image,
            kernel,
            seed,
        } => {
            let (_, err) = gradcheck_core(layers, image, kernel, seed)?;
            println!("max relative error = {err:.3e}");
            Ok(if err < 1e-4 { 0 } else { 1 })
        }
        Command::Bench {
            dataset,
            count,
            layers,
            epochs,
            kernel_size,
            sigma,
            seed,
            lr,
            lambda,
            boundary,
            idx,
            out,
        } => {
            if dataset != "mnist" {
                return Err(DeconvError::InvalidArgument(format!(
                    "unknown benchmark dataset '{dataset}'"
                )));
            }
            let kshape = pair_from(&kernel_size)?;
            let (mut manifest, report) = bench_core(
                count,
                layers,
                epochs,
                kshape,
                sigma,
                seed,
                lr,
                lambda,
                boundary.into(),
                idx.as_deref(),
            )?;
            let table = to_table(&report);
            print!("{table}");
            write_out(&out, "results.csv", to_csv(&report.rows).as_bytes())?;
            write_out(&out, "results.txt", table.as_bytes())?;
            manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
            manifest.save(&out)?;
            Ok(0)
        }
        Command::Replay { manifest } => Ok(if replay_run(&manifest)? { 0 } else { 1 }),
    }
}

fn print_metrics(block: Option<&MetricsBlock>) {
    let Some(b) = block else { return };
    let show = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            println!("{name} = {v:.6}");
        }
    };
    show("psnr_db", b.psnr_db);
    show("isnr_db", b.isnr_db);
    show("ssim", b.ssim);
    show("kernel_rmse_raw", b.kernel_rmse_raw);
    show("kernel_rmse_aligned", b.kernel_rmse_aligned);
    show("recon_ssim", b.recon_ssim);
}

/// Maps an error to the process exit code: 3 for I/O, 4 for bad input or
/// file formats, 5 for numeric failures.
pub fn exit_code_for(err: &DeconvError) -> i32 {
    match err {
        DeconvError::Io(_) => 3,
        DeconvError::Format(_)
        | DeconvError::InvalidArgument(_)
        | DeconvError::Manifest(_)
        | DeconvError::ShapeMismatch(_)
        | DeconvError::KernelTooLarge { .. } => 4,
        DeconvError::NonFiniteLoss { .. } | DeconvError::Autodiff(_) => 5,
    }
}
