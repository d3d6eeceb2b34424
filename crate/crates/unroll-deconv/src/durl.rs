//! Deep-unfolded Richardson-Lucy network: per-layer trainable weights,
//! the negative-SSIM + TV loss, and the self-supervised RMSprop training
//! loop with warm restarts.

use crate::autodiff::{tv_forward, OpKind, Tape};
use crate::error::{DeconvError, Result};
use crate::grid::{BoundaryMode, Grid};
use crate::metrics::{ssim_on_tape, SsimParams};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Trainable weights of one unfolded layer: an image-shaped substitute
/// for x and a kernel-shaped substitute for H.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_x: Grid,
    pub w_h: Grid,
}

/// The full per-layer weight stack for one batch item.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub layers: Vec<LayerWeights>,
}

/// Training hyperparameters. Defaults follow the published setup:
/// 5000 epochs, lr 0.1 decayed by 0.1 at 40% and 60%, lambda 0.1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub layers: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_points: Vec<f64>,
    pub lambda: f64,
    pub batch_size: usize,
    pub eps_div: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub mode: BoundaryMode,
    pub seed: u64,
    pub kshape: (usize, usize),
}

impl TrainConfig {
    pub fn new(layers: usize, kshape: (usize, usize)) -> Self {
        Self {
            layers,
            epochs: 5000,
            lr0: 0.1,
            decay_factor: 0.1,
            decay_points: vec![0.4, 0.6],
            lambda: 0.1,
            batch_size: 1,
            eps_div: 1e-8,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            mode: BoundaryMode::ZeroPadSame,
            seed: 0,
            kshape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.epochs < 1 || self.batch_size < 1 {
            return Err(DeconvError::InvalidArgument(
                "layers, epochs and batch size must all be >= 1".into(),
            ));
        }
        if !(self.lr0 > 0.0) || !(self.lambda >= 0.0) || !(self.eps_div > 0.0) {
            return Err(DeconvError::InvalidArgument(
                "lr0 and eps_div must be positive, lambda nonnegative".into(),
            ));
        }
        let mut prev = 0.0;
        for &p in &self.decay_points {
            if !(p > prev && p < 1.0) {
                return Err(DeconvError::InvalidArgument(
                    "decay points must be strictly increasing in (0,1)".into(),
                ));
            }
            prev = p;
        }
        if self.kshape.0 == 0 || self.kshape.1 == 0 {
            return Err(DeconvError::InvalidArgument(
                "kernel shape must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Mutable training state: weights, RMSprop accumulators, warm-start
/// estimates per batch item.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Kernel weights per layer, shared across the batch.
    pub w_h: Vec<Grid>,
    /// Image weights, indexed [item][layer].
    pub w_x: Vec<Vec<Grid>>,
    pub acc_w_h: Vec<Grid>,
    pub acc_w_x: Vec<Vec<Grid>>,
    /// Warm-start estimates per item.
    pub x0: Vec<Grid>,
    pub h0: Vec<Grid>,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    /// Tape node count per epoch (constant for fixed shapes and L).
    pub tape_sizes: Vec<usize>,
}

impl TrainState {
    /// The per-layer weight view for one batch item.
    pub fn item_params(&self, item: usize) -> ParameterSet {
        ParameterSet {
            layers: self.w_h
                .iter()
                .zip(&self.w_x[item])
                .map(|(w_h, w_x)| LayerWeights {
                    w_x: w_x.clone(),
                    w_h: w_h.clone(),
                })
                .collect(),
        }
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainResult {
    /// Final image estimates, one per batch item.
    pub images: Vec<Grid>,
    /// Final kernel estimates per item.
    pub kernels: Vec<Grid>,
    /// Batch kernel: mean of the per-item kernels.
    pub kernel: Grid,
    pub state: TrainState,
}

/// One unfolded kernel update on the tape:
/// H' = sigmoid( relu(corr_window(y / relu(x * W_H), x)) (.) W_H ).
pub fn forward_layer_kernel(
    tape: &mut Tape,
    y: usize,
    x_k: usize,
    w_h: usize,
    mode: BoundaryMode,
    eps: f64,
) -> Result<usize> {
    let kshape = tape.grid(w_h)?.shape();
    let blur = tape.record(OpKind::ConvSame(mode), &[x_k, w_h])?;
    let blur_pos = tape.record(OpKind::ReLU, &[blur])?;
    let ratio = tape.record(OpKind::SafeDiv(eps), &[y, blur_pos])?;
    let corr = tape.record(OpKind::CorrKernelWindow(mode, kshape), &[ratio, x_k])?;
    let corr_pos = tape.record(OpKind::ReLU, &[corr])?;
    let scaled = tape.record(OpKind::Hadamard, &[corr_pos, w_h])?;
    tape.record(OpKind::Sigmoid, &[scaled])
}

/// One unfolded image update on the tape:
/// x' = sigmoid( relu((y / relu(W_x * H')) * flip(H')) (.) W_x ).
pub fn forward_layer_image(
    tape: &mut Tape,
    y: usize,
    h_next: usize,
    w_x: usize,
    mode: BoundaryMode,
    eps: f64,
) -> Result<usize> {
    let blur = tape.record(OpKind::ConvSame(mode), &[w_x, h_next])?;
    let blur_pos = tape.record(OpKind::ReLU, &[blur])?;
    let ratio = tape.record(OpKind::SafeDiv(eps), &[y, blur_pos])?;
    let h_flip = tape.record(OpKind::Flip180, &[h_next])?;
    let spread = tape.record(OpKind::ConvSame(mode), &[ratio, h_flip])?;
    let spread_pos = tape.record(OpKind::ReLU, &[spread])?;
    let scaled = tape.record(OpKind::Hadamard, &[spread_pos, w_x])?;
    tape.record(OpKind::Sigmoid, &[scaled])
}

/// Eager single-layer kernel update (builds a throwaway tape).
pub fn forward_layer_kernel_grid(
    y: &Grid,
    x_k: &Grid,
    w_h: &Grid,
    mode: BoundaryMode,
    eps: f64,
) -> Result<Grid> {
    let mut tape = Tape::new();
    let iy = tape.leaf(y.clone());
    let ix = tape.leaf(x_k.clone());
    let iw = tape.leaf(w_h.clone());
    let id = forward_layer_kernel(&mut tape, iy, ix, iw, mode, eps)?;
    Ok(tape.grid(id)?.clone())
}

/// Eager single-layer image update.
pub fn forward_layer_image_grid(
    y: &Grid,
    h_next: &Grid,
    w_x: &Grid,
    mode: BoundaryMode,
    eps: f64,
) -> Result<Grid> {
    let mut tape = Tape::new();
    let iy = tape.leaf(y.clone());
    let ih = tape.leaf(h_next.clone());
    let iw = tape.leaf(w_x.clone());
    let id = forward_layer_image(&mut tape, iy, ih, iw, mode, eps)?;
    Ok(tape.grid(id)?.clone())
}

/// Runs all L layers on the tape. `x0` feeds only layer 0; afterwards
/// each layer consumes the previous layer's image output. Returns the
/// final (x_L, H_L) node ids.
pub fn forward_unrolled(
    tape: &mut Tape,
    y: usize,
    x0: usize,
    w_x_ids: &[usize],
    w_h_ids: &[usize],
    mode: BoundaryMode,
    eps: f64,
) -> Result<(usize, usize)> {
    if w_x_ids.len() != w_h_ids.len() || w_x_ids.is_empty() {
        return Err(DeconvError::InvalidArgument(
            "need one (W_x, W_H) pair per layer".into(),
        ));
    }
    let mut x = x0;
    let mut h = 0;
    for (wx, wh) in w_x_ids.iter().zip(w_h_ids) {
        h = forward_layer_kernel(tape, y, x, *wh, mode, eps)?;
        x = forward_layer_image(tape, y, h, *wx, mode, eps)?;
    }
    Ok((x, h))
}

/// Anisotropic total variation of a grid (pure function; the tape op
/// computes the same quantity).
pub fn tv_penalty(x: &Grid) -> f64 {
    tv_forward(x)
}

/// Loss node: -SSIM(x_L * H_L, y) + lambda * TV(x_L).
pub fn durl_loss(
    tape: &mut Tape,
    x_l: usize,
    h_l: usize,
    y: usize,
    lambda: f64,
    mode: BoundaryMode,
    ssim_params: &SsimParams,
) -> Result<usize> {
    let recon = tape.record(OpKind::ConvSame(mode), &[x_l, h_l])?;
    let s = ssim_on_tape(tape, recon, y, ssim_params)?;
    let neg = tape.record(OpKind::ScalarMul(-1.0), &[s])?;
    let tv = tape.record(OpKind::TvPenalty, &[x_l])?;
    let reg = tape.record(OpKind::ScalarMul(lambda), &[tv])?;
    tape.record(OpKind::Add, &[neg, reg])
}

/// Staged learning-rate schedule: lr0 scaled by decay_factor each time
/// the epoch crosses ceil(f * epochs) for each decay fraction f.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(DeconvError::InvalidArgument(format!(
            "epoch {epoch} out of range (N = {})",
            cfg.epochs
        )));
    }
    let mut lr = cfg.lr0;
    for &f in &cfg.decay_points {
        let boundary = (f * cfg.epochs as f64).ceil() as usize;
        if epoch >= boundary {
            lr *= cfg.decay_factor;
        }
    }
    Ok(lr)
}

/// One RMSprop update: acc' = rho acc + (1-rho) g^2,
/// p' = p - lr g / (sqrt(acc') + eps).
pub fn rmsprop_step(
    param: &Grid,
    grad: &Grid,
    acc: &Grid,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<(Grid, Grid)> {
    let acc_next = acc.zip_map(grad, |a, g| rho * a + (1.0 - rho) * g * g)?;
    let mut param_next = param.zip_map(grad, |p, _| p)?;
    for ((o, &g), &a) in param_next
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(acc_next.values())
    {
        *o -= lr * g / (a.sqrt() + eps);
    }
    Ok((param_next, acc_next))
}

struct ItemPass {
    loss: f64,
    x_l: Grid,
    h_l: Grid,
    grads_w_x: Vec<Grid>,
    grads_w_h: Vec<Grid>,
    tape_size: usize,
}

fn run_item_pass(
    y: &Grid,
    x0: &Grid,
    w_x: &[Grid],
    w_h: &[Grid],
    cfg: &TrainConfig,
    ssim_params: &SsimParams,
    epoch: usize,
) -> Result<ItemPass> {
    let mut tape = Tape::new();
    let iy = tape.leaf(y.clone());
    let ix0 = tape.leaf(x0.clone());
    let w_x_ids: Vec<usize> = w_x.iter().map(|g| tape.leaf(g.clone())).collect();
    let w_h_ids: Vec<usize> = w_h.iter().map(|g| tape.leaf(g.clone())).collect();
    let (x_l, h_l) = forward_unrolled(&mut tape, iy, ix0, &w_x_ids, &w_h_ids, cfg.mode, cfg.eps_div)?;
    let loss_id = durl_loss(&mut tape, x_l, h_l, iy, cfg.lambda, cfg.mode, ssim_params)?;
    let loss = tape.scalar(loss_id)?;
    if !loss.is_finite() {
        return Err(DeconvError::NonFiniteLoss {
            epoch,
            node: loss_id,
        });
    }
    let grads = tape.backward(loss_id)?;
    let take = |id: usize| -> Result<Grid> {
        grads
            .get(&id)
            .ok_or_else(|| DeconvError::Autodiff(format!("missing gradient for leaf {id}")))?
            .as_grid()
            .cloned()
    };
    Ok(ItemPass {
        loss,
        x_l: tape.grid(x_l)?.clone(),
        h_l: tape.grid(h_l)?.clone(),
        grads_w_x: w_x_ids.iter().map(|&id| take(id)).collect::<Result<_>>()?,
        grads_w_h: w_h_ids.iter().map(|&id| take(id)).collect::<Result<_>>()?,
        tape_size: tape.len(),
    })
}

/// Self-supervised training on a batch of blurred images sharing one
/// kernel. Kernel weights are shared across the batch; image weights are
/// per item. Loss over the batch is the sum of per-item losses.
pub fn train(y_batch: &[Grid], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if y_batch.is_empty() || y_batch.len() > cfg.batch_size {
        return Err(DeconvError::InvalidArgument(format!(
            "batch of {} items exceeds configured batch size {}",
            y_batch.len(),
            cfg.batch_size
        )));
    }
    let shape = y_batch[0].shape();
    for y in y_batch {
        if y.shape() != shape {
            return Err(DeconvError::ShapeMismatch(
                "batch items must share one shape".into(),
            ));
        }
    }
    if cfg.kshape.0 > shape.0 || cfg.kshape.1 > shape.1 {
        return Err(DeconvError::KernelTooLarge {
            krows: cfg.kshape.0,
            kcols: cfg.kshape.1,
            irows: shape.0,
            icols: shape.1,
        });
    }

    let items = y_batch.len();
    let (m, n) = cfg.kshape;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    // init order is part of the reproducibility contract:
    // per item (x0, H0), then shared W_H per layer, then W_x per item/layer
    let mut x0 = Vec::with_capacity(items);
    let mut h0 = Vec::with_capacity(items);
    for _ in 0..items {
        x0.push(Grid::uniform(shape.0, shape.1, &mut rng));
        h0.push(Grid::uniform(m, n, &mut rng));
    }
    let w_h: Vec<Grid> = (0..cfg.layers).map(|_| Grid::uniform(m, n, &mut rng)).collect();
    let w_x: Vec<Vec<Grid>> = (0..items)
        .map(|_| {
            (0..cfg.layers)
                .map(|_| Grid::uniform(shape.0, shape.1, &mut rng))
                .collect()
        })
        .collect();

    let mut state = TrainState {
        acc_w_h: w_h.iter().map(|g| Grid::zeros(g.rows(), g.cols())).collect(),
        acc_w_x: w_x
            .iter()
            .map(|ws| ws.iter().map(|g| Grid::zeros(g.rows(), g.cols())).collect())
            .collect(),
        w_h,
        w_x,
        x0,
        h0,
        epoch: 0,
        loss_history: Vec::with_capacity(cfg.epochs),
        tape_sizes: Vec::with_capacity(cfg.epochs),
    };

    let ssim_params = SsimParams::for_shape(shape.0, shape.1);
    let mut last_x: Vec<Grid> = state.x0.clone();
    let mut last_h: Vec<Grid> = state.h0.clone();

    for epoch in 0..cfg.epochs {
        let passes = run_epoch(y_batch, &state, cfg, &ssim_params, epoch)?;

        let total_loss: f64 = passes.iter().map(|p| p.loss).sum();
        state.loss_history.push(total_loss);
        state.tape_sizes.push(passes.iter().map(|p| p.tape_size).sum());

        let lr = lr_at_epoch(cfg, epoch)?;

        // shared kernel weights: sum gradients over items in order
        for layer in 0..cfg.layers {
            let mut grad = passes[0].grads_w_h[layer].clone();
            for pass in &passes[1..] {
                grad = grad.add(&pass.grads_w_h[layer])?;
            }
            let (p, a) = rmsprop_step(
                &state.w_h[layer],
                &grad,
                &state.acc_w_h[layer],
                lr,
                cfg.rmsprop_rho,
                cfg.rmsprop_eps,
            )?;
            state.w_h[layer] = p;
            state.acc_w_h[layer] = a;
        }
        for (item, pass) in passes.iter().enumerate() {
            for layer in 0..cfg.layers {
                let (p, a) = rmsprop_step(
                    &state.w_x[item][layer],
                    &pass.grads_w_x[layer],
                    &state.acc_w_x[item][layer],
                    lr,
                    cfg.rmsprop_rho,
                    cfg.rmsprop_eps,
                )?;
                state.w_x[item][layer] = p;
                state.acc_w_x[item][layer] = a;
            }
        }

        // warm restart: detached value copies (Algorithm line 8)
        for (item, pass) in passes.into_iter().enumerate() {
            state.x0[item] = pass.x_l.clone();
            state.h0[item] = pass.h_l.clone();
            last_x[item] = pass.x_l;
            last_h[item] = pass.h_l;
        }
        state.epoch = epoch + 1;
    }

    let mut kernel = last_h[0].clone();
    for h in &last_h[1..] {
        kernel = kernel.add(h)?;
    }
    let kernel = kernel.scale(1.0 / items as f64);

    Ok(TrainResult {
        images: last_x,
        kernels: last_h,
        kernel,
        state,
    })
}

fn run_epoch(
    y_batch: &[Grid],
    state: &TrainState,
    cfg: &TrainConfig,
    ssim_params: &SsimParams,
    epoch: usize,
) -> Result<Vec<ItemPass>> {
    let run = |item: usize| {
        run_item_pass(
            &y_batch[item],
            &state.x0[item],
            &state.w_x[item],
            &state.w_h,
            cfg,
            ssim_params,
            epoch,
        )
    };
    #[cfg(feature = "parallel")]
    {
        if y_batch.len() > 1 {
            return (0..y_batch.len()).into_par_iter().map(run).collect();
        }
    }
    (0..y_batch.len()).map(run).collect()
}

/// Deblurs a new image with frozen trained weights: one forward pass, no
/// updates. With `seed = None` the warm-start estimates stored in the
/// state are reused, which reproduces the training run's final output on
/// its own training image.
pub fn deblur_with_weights(
    y_new: &Grid,
    state: &TrainState,
    cfg: &TrainConfig,
    seed: Option<u64>,
    item: usize,
) -> Result<(Grid, Grid)> {
    if item >= state.w_x.len() {
        return Err(DeconvError::InvalidArgument(format!(
            "batch item {item} out of range"
        )));
    }
    if y_new.shape() != state.x0[item].shape() {
        return Err(DeconvError::ShapeMismatch(
            "image shape differs from training shape".into(),
        ));
    }
    let x0 = match seed {
        Some(s) => {
            let mut rng = ChaCha20Rng::seed_from_u64(s);
            let x0 = Grid::uniform(y_new.rows(), y_new.cols(), &mut rng);
            let _h0 = Grid::uniform(cfg.kshape.0, cfg.kshape.1, &mut rng);
            x0
        }
        None => state.x0[item].clone(),
    };
    let mut tape = Tape::new();
    let iy = tape.leaf(y_new.clone());
    let ix0 = tape.leaf(x0);
    let w_x_ids: Vec<usize> = state.w_x[item].iter().map(|g| tape.leaf(g.clone())).collect();
    let w_h_ids: Vec<usize> = state.w_h.iter().map(|g| tape.leaf(g.clone())).collect();
    let (x_l, h_l) =
        forward_unrolled(&mut tape, iy, ix0, &w_x_ids, &w_h_ids, cfg.mode, cfg.eps_div)?;
    Ok((tape.grid(x_l)?.clone(), tape.grid(h_l)?.clone()))
}
