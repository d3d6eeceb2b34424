//! Image quality metrics: SSIM, PSNR, ISNR, and kernel RMSE.
//!
//! SSIM is implemented once as a tape construction so the training loss
//! and the reported metric share the exact same floating-point path; the
//! pure function evaluates a throwaway tape.

use crate::autodiff::{OpKind, Tape};
use crate::error::{DeconvError, Result};
use crate::grid::{BoundaryMode, Grid};

/// Windowed-SSIM parameters: Gaussian window (default 11x11, sigma 1.5)
/// and the stabilisation constants for dynamic range 1.
#[derive(Debug, Clone)]
pub struct SsimParams {
    pub window: Grid,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub fn standard() -> Self {
        Self::with_window(11)
    }

    /// Window cropped centrally (to the largest odd size that fits) for
    /// images smaller than 11 on a side, renormalised to sum 1.
    pub fn for_shape(rows: usize, cols: usize) -> Self {
        let side = rows.min(cols).min(11);
        let side = if side % 2 == 0 { side - 1 } else { side };
        Self::with_window(side.max(1))
    }

    fn with_window(side: usize) -> Self {
        let sigma = 1.5;
        let c = (side / 2) as f64;
        let mut w = Grid::zeros(side, side);
        for i in 0..side {
            for j in 0..side {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                w.set(i, j, (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let w = w.scale(1.0 / w.sum());
        let d: f64 = 1.0;
        Self {
            window: w,
            c1: (0.01 * d).powi(2),
            c2: (0.03 * d).powi(2),
        }
    }
}

/// Builds the SSIM score of two grid nodes on an existing tape and
/// returns the scalar node id. Windowing always uses ZeroPadSame.
pub fn ssim_on_tape(tape: &mut Tape, a: usize, b: usize, p: &SsimParams) -> Result<usize> {
    let (ar, ac) = tape.grid(a)?.shape();
    if (ar, ac) != tape.grid(b)?.shape() {
        return Err(DeconvError::ShapeMismatch(
            "ssim operands differ in shape".into(),
        ));
    }
    let mode = BoundaryMode::ZeroPadSame;
    let w = tape.leaf(p.window.clone());
    let c1 = tape.leaf(Grid::filled(ar, ac, p.c1));
    let c2 = tape.leaf(Grid::filled(ar, ac, p.c2));

    let mu_a = tape.record(OpKind::ConvSame(mode), &[a, w])?;
    let mu_b = tape.record(OpKind::ConvSame(mode), &[b, w])?;
    let a_sq = tape.record(OpKind::Hadamard, &[a, a])?;
    let b_sq = tape.record(OpKind::Hadamard, &[b, b])?;
    let ab = tape.record(OpKind::Hadamard, &[a, b])?;
    let mu_a_sq = tape.record(OpKind::Hadamard, &[mu_a, mu_a])?;
    let mu_b_sq = tape.record(OpKind::Hadamard, &[mu_b, mu_b])?;
    let mu_ab = tape.record(OpKind::Hadamard, &[mu_a, mu_b])?;

    let ex_a_sq = tape.record(OpKind::ConvSame(mode), &[a_sq, w])?;
    let ex_b_sq = tape.record(OpKind::ConvSame(mode), &[b_sq, w])?;
    let ex_ab = tape.record(OpKind::ConvSame(mode), &[ab, w])?;
    let var_a = tape.record(OpKind::Sub, &[ex_a_sq, mu_a_sq])?;
    let var_b = tape.record(OpKind::Sub, &[ex_b_sq, mu_b_sq])?;
    let cov = tape.record(OpKind::Sub, &[ex_ab, mu_ab])?;

    let two_mu_ab = tape.record(OpKind::ScalarMul(2.0), &[mu_ab])?;
    let n1 = tape.record(OpKind::Add, &[two_mu_ab, c1])?;
    let two_cov = tape.record(OpKind::ScalarMul(2.0), &[cov])?;
    let n2 = tape.record(OpKind::Add, &[two_cov, c2])?;
    let mu_sum = tape.record(OpKind::Add, &[mu_a_sq, mu_b_sq])?;
    let d1 = tape.record(OpKind::Add, &[mu_sum, c1])?;
    let var_sum = tape.record(OpKind::Add, &[var_a, var_b])?;
    let d2 = tape.record(OpKind::Add, &[var_sum, c2])?;

    let num = tape.record(OpKind::Hadamard, &[n1, n2])?;
    let den = tape.record(OpKind::Hadamard, &[d1, d2])?;
    // denominators are >= c1*c2 > 0, exact division is safe
    let map = tape.record(OpKind::SafeDiv(0.0), &[num, den])?;
    tape.record(OpKind::MeanAll, &[map])
}

/// Mean structural similarity of two equal-shaped grids, in [-1, 1].
pub fn ssim(a: &Grid, b: &Grid, p: &SsimParams) -> Result<f64> {
    let mut tape = Tape::new();
    let ia = tape.leaf(a.clone());
    let ib = tape.leaf(b.clone());
    let id = ssim_on_tape(&mut tape, ia, ib, p)?;
    tape.scalar(id)
}

fn mse(a: &Grid, b: &Grid) -> Result<f64> {
    Ok(a.sq_dist(b)? / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; +inf when the estimate is exact.
pub fn psnr(truth: &Grid, estimate: &Grid, peak: f64) -> Result<f64> {
    let e = mse(truth, estimate)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Improvement in SNR of the estimate over the blurred input, in dB.
pub fn isnr(truth: &Grid, blurred: &Grid, estimate: &Grid) -> Result<f64> {
    let num = truth.sq_dist(blurred)?;
    let den = truth.sq_dist(estimate)?;
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    if num == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (num / den).log10())
}

/// RMSE between unit-sum-normalised kernels; optionally minimised over
/// all circular shifts to absorb the translation ambiguity of blind
/// kernel recovery.
pub fn kernel_rmse(h_true: &Grid, h_est: &Grid, align: bool) -> Result<f64> {
    if h_true.shape() != h_est.shape() {
        return Err(DeconvError::ShapeMismatch(
            "kernel shapes differ in kernel_rmse".into(),
        ));
    }
    let normalize = |g: &Grid| -> Result<Grid> {
        let s = g.sum();
        if s.abs() < 1e-300 {
            return Err(DeconvError::InvalidArgument(
                "cannot normalise a zero-sum kernel".into(),
            ));
        }
        Ok(g.scale(1.0 / s))
    };
    let t = normalize(h_true)?;
    let e = normalize(h_est)?;
    let (m, n) = t.shape();
    let rmse_shifted = |di: usize, dj: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..n {
                let d = t.get(i, j) - e.get((i + di) % m, (j + dj) % n);
                acc += d * d;
            }
        }
        (acc / (m * n) as f64).sqrt()
    };
    if !align {
        return Ok(rmse_shifted(0, 0));
    }
    let mut best = f64::INFINITY;
    for di in 0..m {
        for dj in 0..n {
            best = best.min(rmse_shifted(di, dj));
        }
    }
    Ok(best)
}
