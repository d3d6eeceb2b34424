//! Dataset ingestion and file formats: MNIST IDX images, binary PGM,
//! plain-text kernels, synthetic motion kernels, and blurred-pair
//! synthesis.

use crate::error::{DeconvError, Result};
use crate::grid::{add_awgn, conv_same, BoundaryMode, Grid, NoiseSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// One synthesised (truth, kernel, blurred) triple with its provenance.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub truth: Grid,
    pub kernel: Grid,
    pub blurred: Grid,
    pub noise: NoiseSpec,
    pub mode: BoundaryMode,
    pub id: usize,
}

/// Parses an IDX image container (big-endian, magic 0x00000803) into
/// grids scaled to [0,1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Grid>> {
    let word = |off: usize| -> Result<u32> {
        let end = off + 4;
        if end > bytes.len() {
            return Err(DeconvError::Format(format!(
                "IDX truncated: need {end} bytes for header, have {}",
                bytes.len()
            )));
        }
        Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DeconvError::Format(format!(
            "bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = word(4)? as usize;
    let rows = word(8)? as usize;
    let cols = word(12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(DeconvError::Format("IDX image dimensions are zero".into()));
    }
    let per_image = rows
        .checked_mul(cols)
        .ok_or_else(|| DeconvError::Format("IDX dimension overflow".into()))?;
    let total = count
        .checked_mul(per_image)
        .ok_or_else(|| DeconvError::Format("IDX dimension overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != total {
        return Err(DeconvError::Format(format!(
            "IDX payload truncated: expected {total} bytes, have {}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for img in 0..count {
        let data = payload[img * per_image..(img + 1) * per_image]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        out.push(Grid::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

/// Reads a binary (P5) PGM with maxval 255 into a [0,1] grid.
pub fn read_pgm(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        // skip whitespace and '#' comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DeconvError::Format(format!("PGM: missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P5" {
        return Err(DeconvError::Format(format!(
            "PGM: unsupported magic '{magic}', only binary P5 is supported"
        )));
    }
    let parse = |tok: String, what: &str| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| DeconvError::Format(format!("PGM: bad {what} token '{tok}'")))
    };
    let width = parse(token("width")?, "width")?;
    let height = parse(token("height")?, "height")?;
    let maxval = parse(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(DeconvError::Format(format!(
            "PGM: unsupported maxval {maxval}, expected 255"
        )));
    }
    if width == 0 || height == 0 {
        return Err(DeconvError::Format("PGM: zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let need = width * height;
    if data_start + need > bytes.len() {
        return Err(DeconvError::Format(format!(
            "PGM: raster truncated, need {need} bytes"
        )));
    }
    let data = bytes[data_start..data_start + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Grid::from_vec(height, width, data)
}

/// Writes a grid as binary P5 PGM, clamping to [0,1] and scaling to 255.
pub fn write_pgm(g: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.cols(), g.rows()).into_bytes();
    out.extend(g.values().iter().map(|&v| {
        let v = v.clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    }));
    out
}

/// Plain-text kernel format: first line "m n", then m lines of n decimals.
pub fn read_kernel_text(text: &str) -> Result<Grid> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| DeconvError::Format("kernel file is empty".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| DeconvError::Format(format!("kernel: bad dimension token '{t}'")))
        })
        .collect::<Result<_>>()?;
    let [m, n] = dims[..] else {
        return Err(DeconvError::Format(format!(
            "kernel: header must be 'm n', got '{header}'"
        )));
    };
    let mut data = Vec::with_capacity(m * n);
    for (i, line) in lines.enumerate() {
        if i >= m {
            return Err(DeconvError::Format(format!(
                "kernel: more than {m} data rows"
            )));
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| DeconvError::Format(format!("kernel: bad value token '{t}'")))
            })
            .collect::<Result<_>>()?;
        if row.len() != n {
            return Err(DeconvError::Format(format!(
                "kernel: row {i} has {} values, expected {n}",
                row.len()
            )));
        }
        data.extend(row);
    }
    if data.len() != m * n {
        return Err(DeconvError::Format(format!(
            "kernel: expected {m} rows, got {}",
            data.len() / n.max(1)
        )));
    }
    Grid::from_vec(m, n, data)
}

pub fn write_kernel_text(g: &Grid) -> String {
    let mut out = format!("{} {}\n", g.rows(), g.cols());
    for i in 0..g.rows() {
        let row: Vec<String> = (0..g.cols()).map(|j| format!("{:.17e}", g.get(i, j))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Rasterises a motion-blur kernel: a line segment of the given length
/// and angle through the kernel centre, bilinearly splatted and
/// normalised to unit sum. The seed perturbs the endpoints slightly.
pub fn gen_motion_kernel(
    size: (usize, usize),
    length: f64,
    angle: f64,
    seed: u64,
) -> Result<Grid> {
    let (m, n) = size;
    if m == 0 || n == 0 {
        return Err(DeconvError::InvalidArgument("kernel size must be positive".into()));
    }
    if length > m.min(n) as f64 {
        return Err(DeconvError::InvalidArgument(format!(
            "motion length {length} exceeds kernel side {}",
            m.min(n)
        )));
    }
    if length < 1e-9 {
        return Ok(Grid::delta(m, n));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let jitter = 0.2;
    let cx = (n as f64 - 1.0) / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = (m as f64 - 1.0) / 2.0 + rng.gen_range(-jitter..jitter);
    let angle = angle + rng.gen_range(-0.05..0.05);
    let (dy, dx) = (angle.sin(), angle.cos());
    let half = length / 2.0;

    let mut k = Grid::zeros(m, n);
    let steps = (length * 8.0).ceil().max(2.0) as usize;
    for s in 0..=steps {
        let t = -half + length * s as f64 / steps as f64;
        let x = cx + t * dx;
        let y = cy + t * dy;
        let (i0, j0) = (y.floor() as isize, x.floor() as isize);
        let (fy, fx) = (y - y.floor(), x - x.floor());
        for (di, dj, w) in [
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ] {
            let (i, j) = (i0 + di, j0 + dj);
            if i >= 0 && j >= 0 && (i as usize) < m && (j as usize) < n {
                k.set(i as usize, j as usize, k.get(i as usize, j as usize) + w);
            }
        }
    }
    let total = k.sum();
    if total <= 0.0 {
        return Ok(Grid::delta(m, n));
    }
    Ok(k.scale(1.0 / total))
}

/// Synthesises a blurred observation from a clean image and kernel.
pub fn make_blurred_pair(
    truth: &Grid,
    kernel: &Grid,
    noise: NoiseSpec,
    mode: BoundaryMode,
    id: usize,
) -> Result<DatasetItem> {
    let clean = conv_same(truth, kernel, mode)?;
    let blurred = add_awgn(&clean, &noise);
    Ok(DatasetItem {
        truth: truth.clone(),
        kernel: kernel.clone(),
        blurred,
        noise,
        mode,
        id,
    })
}

/// Zero-pads an image by the kernel half-width on each side, so blur
/// from a kernel-sized PSF cannot wrap content off the frame.
pub fn pad_for_kernel(truth: &Grid, kshape: (usize, usize)) -> Grid {
    let (pm, pn) = (kshape.0 / 2, kshape.1 / 2);
    let mut out = Grid::zeros(truth.rows() + 2 * pm, truth.cols() + 2 * pn);
    for i in 0..truth.rows() {
        for j in 0..truth.cols() {
            out.set(i + pm, j + pn, truth.get(i, j));
        }
    }
    out
}
