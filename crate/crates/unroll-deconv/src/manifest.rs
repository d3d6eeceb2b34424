//! Persisted run manifests: everything needed to re-execute a run and
//! check that it reproduces the same final numbers.

use crate::durl::TrainConfig;
use crate::error::{DeconvError, Result};
use crate::grid::BoundaryMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Final metric block. Non-finite values are stored as null.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub psnr_db: Option<f64>,
    pub isnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub kernel_rmse_raw: Option<f64>,
    pub kernel_rmse_aligned: Option<f64>,
    /// SSIM between the reconstructed blurred image and the observation;
    /// defined even when no ground truth is available.
    pub recon_ssim: Option<f64>,
}

pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputRecord {
    pub fn for_bytes(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The parameters needed to re-execute a run from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplaySpec {
    Blur {
        image: PathBuf,
        kernel: Option<PathBuf>,
        kernel_size: Option<(usize, usize)>,
        sigma: f64,
        seed: u64,
        mode: BoundaryMode,
    },
    Rl {
        image: PathBuf,
        truth: Option<PathBuf>,
        kernel_true: Option<PathBuf>,
        kshape: (usize, usize),
        iters: usize,
        seed: u64,
        mode: BoundaryMode,
    },
    Durl {
        images: Vec<PathBuf>,
        truth: Option<PathBuf>,
        kernel_true: Option<PathBuf>,
        cfg: TrainConfig,
    },
    Transfer {
        image: PathBuf,
        weights: PathBuf,
        truth: Option<PathBuf>,
        seed: u64,
    },
    Bench {
        count: usize,
        layers: usize,
        epochs: usize,
        kernel_size: (usize, usize),
        sigma: f64,
        seed: u64,
        lr: f64,
        lambda: f64,
        mode: BoundaryMode,
        idx: Option<PathBuf>,
    },
    Gradcheck {
        layers: usize,
        image_size: usize,
        kernel_size: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputRecord>,
    pub replay: ReplaySpec,
    pub loss_history: Vec<f64>,
    pub final_metrics: Option<MetricsBlock>,
    /// Additional named scalars (benchmark means, gradcheck error).
    pub extra: BTreeMap<String, f64>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, replay: ReplaySpec) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            command: command.to_string(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            replay,
            loss_history: Vec::new(),
            final_metrics: None,
            extra: BTreeMap::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DeconvError::Manifest(e.to_string()))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| DeconvError::Manifest(e.to_string()))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(DeconvError::Manifest(format!(
                "unsupported manifest schema {}",
                m.schema
            )));
        }
        Ok(m)
    }

    /// True when the reproducible parts (metrics, extras, loss history)
    /// match bit-exactly. Wall clock is excluded.
    pub fn reproduces(&self, other: &RunManifest) -> bool {
        self.final_metrics == other.final_metrics
            && self.extra == other.extra
            && self.loss_history == other.loss_history
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let mut m = RunManifest::new(
            "rl",
            ReplaySpec::Rl {
                image: PathBuf::from("blurred.pgm"),
                truth: None,
                kernel_true: None,
                kshape: (3, 3),
                iters: 5,
                seed: 7,
                mode: BoundaryMode::Circular,
            },
        );
        m.seeds.insert("master".into(), 7);
        m.loss_history = vec![1.0, 0.5];
        m.final_metrics = Some(MetricsBlock {
            psnr_db: Some(10.0),
            isnr_db: finite(f64::INFINITY),
            ssim: Some(0.5),
            kernel_rmse_raw: None,
            kernel_rmse_aligned: None,
            recon_ssim: Some(0.9),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = m.save(dir.path()).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert!(m.reproduces(&back));
        assert_eq!(back.final_metrics.as_ref().unwrap().isnr_db, None);
    }

    #[test]
    fn float_parsing_is_bit_exact() {
        // serde_json's fast float parser can be off by one ulp; the
        // float_roundtrip feature must stay enabled or replay breaks on
        // values like this one (observed in the wild).
        let v = 0.957_168_001_616_182_7_f64;
        let parsed: f64 = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(v.to_bits(), parsed.to_bits());
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
