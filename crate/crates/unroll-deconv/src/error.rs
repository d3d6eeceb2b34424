use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum DeconvError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel {krows}x{kcols} does not fit image {irows}x{icols}")]
    KernelTooLarge {
        krows: usize,
        kcols: usize,
        irows: usize,
        icols: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at epoch {epoch} (tape node {node})")]
    NonFiniteLoss { epoch: usize, node: usize },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, DeconvError>;
