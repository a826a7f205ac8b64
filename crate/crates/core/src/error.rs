use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad axis {axis} for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("bad dtype code {0}")]
    BadDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("even kernel size {0}; only odd kernels support same padding")]
    EvenKernel(usize),
    #[error("odd extent {0}; 2x pooling needs even extents")]
    OddExtent(usize),
    #[error("odd channel count {0}")]
    OddChannels(usize),
    #[error("loss must be rank-0, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("parameter {0} does not reach the loss")]
    DisconnectedTape(String),
    #[error("function is not deterministic: two forward passes differ ({0} vs {1})")]
    NonDeterministicFn(f64, f64),
    #[error("bad input size: {0}")]
    BadInputSize(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("bad mask: {0}")]
    BadMask(String),
    #[error("non-finite loss {loss} at step {step} (samples {samples:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        samples: Vec<usize>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
