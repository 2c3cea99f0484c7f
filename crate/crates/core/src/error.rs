use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("spatial underflow in {op}: input {input:?} is smaller than window {window:?}")]
    SpatialUnderflow {
        op: &'static str,
        input: Vec<usize>,
        window: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called without a recorded forward pass")]
    NoForwardPass,

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("degenerate weight in layer {0}: all entries are zero")]
    DegenerateWeight(String),

    #[error("layer {0} is already decomposed")]
    AlreadyDecomposed(String),

    #[error("unknown architecture template {0:?}")]
    UnknownTemplate(String),

    #[error("shape inference failed at node {node}: {reason}")]
    ShapeInference { node: String, reason: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("layer {0} has no materialized weights (graph was built for counting only)")]
    Unmaterialized(String),

    #[error("model destroyed: every basis vector of the first layer ({0}) would be pruned")]
    ModelDestroyed(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("unknown importance method {0:?}")]
    UnknownMethod(String),

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected}, found {actual}")]
    BadMagic { expected: String, actual: String },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Stage { source, .. } => source.class(),
            Error::NonConvergence { .. }
            | Error::DegenerateWeight(_)
            | Error::ModelDestroyed(_)
            | Error::Divergence { .. }
            | Error::NonFinite(_)
            | Error::Invariant(_) => ErrorClass::Numeric,
            Error::Io(_) | Error::BadMagic { .. } | Error::Truncated(_) | Error::Format(_) => {
                ErrorClass::Io
            }
            _ => ErrorClass::Config,
        }
    }
}

pub(crate) fn shape_mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Attaches the offending path to I/O errors.
pub(crate) trait IoAt<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoAt<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }
}
