use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid groups: {groups} does not divide in={cin} / out={cout}")]
    InvalidGroups { groups: usize, cin: usize, cout: usize },
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("top-k fraction {k} keeps no entry out of {len}")]
    InvalidK { k: f64, len: usize },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("checkpoint lacks normalization running statistics")]
    MissingStats,
    #[error("class prior {0} outside (0, 1)")]
    InvalidPrior(f64),
    #[error("parameter sets differ: {0}")]
    StructureMismatch(String),
    #[error("empty sample stream")]
    EmptyStream,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("every mask is empty")]
    AllEmpty,
    #[error("need at least {need} domains, got {got}")]
    TooFewDomains { need: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
