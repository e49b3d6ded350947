use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid phantom: {0}")]
    Phantom(String),
    #[error("invalid scan geometry: {0}")]
    Geometry(String),
    #[error("tissue table has no entry for tissue index {0}")]
    MissingTissue(usize),
    #[error("invalid tissue properties: {0}")]
    Tissue(String),
    #[error("98th percentile of the attenuation map is zero (fully opaque map)")]
    DegenerateAttenuation,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input size {h}x{w} is not divisible by {factor}; pad the input to a multiple of {factor}")]
    Divisibility { h: usize, w: usize, factor: usize },
    #[error("mask must be binary (0 or 1), found {0}")]
    NonBinaryMask(f64),
    #[error("crop {crop} exceeds image size {h}x{w}")]
    CropTooLarge { crop: usize, h: usize, w: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
