use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read NIfTI volume {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no slice of volume `{volume}` contains a labeled target voxel")]
    Sampling { volume: String },

    #[error("equal convolutional depth violated at node {node}: incoming depths {depths:?}")]
    EcdViolation { node: String, depths: Vec<usize> },

    #[error("fusion requires at least one pyramid level")]
    EmptyPyramid,

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error(
        "non-finite loss at step {step} (epoch {epoch}, dataset `{dataset}`, volumes {volumes:?})"
    )]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        dataset: String,
        volumes: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
