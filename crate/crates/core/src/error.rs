use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pose out of range: {0}")]
    Pose(String),

    #[error("point behind source (z = {z} mm)")]
    BehindSource { z: f64 },

    #[error("object is empty (no voxel with positive attenuation)")]
    EmptyObject,

    #[error("format error in field `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("shape mismatch at {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("training diverged at epoch {epoch}, iteration {iteration} (loss = {loss})")]
    Divergence {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("objective is not finite at {point:?}")]
    Diverged { point: Vec<f64> },

    #[error("no regressor for zone ({}, {}) group {group}", zone.0, zone.1)]
    Coverage { zone: (usize, usize), group: u8 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
