use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("cannot track against an empty map")]
    EmptyMap,
    #[error("no frames to optimize")]
    NoFrames,
    #[error("trajectory too short for alignment ({0} poses)")]
    TrajectoryTooShort(usize),
    #[error("dataset at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("map file: {0}")]
    MapFile(String),
    #[error("map file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
