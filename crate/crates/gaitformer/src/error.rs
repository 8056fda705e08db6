use std::path::PathBuf;

use gaitformer_core::Variant;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("`{0}` is not a walk file name (expected <Ga|Ju|Si><Pt|Co><NN>_<NN>.txt)")]
    FileName(String),

    #[error("{}: no walk files found", .0.display())]
    EmptyDataset(PathBuf),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("file format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("model file holds variant {found}, expected {expected}")]
    VariantMismatch { expected: Variant, found: Variant },

    #[error("model file tensors do not fit variant {variant}: {reason}")]
    ShapeMismatch { variant: Variant, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] gaitformer_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
