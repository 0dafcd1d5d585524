use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A required PLY property or header element is missing or malformed.
    #[error("PLY format error: {0}")]
    Format(String),

    #[error("invalid data at element {index}: {message}")]
    Data { index: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("corrupt or truncated bitstream: {0}")]
    Bitstream(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("attribute {attr}: {source}")]
    Attribute {
        attr: u8,
        #[source]
        source: Box<Error>,
    },

    /// Wraps an error with the codec stage that produced it.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn bitstream(msg: impl Into<String>) -> Self {
        Error::Bitstream(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
