use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid degradation record: {0}")]
    InvalidRecord(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("attention map is all zeros")]
    DegenerateMap,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
