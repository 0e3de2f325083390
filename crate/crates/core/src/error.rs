use alloc::string::String;

/// Errors raised by the engine. Variants carry enough context to be reported
/// verbatim by the command-line tool.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graph has no output node")]
    EmptyGraph,
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("selector index {index} out of range for {classes} classes")]
    SelectorOutOfRange { index: usize, classes: usize },
    #[error("invalid layer handle {0}")]
    InvalidLayer(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail_arg {
    ($($t:tt)*) => {
        return Err($crate::Error::InvalidArgument(alloc::format!($($t)*)))
    };
}
pub(crate) use bail_arg;
