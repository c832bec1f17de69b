use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A configuration value is out of its valid range.
    Config(String),
    /// A scene carries no boxes, so no diagonal supervision exists.
    EmptyBoxes,
    /// Box corners are degenerate or outside the image.
    InvalidBox(String),
    /// A loss became NaN or infinite.
    Diverged { epoch: usize, batch: usize },
    /// No class has any ground truth; mAP is undefined.
    UndefinedMetric,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::EmptyBoxes => f.write_str("scene has no boxes; diagonal targets are undefined"),
            Error::InvalidBox(msg) => write!(f, "invalid box: {msg}"),
            Error::Diverged { epoch, batch } => {
                write!(
                    f,
                    "loss diverged (non-finite) at epoch {epoch}, batch {batch}"
                )
            }
            Error::UndefinedMetric => f.write_str("no class has ground truth; mAP is undefined"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
