use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("too few observations: {found} (at least {required} required)")]
    TooFewObservations { found: usize, required: usize },

    #[error("day of year {doy} outside the accepted range")]
    DateOutOfRange { doy: i64 },

    #[error("acquisition dates must be strictly increasing (index {index})")]
    DatesNotIncreasing { index: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("extent is empty")]
    EmptyExtent,

    #[error("extent is not aligned to the {resolution} m grid")]
    MisalignedExtent { resolution: f64 },

    #[error("crop polygon {index} is not a simple polygon")]
    InvalidPolygon { index: usize },

    #[error("no valid pixels in the batch")]
    NoValidPixels,

    #[error("every timestep is padded")]
    AllPadded,

    #[error("window [{row}, {col}] of size {size} exceeds bounds {height}x{width}")]
    WindowOutOfBounds {
        row: i64,
        col: i64,
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("standard deviation of channel {channel} is zero")]
    ZeroStd { channel: usize },

    #[error("image must be square, got {height}x{width}")]
    NonSquare { height: usize, width: usize },

    #[error("non-finite loss at optimizer step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("{0}")]
    Observer(String),
}
