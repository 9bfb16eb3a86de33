use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("invalid downsampling target: {0}")]
    InvalidTarget(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("aggregate over an empty list is undefined")]
    UndefinedAggregate,
    #[error("value out of range: {0}")]
    Range(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("mask prompt is empty at the visual token resolution")]
    EmptyPrompt,
    #[error("pre-fill target needs at least one object")]
    NoObject,
    #[error("object [{0}] is not visible in any frame")]
    OmittedObject(u32),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("pre-fill arity mismatch: {objects} parsed objects but {masks} masks")]
    PrefillArity { objects: usize, masks: usize },
    #[error("memory bank is empty, nothing to inject")]
    NothingToInject,
    #[error("no pooled feature for object [{object_id}] at frame {frame}")]
    UnresolvedSlot { object_id: u32, frame: usize },
    #[error("unknown object [{0}]")]
    UnknownObject(u32),
    #[error("memory bank is full ({0} objects)")]
    BankFull(usize),
    #[error("frame {height}x{width} is smaller than one {patch}px patch")]
    TooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("sequence of {len} tokens exceeds the {max}-token limit")]
    SequenceLength { len: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("clip has no frames")]
    NoFrame,
    #[error("training aborted: {0}")]
    TrainingAbort(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error at line {line}, field `{field}`: {message}")]
    Validation {
        line: usize,
        field: String,
        message: String,
    },
    #[error("conversation references object [{0}] which has no mask")]
    DanglingReference(u32),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("upload error: {0}")]
    Upload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
