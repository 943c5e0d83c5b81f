//! Error type shared by every module of the crate.
//!
//! Each variant corresponds to one named failure of a module operation. The
//! machine-readable [`Error::code`] is what the HTTP layer exposes.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // job model
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("stage mismatch: {0}")]
    StageMismatch(String),
    #[error("plugin `{0}` is not approved")]
    UnapprovedPlugin(String),
    #[error("job has no seed labels")]
    EmptySeed,
    #[error("seed label references unknown image `{0}`")]
    UnknownSeedImage(String),
    #[error("bad label schema: {0}")]
    BadLabelSchema(String),
    #[error("illegal transition from {state} on {event}")]
    IllegalTransition { state: String, event: String },

    // plugin host
    #[error("plugin archive has no manifest.json")]
    ManifestMissing,
    #[error("invalid plugin manifest: {0}")]
    ManifestInvalid(String),
    #[error("plugin {name} {version} is already registered")]
    DuplicateNameVersion { name: String, version: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("plugin `{0}` already has an approval decision")]
    AlreadyDecided(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("plugin timed out after {0:?}")]
    PluginTimeout(std::time::Duration),
    #[error("plugin exited with {code:?}: {stderr}")]
    PluginCrashed { code: Option<i32>, stderr: String },
    #[error("malformed plugin response: {0}")]
    MalformedResponse(String),
    #[error("method `{method}` is not valid for stage {stage}")]
    MethodStageMismatch { method: String, stage: String },
    #[error("plugin reported an error: {0}")]
    PluginError(String),

    // builtin stages
    #[error("image has no pixels")]
    EmptyImage,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label `{0}` is not in the label schema")]
    UnknownLabel(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("sampling pool is empty")]
    EmptyPool,
    #[error("image `{0}` has no annotations")]
    MissingAnnotations(String),
    #[error("class `{0}` is outside the schema")]
    UnknownClass(String),

    // loop engine
    #[error("no unlabeled images left in the pool")]
    PoolExhausted,
    #[error("sampler contract violated: {0}")]
    SamplerContractViolation(String),
    #[error("consensus contract violated: {0}")]
    ConsensusContractViolation(String),
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error("job is in state {0}")]
    WrongState(String),
    #[error("model version {0} not found")]
    VersionNotFound(u32),

    // crowd coordination
    #[error("batch has no images")]
    EmptyBatch,
    #[error("platform `{platform}` unavailable: {reason}")]
    PlatformUnavailable { platform: String, reason: String },
    #[error("unknown platform profile `{0}`")]
    UnknownPlatform(String),
    #[error("unknown batch token")]
    UnknownToken,
    #[error("batch is closed")]
    BatchClosed,
    #[error("worker has annotated every image of the batch")]
    NothingLeft,
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session expired")]
    SessionExpired,
    #[error("session already completed")]
    SessionCompleted,
    #[error("image `{0}` is not part of the batch")]
    ImageNotInBatch(String),
    #[error("wrong label type: {0}")]
    WrongLabelType(String),
    #[error("worker already annotated image `{0}`")]
    DuplicateAnnotation(String),
    #[error("geometry out of range: {0}")]
    GeometryOutOfRange(String),
    #[error("no annotations were submitted in this session")]
    NoWorkDone,

    // storage
    #[error("no decodable images in source ({skipped} files skipped)")]
    EmptySource { skipped: usize },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("cannot decode image: {0}")]
    UndecodableImage(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid document: {0}")]
    InvalidDocument(String),

    // barcode localizer
    #[error("window {window_w}x{window_h} does not fit image {image_w}x{image_h}")]
    WindowLargerThanImage {
        window_w: u32,
        window_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("region {region_w}x{region_h} does not fit image {image_w}x{image_h}")]
    RegionTooLarge {
        region_w: u32,
        region_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-readable error name.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            UnknownPlugin(_) => "UnknownPlugin",
            StageMismatch(_) => "StageMismatch",
            UnapprovedPlugin(_) => "UnapprovedPlugin",
            EmptySeed => "EmptySeed",
            UnknownSeedImage(_) => "UnknownSeedImage",
            BadLabelSchema(_) => "BadLabelSchema",
            IllegalTransition { .. } => "IllegalTransition",
            ManifestMissing => "ManifestMissing",
            ManifestInvalid(_) => "ManifestInvalid",
            DuplicateNameVersion { .. } => "DuplicateNameVersion",
            NotFound(_) => "NotFound",
            AlreadyDecided(_) => "AlreadyDecided",
            Forbidden(_) => "Forbidden",
            PluginTimeout(_) => "PluginTimeout",
            PluginCrashed { .. } => "PluginCrashed",
            MalformedResponse(_) => "MalformedResponse",
            MethodStageMismatch { .. } => "MethodStageMismatch",
            PluginError(_) => "PluginError",
            EmptyImage => "EmptyImage",
            DimensionMismatch { .. } => "DimensionMismatch",
            UnknownLabel(_) => "UnknownLabel",
            EmptyTrainingSet => "EmptyTrainingSet",
            EmptyPool => "EmptyPool",
            MissingAnnotations(_) => "MissingAnnotations",
            UnknownClass(_) => "UnknownClass",
            PoolExhausted => "PoolExhausted",
            SamplerContractViolation(_) => "SamplerContractViolation",
            ConsensusContractViolation(_) => "ConsensusContractViolation",
            EmptyHoldout => "EmptyHoldout",
            WrongState(_) => "WrongState",
            VersionNotFound(_) => "VersionNotFound",
            EmptyBatch => "EmptyBatch",
            PlatformUnavailable { .. } => "PlatformUnavailable",
            UnknownPlatform(_) => "UnknownPlatform",
            UnknownToken => "UnknownToken",
            BatchClosed => "BatchClosed",
            NothingLeft => "NothingLeft",
            UnknownSession(_) => "UnknownSession",
            SessionExpired => "SessionExpired",
            SessionCompleted => "SessionCompleted",
            ImageNotInBatch(_) => "ImageNotInBatch",
            WrongLabelType(_) => "WrongLabelType",
            DuplicateAnnotation(_) => "DuplicateAnnotation",
            GeometryOutOfRange(_) => "GeometryOutOfRange",
            NoWorkDone => "NoWorkDone",
            EmptySource { .. } => "EmptySource",
            CorruptArchive(_) => "CorruptArchive",
            UndecodableImage(_) => "UndecodableImage",
            Io { .. } => "IoFailure",
            InvalidDocument(_) => "InvalidDocument",
            WindowLargerThanImage { .. } => "WindowLargerThanImage",
            RegionTooLarge { .. } => "RegionTooLarge",
            InvalidArgument(_) => "InvalidArgument",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidDocument(e.to_string())
    }
}
