//! Library backing the `wts` binary: command implementations, the
//! bounded-context and latency sweeps, and the error-to-exit-code mapping.

pub mod bench;
pub mod commands;

use wts_core::grpo::GrpoError;
use wts_core::rcsm_cache::CacheError;
use wts_core::stream_core::IngestError;
use wts_core::toy_decoder::DimError;
use wts_core::wts_engine::EngineError;

/// Exit codes, one per internal error class. Code 1 is reserved for a
/// verification mismatch (the suite ran but found a divergence).
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INGEST: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_CACHE: i32 = 5;
pub const EXIT_DECODER: i32 = 6;
pub const EXIT_ENGINE: i32 = 7;
pub const EXIT_TRAIN: i32 = 8;
pub const EXIT_IO: i32 = 9;

/// Everything a command can fail with, each mapped to one exit code.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Ingest(IngestError),
    Config(String),
    Cache(CacheError),
    Decoder(DimError),
    Engine(EngineError),
    Train(GrpoError),
    Io(std::io::Error),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage: {m}"),
            AppError::Ingest(e) => write!(f, "script ingest: {e}"),
            AppError::Config(m) => write!(f, "config: {m}"),
            AppError::Cache(e) => write!(f, "cache: {e}"),
            AppError::Decoder(e) => write!(f, "decoder: {e}"),
            AppError::Engine(e) => write!(f, "engine: {e}"),
            AppError::Train(e) => write!(f, "training: {e}"),
            AppError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for AppError {}

impl AppError {
    /// Total mapping onto process exit codes; nested engine errors are
    /// attributed to the class that actually failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Ingest(_) => EXIT_INGEST,
            AppError::Config(_) => EXIT_CONFIG,
            AppError::Cache(_) => EXIT_CACHE,
            AppError::Decoder(_) => EXIT_DECODER,
            AppError::Engine(e) => engine_exit_code(e),
            AppError::Train(e) => match e {
                GrpoError::Engine(inner) => engine_exit_code(inner),
                _ => EXIT_TRAIN,
            },
            AppError::Io(_) => EXIT_IO,
        }
    }
}

fn engine_exit_code(e: &EngineError) -> i32 {
    match e {
        EngineError::Cache(_) => EXIT_CACHE,
        EngineError::Decoder(_) => EXIT_DECODER,
        EngineError::Config(_) => EXIT_CONFIG,
        EngineError::Script(_) | EngineError::Sample(_) => EXIT_ENGINE,
    }
}

impl From<IngestError> for AppError {
    fn from(e: IngestError) -> Self {
        AppError::Ingest(e)
    }
}

impl From<EngineError> for AppError {
    fn from(e: EngineError) -> Self {
        AppError::Engine(e)
    }
}

impl From<GrpoError> for AppError {
    fn from(e: GrpoError) -> Self {
        AppError::Train(e)
    }
}

impl From<CacheError> for AppError {
    fn from(e: CacheError) -> Self {
        AppError::Cache(e)
    }
}

impl From<DimError> for AppError {
    fn from(e: DimError) -> Self {
        AppError::Decoder(e)
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e)
    }
}

/// Help text block documenting the exit codes.
pub const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  1  verification found a divergence (verify)
  2  bad command line
  3  stream-script ingestion failed
  4  invalid configuration
  5  cache error
  6  decoder error
  7  engine or sampling error
  8  training error
  9  io error";
