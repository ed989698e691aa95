use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("grouping error: expected 4 frames per group, got {0}")]
    Grouping(usize),
    #[error("empty stream: {0}")]
    EmptyStream(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("threshold error: {0}")]
    Threshold(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("supervision error: {0}")]
    Supervision(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("box error: {0}")]
    Box(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("stream error: {0}")]
    Stream(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Strategy(_) | Error::Policy(_) => 2,
            Error::Numeric(_) | Error::Check(_) => 4,
            _ => 3,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
