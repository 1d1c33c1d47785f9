use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error in `{input}` at byte {pos}: {msg}")]
    Parse { input: String, pos: usize, msg: String },

    #[error("coordinate {coord} = {value} lies outside the chart domain [{lower}, {upper}]")]
    Domain {
        coord: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("twist is singular at {point:?} (condition number {condition:.3e}){}", step_suffix(*step))]
    TwistSingular {
        point: Vec<f64>,
        condition: f64,
        step: Option<usize>,
    },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at path step {k}"),
        None => String::new(),
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
