use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("expression error at {pos}: {msg}")]
    Expr { pos: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("derivative depth {requested} exceeds configured depth {depth}")]
    UnsupportedDepth { requested: usize, depth: usize },

    #[error("evaluation produced a non-finite value at t={t}, x={x:?}, xi={xi:?}")]
    NonFinite { t: f64, x: Vec<f64>, xi: Vec<f64> },

    #[error("operator is not hyperbolic at t={t}, x={x:?}, xi={xi:?}")]
    NotHyperbolic { t: f64, x: Vec<f64>, xi: Vec<f64> },

    #[error(
        "root separation {margin:.3e} below c_min={c_min:.1e} at t={t}, x={x:?}; \
         use the weakly hyperbolic solver for degenerate operators"
    )]
    Degenerate { margin: f64, c_min: f64, t: f64, x: Vec<f64> },

    #[error("inconsistent phase: leading terms of the residual are {0:.3e} relative to |xi|")]
    InconsistentPhase(f64),

    #[error("requested time {t} exceeds the validity horizon {horizon}")]
    Horizon { t: f64, horizon: f64 },

    #[error("admissibility check failed: {0}")]
    Admissibility(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("weak hyperbolic exponent k={0} rejected: the remainder bounds divide by k-2, so k>2 is needed (use k>=3)")]
    WeakExponent(u32),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
