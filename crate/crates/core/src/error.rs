use thiserror::Error;

/// Errors raised by the cache, policy, decoder and analysis layers.
///
/// The `Display` form starts with a stable kebab-case code so that callers
/// (and the CLI) can match on it without depending on the free-text tail.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty-softmax-domain")]
    EmptySoftmaxDomain,
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty-cache")]
    EmptyCache,
    #[error("non-finite-value")]
    NonFinite,
    #[error("invalid-grid: {0}")]
    InvalidGrid(String),
    #[error("invalid-rho: {0}")]
    InvalidRho(String),
    #[error("invalid-budget: {0}")]
    InvalidBudget(String),
    #[error("budget-not-line-aligned: rho {rho} on {h}x{w} gives B = {budget_num}/{budget_den}; nearest valid rho: {nearest}")]
    BudgetNotLineAligned {
        rho: String,
        h: usize,
        w: usize,
        budget_num: u64,
        budget_den: u64,
        nearest: String,
    },
    #[error("budget-too-small: B = {budget} cannot hold {n_init} anchor tokens, {recent_lines} recent line(s) and one line of evictable mid tokens (w = {w})")]
    BudgetTooSmall {
        budget: usize,
        n_init: usize,
        recent_lines: usize,
        w: usize,
    },
    #[error("position-regression: position {position} after {last}")]
    PositionRegression { position: usize, last: usize },
    #[error("position-out-of-grid: {position} not in 0..{n}")]
    PositionOutOfGrid { position: usize, n: usize },
    #[error("compression-not-active at line {line}")]
    CompressionNotActive { line: usize },
    #[error("protected-region-eviction: store index {index} (position {position})")]
    ProtectedRegionEviction { index: usize, position: usize },
    #[error("guide-queue-empty")]
    GuideQueueEmpty,
    #[error("empty-mid-region")]
    EmptyMidRegion,
    #[error("insufficient-mid-tokens: need {needed}, have {available}")]
    InsufficientMidTokens { needed: usize, available: usize },
    #[error("empty-condition")]
    EmptyCondition,
    #[error("generation-complete")]
    GenerationComplete,
    #[error("invalid-model-config: {0}")]
    InvalidModelConfig(String),
    #[error("non-normalized-attention: row sums to {0}")]
    NonNormalizedAttention(f64),
    #[error("trace-missing-attention")]
    TraceMissingAttention,
    #[error("trace-missing-timings")]
    TraceMissingTimings,
    #[error("line-out-of-range: {0}")]
    LineOutOfRange(String),
    #[error("empty-common-prefix: line {0} has no earlier entries to compare")]
    EmptyCommonPrefix(usize),
    #[error("unknown-policy: {0}")]
    UnknownPolicy(String),
    #[error("unknown-config-keys: {0}")]
    UnknownConfigKeys(String),
    #[error("config-parse: {0}")]
    ConfigParse(String),
    #[error("trace-parse: {0}")]
    TraceParse(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// The stable kebab-case code at the front of the display string.
    pub fn code(&self) -> String {
        let s = self.to_string();
        s.split([':', ' '])
            .next()
            .unwrap_or_default()
            .to_string()
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
