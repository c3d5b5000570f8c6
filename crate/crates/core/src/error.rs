use thiserror::Error;

/// Errors raised anywhere in the model pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected: {components} components")]
    DisconnectedGraph { components: usize },
    #[error("site {site} has no neighbors")]
    IsolatedSite { site: usize },
    #[error("invalid edge ({a}, {b}) for a graph with {n_sites} sites")]
    InvalidEdge { a: usize, b: usize, n_sites: usize },
    #[error("a graph needs at least 2 sites, got {0}")]
    TooFewSites(usize),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("eigendecomposition did not converge")]
    EigenFailure,
    #[error("expected {expected} zero eigenvalue(s), found {found}")]
    RankDeficiency { expected: usize, found: usize },
    #[error("rho = {0} is outside [0, 1)")]
    InvalidRho(f64),
    #[error("{0} is not symmetric positive-definite")]
    NotPositiveDefinite(String),
    #[error("design matrix for group {group} is singular")]
    SingularDesign { group: usize },
    #[error("full-conditional factorization failed at site {site}")]
    FactorizationFailure { site: usize },
    #[error("group {group} has {observed} observed cells, need at least 2")]
    InsufficientData { group: usize, observed: usize },
    #[error("all residuals of group {group} are zero")]
    DegenerateResiduals { group: usize },
    #[error("need at least {needed} stored draws, have {have}")]
    InsufficientDraws { needed: usize, have: usize },
    #[error("total population is zero for group {group}, time {time}")]
    ZeroTotalPopulation { group: usize, time: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampler aborted at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
