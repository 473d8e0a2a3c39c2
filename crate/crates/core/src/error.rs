use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tree depth {requested} exceeds the hard cap {cap} (2^N nodes must stay tractable)")]
    TreeTooDeep { requested: usize, cap: usize },

    #[error("shape error in {name} at level {level}, node {node}: expected {expected}, got {got}")]
    Shape {
        name: String,
        level: usize,
        node: usize,
        expected: String,
        got: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("definiteness failure in {what} at level {level}, node {node}: eigmin = {eigmin:.3e}")]
    Definiteness {
        what: String,
        level: usize,
        node: usize,
        eigmin: f64,
    },

    #[error("singular linear system in {context}: {rows}x{cols}, rank {rank} (nullity {nullity})")]
    Singular {
        context: String,
        rows: usize,
        cols: usize,
        rank: usize,
        nullity: usize,
    },

    #[error("{context} did not converge after {iters} iterations (last ratio {ratio:.3e})")]
    Convergence {
        context: String,
        iters: usize,
        ratio: f64,
    },

    #[error("numerical overflow in {context} at step {step}")]
    Overflow { context: String, step: usize },

    #[error("infeasible stationarity system: block residuals {residuals:?} exceed tol {tol:.3e}")]
    Infeasible { residuals: Vec<f64>, tol: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with a pipeline stage label.
    pub fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
