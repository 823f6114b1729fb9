use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("sensitivity undefined: {0}")]
    SensitivityUndefined(String),
    #[error("rho undefined for never-stop threshold (owner {owner}, t = {t})")]
    RhoUndefined { owner: usize, t: usize },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("io error")]
    Io(#[from] std::io::Error),
    #[error("parse error")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
