use dualproc::evalbench::EvalError;
use dualproc::lsys2::Lsys2Error;
use dualproc::runtime::RuntimeError;
use dualproc::simenv::SimError;
use dualproc::ssys1::Ssys1Error;
use dualproc::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gate failed: {0}")]
    Gate(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Provenance(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Gate(_) => 4,
        }
    }

    /// Prefixes the message with what was being done, keeping the kind.
    pub fn context(self, what: &str) -> Self {
        let wrap = |m: String| format!("{what}: {m}");
        match self {
            CliError::Usage(m) => CliError::Usage(wrap(m)),
            CliError::Config(m) => CliError::Config(wrap(m)),
            CliError::Provenance(m) => CliError::Provenance(wrap(m)),
            CliError::Numeric(m) => CliError::Numeric(wrap(m)),
            CliError::Gate(m) => CliError::Gate(wrap(m)),
            CliError::Other(m) => CliError::Other(wrap(m)),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::NanGradient(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<Lsys2Error> for CliError {
    fn from(e: Lsys2Error) -> Self {
        match e {
            Lsys2Error::Numeric { .. } => CliError::Numeric(e.to_string()),
            Lsys2Error::Provenance(_) => CliError::Provenance(e.to_string()),
            Lsys2Error::Config(_) => CliError::Config(e.to_string()),
            Lsys2Error::Tensor(t) => t.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<Ssys1Error> for CliError {
    fn from(e: Ssys1Error) -> Self {
        match e {
            Ssys1Error::Numeric { .. } => CliError::Numeric(e.to_string()),
            Ssys1Error::Provenance(_) => CliError::Provenance(e.to_string()),
            Ssys1Error::Config(_) => CliError::Config(e.to_string()),
            Ssys1Error::Tensor(t) => t.into(),
            Ssys1Error::Lsys2(l) => l.into(),
            Ssys1Error::Sim(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Provenance(_) => CliError::Provenance(e.to_string()),
            RuntimeError::Lsys2 { step, source } => CliError::from(source).context(&format!("step {step}")),
            RuntimeError::Ssys1(s) => s.into(),
            RuntimeError::Sim(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Episode { task, episode, source } => {
                CliError::from(*source).context(&format!("{task} episode {episode}"))
            }
            EvalError::Provenance(_) => CliError::Provenance(e.to_string()),
            EvalError::Benchmark(_) => CliError::Gate(e.to_string()),
            EvalError::Protocol(_) => CliError::Config(e.to_string()),
            EvalError::Runtime(r) => r.into(),
            EvalError::Sim(s) => s.into(),
            EvalError::Ssys1(s) => s.into(),
            EvalError::Lsys2(l) => l.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}
