use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("training diverged (loss not finite) at step {step}")]
    TrainingDiverged { step: usize },

    #[error("reconstruction of layer {layer} diverged at iteration {iteration}")]
    ReconstructionDiverged { layer: usize, iteration: usize },

    #[error("fine-tuning diverged at epoch {epoch}")]
    FinetuneDiverged { epoch: usize },

    #[error("sampler diverged at step {step}")]
    SamplerDiverged { step: usize },

    #[error("activation quantizer not fitted for layer `{0}`")]
    UnfittedActivation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Training, reconstruction, fine-tuning or sampling produced non-finite
    /// or unbounded values.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::TrainingDiverged { .. }
                | Error::ReconstructionDiverged { .. }
                | Error::FinetuneDiverged { .. }
                | Error::SamplerDiverged { .. }
        )
    }
}
