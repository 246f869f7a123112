use thiserror::Error;

/// Errors surfaced by simulation building blocks and the run harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("{name} = {value} outside [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid cell range [{from}, {to}] for {n} cells")]
    BadCellRange { from: isize, to: isize, n: usize },

    #[error("wave {id} is dissipated")]
    WaveDissipated { id: u64 },

    #[error("CAV {id} is not an actively controlled actuator")]
    NotActuating { id: u64 },

    #[error("step index {step} outside horizon of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("uncontrolled TTS {tts_unc} below minimum TTS {tts_min}")]
    BadDelayBaseline { tts_unc: f64, tts_min: f64 },

    #[error("invariant violated at step {step}: {what}")]
    InvariantViolated { step: usize, what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
