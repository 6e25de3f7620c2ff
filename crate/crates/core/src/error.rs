use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layout infeasible: {0}")]
    LayoutInfeasible(String),

    #[error("at most {limit} receiver channels can be sampled, {requested} requested")]
    AdcChannelLimit { limit: usize, requested: usize },

    #[error("temperature {0} °C outside sensor range [-40, 85] °C")]
    SensorRange(f64),

    #[error("temperature sensor unavailable: {0}")]
    SensorIo(String),

    #[error("target {target:?} mm outside working volume {bounds}{}", index.map(|i| format!(" (command {i})")).unwrap_or_default())]
    OutOfVolume {
        target: [f64; 3],
        bounds: String,
        index: Option<usize>,
    },

    #[error("frame has {found} channels, register file has {expected}")]
    FrameShape { expected: usize, found: usize },

    #[error("waveform has no edges")]
    NoEdges,

    #[error("field evaluated at {0:?} mm, too close to a source")]
    Singularity([f64; 3]),

    #[error("no -6 dB crossing inside the {0} mm scan")]
    SliceTooSmall(f64),

    #[error("step {step} mm exceeds half the focal width ({limit} mm)")]
    UnstablePlan { step: f64, limit: f64 },

    #[error("layout has no receiver channels")]
    NoReceiver,
}
