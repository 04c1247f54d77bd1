use gwf::data::DataError;
use gwf::model::ModelError;
use gwf::rollout::RolloutError;
use gwf::surrogate::SurrogateError;
use gwf::tensor::TensorError;
use gwf::train::TrainError;
use gwf::uq::UqError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const DIVERGED: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    fn with(code: u8, e: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite { .. } => DIVERGED,
        _ => DATA,
    }
}

fn rollout_code(e: &RolloutError) -> u8 {
    match e {
        RolloutError::NonFinite { .. } => DIVERGED,
        RolloutError::WindowLength { .. } | RolloutError::EmptyHorizon => USAGE,
        RolloutError::Model { source, .. } => tensor_code(source),
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::Waveformer(_) => USAGE,
        ModelError::Tensor(t) => tensor_code(t),
        ModelError::Graph(_) => DATA,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Divergence { .. } | TrainError::NonFiniteGrad(_) => DIVERGED,
        TrainError::Config(_) => USAGE,
        TrainError::Rollout(r) => rollout_code(r),
        TrainError::Tensor(t) => tensor_code(t),
        _ => DATA,
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::with(DATA, e)
    }
}

impl From<RolloutError> for Failure {
    fn from(e: RolloutError) -> Self {
        Self::with(rollout_code(&e), e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Self::with(train_code(&e), e)
    }
}

impl From<UqError> for Failure {
    fn from(e: UqError) -> Self {
        let code = match &e {
            UqError::AllDiverged(_) => DIVERGED,
            UqError::Invalid(_) | UqError::Probe(_) | UqError::ProbeSyntax(_) => USAGE,
            UqError::Rollout(r) => rollout_code(r),
            UqError::Io { .. } => DATA,
        };
        Self::with(code, e)
    }
}

impl From<SurrogateError> for Failure {
    fn from(e: SurrogateError) -> Self {
        let code = match &e {
            SurrogateError::Model(m) => model_code(m),
            SurrogateError::Train(t) => train_code(t),
            SurrogateError::Rollout(r) => rollout_code(r),
            SurrogateError::Tensor(t) => tensor_code(t),
            SurrogateError::Data(_) | SurrogateError::File { .. } | SurrogateError::Mismatch(_) => DATA,
        };
        Self::with(code, e)
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Self::with(tensor_code(&e), e)
    }
}
