use thiserror::Error;

use crate::conic::ConicError;
use crate::economics::EconomicsError;
use crate::fairness::FairnessError;
use crate::hc::HcError;
use crate::io::IoError;
use crate::loadflow::LoadFlowError;
use crate::network::NetworkError;
use crate::series::SeriesError;

/// Crate-level error wrapping every module error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    LoadFlow(#[from] LoadFlowError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Hc(#[from] HcError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Economics(#[from] EconomicsError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
