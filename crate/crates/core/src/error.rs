use thiserror::Error;

use crate::calibrate::CalibrationError;
use crate::dataset::DatasetError;
use crate::evaluate::StatsError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::volume::VolumeError;

/// Crate-level error joining the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
