//! N-BEATS forecasting of ICU mean blood pressure with trend/seasonality
//! decomposition and post hoc analysis of forecast/actual trend mismatch.

pub mod analysis;
pub mod basis;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod plot;
pub mod preprocess;
pub mod tensor;
pub mod train;
