//! INS/GNSS sensor fusion with adaptive process-noise selection.
//!
//! The crate integrates strapdown inertial navigation with GNSS position
//! fixes in a 15-state error-state Kalman filter. The continuous process
//! noise covariance feeding the filter is chosen by one of three
//! interchangeable policies:
//!
//! * a constant diagonal,
//! * an innovation-window estimate built from the filter's own residuals,
//! * a 1D-convolutional regressor that maps raw IMU windows to per-channel
//!   noise variances (the hybrid approach).
//!
//! Modules:
//! * [`geodesy`] — WGS-84 Earth model, frames, rotation utilities.
//! * [`mechanization`] — strapdown integration of IMU samples.
//! * [`scenario`] — trajectory simulation, inverse-IMU synthesis, dataset
//!   generation, GNSS simulation.
//! * [`eskf`] — the 15-state error-state filter.
//! * [`adaptive`] — process-noise policies and the online fusion loop.
//! * [`neuralq`] — the from-scratch convolutional regressor.
//! * [`harness`] — metrics, comparison runs, log I/O, and the CLI.

pub mod adaptive;
pub mod eskf;
pub mod geodesy;
pub mod harness;
pub mod mechanization;
pub mod neuralq;
pub mod scenario;
