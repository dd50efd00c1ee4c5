//! Strapdown inertial navigation: integrate IMU samples into a [`NavState`].
//!
//! The kinematics are the classic NED local-level equations: position rate
//! from the curvature radii, velocity rate from specific force plus gravity
//! minus transport/Coriolis terms, attitude rate from the gyro minus the
//! rotation of the navigation frame itself. Integration is forward Euler
//! with a symmetric re-orthonormalization of the DCM after every step, which
//! keeps the inverse-IMU round trip exact to first order.

use crate::geodesy::{skew, Attitude, EarthModel, GeoPosition, GeodesyError};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MechanizationError {
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    /// A state component left the finite range during integration.
    #[error("non-finite navigation state at t = {0}")]
    NonFinite(f64),
}

/// The full (non-error) navigation solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub pos: GeoPosition,
    /// NED velocity (m/s).
    pub vel: Vector3<f64>,
    pub att: Attitude,
    /// Seconds since scenario start.
    pub time: f64,
}

impl NavState {
    pub fn new(pos: GeoPosition, vel: Vector3<f64>, att: Attitude, time: f64) -> Self {
        NavState {
            pos,
            vel,
            att,
            time,
        }
    }

    fn is_finite(&self) -> bool {
        self.pos.lat.is_finite()
            && self.pos.lon.is_finite()
            && self.pos.alt.is_finite()
            && self.vel.iter().all(|v| v.is_finite())
            && self.att.dcm.iter().all(|v| v.is_finite())
    }
}

/// Timestamped specific-force and angular-rate triplets in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    /// Specific force f^b (m/s²).
    pub accel: Vector3<f64>,
    /// Angular rate ω_ib^b (rad/s).
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(time: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        ImuSample { time, accel, gyro }
    }
}

/// Rate of change of (lat, lon, alt): [v_N/(R_M+h), v_E/(cosφ(R_N+h)), −v_D].
pub fn position_rate(em: &EarthModel, state: &NavState) -> Result<Vector3<f64>, GeodesyError> {
    let lat = state.pos.lat;
    if (lat.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9 {
        return Err(GeodesyError::PoleSingularity(lat));
    }
    let (rm, rn) = em.principal_radii(lat);
    Ok(Vector3::new(
        state.vel.x / (rm + state.pos.alt),
        state.vel.y / (lat.cos() * (rn + state.pos.alt)),
        -state.vel.z,
    ))
}

/// NED acceleration: T_b^n f^b + g^n − ([ω_en×] + 2[ω_ie×]) v^n.
pub fn velocity_rate(
    em: &EarthModel,
    state: &NavState,
    f_b: &Vector3<f64>,
) -> Result<Vector3<f64>, GeodesyError> {
    let rates = em.earth_rates(&state.pos, &state.vel)?;
    let g = em.gravity_n(&state.pos);
    Ok(state.att.dcm * f_b + g - (rates.omega_en + 2.0 * rates.omega_ie).cross(&state.vel))
}

/// DCM rate: T_b^n([ω_ib^b×] − [ω_in^b×]) with ω_in^b = (T_b^n)ᵀ ω_in^n.
pub fn attitude_rate(
    em: &EarthModel,
    state: &NavState,
    omega_ib_b: &Vector3<f64>,
) -> Result<Matrix3<f64>, GeodesyError> {
    let rates = em.earth_rates(&state.pos, &state.vel)?;
    let omega_in_b = state.att.dcm.transpose() * rates.omega_in();
    Ok(state.att.dcm * (skew(omega_ib_b) - skew(&omega_in_b)))
}

/// One forward-Euler step of the navigation equations, followed by DCM
/// re-orthonormalization. Deterministic: identical inputs give bit-identical
/// outputs.
pub fn integrate_step(
    em: &EarthModel,
    state: &NavState,
    imu: &ImuSample,
    dt: f64,
) -> Result<NavState, MechanizationError> {
    let p_dot = position_rate(em, state)?;
    let v_dot = velocity_rate(em, state, &imu.accel)?;
    let t_dot = attitude_rate(em, state, &imu.gyro)?;

    let pos = GeoPosition::new(
        state.pos.lat + p_dot.x * dt,
        state.pos.lon + p_dot.y * dt,
        state.pos.alt + p_dot.z * dt,
    );
    let vel = state.vel + v_dot * dt;
    let att = Attitude::from_dcm(state.att.dcm + t_dot * dt).orthonormalized();
    let next = NavState::new(pos, vel, att, state.time + dt);
    if !next.is_finite() {
        return Err(MechanizationError::NonFinite(next.time));
    }
    Ok(next)
}
