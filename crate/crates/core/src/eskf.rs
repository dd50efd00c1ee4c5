//! The 15-state error-state extended Kalman filter.
//!
//! Error state: δx = [δp, δv, δε, b_a, b_g] with position and velocity
//! errors carried as (true − estimated) in local NED meters and m/s, the
//! misalignment δε as the small rotation taking the true attitude to the
//! estimated one (T_true = (I − [δε×])·T̂), and the bias states as the
//! residual sensor biases still present in the compensated measurements.
//!
//! Position error lives in meters rather than geodetic radians so the
//! GNSS measurement matrix stays H = [I₃ 0₃ₓ₁₂] and the covariance stays
//! well-conditioned; [`gnss_residual`] and [`inject_and_reset`] handle the
//! geodetic mapping through the principal radii.

use crate::geodesy::{skew, Attitude, EarthModel, GeoPosition, GeodesyError};
use crate::mechanization::NavState;
use crate::scenario::GnssFix;
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

pub type StateVector = SVector<f64, 15>;
pub type Covariance = SMatrix<f64, 15, 15>;
pub type SystemMatrix = SMatrix<f64, 15, 15>;
pub type ShapingMatrix = SMatrix<f64, 15, 12>;
pub type GainMatrix = SMatrix<f64, 15, 3>;
pub type MeasurementMatrix = SMatrix<f64, 3, 15>;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    /// trace(P) exceeded the configured ceiling.
    #[error("covariance blowup: trace {0}")]
    CovarianceBlowup(f64),
    /// HPHᵀ + R was numerically singular.
    #[error("singular innovation covariance")]
    SingularInnovation,
    /// |δε| too large for the small-angle correction.
    #[error("error state too large for injection: |δε| = {0}")]
    LargeErrorState(f64),
    #[error("fix at t = {fix} does not align with nav at t = {nav}")]
    TimeMisalignment { fix: f64, nav: f64 },
}

/// The 12 diagonal variances of the continuous process noise: six sensor
/// channels plus six bias random-walk terms fixed at `epsilon_bias`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProcessNoiseDiag {
    /// Accelerometer channel variances ((m/s²)² scale).
    pub q_f: Vector3<f64>,
    /// Gyroscope channel variances ((rad/s)² scale).
    pub q_omega: Vector3<f64>,
    /// Bias random-walk variance, one value for all six bias states.
    pub epsilon_bias: f64,
}

impl ProcessNoiseDiag {
    pub fn new(q_f: Vector3<f64>, q_omega: Vector3<f64>, epsilon_bias: f64) -> Self {
        ProcessNoiseDiag {
            q_f,
            q_omega,
            epsilon_bias,
        }
    }

    /// Uniform accel variance `qf`, uniform gyro variance `qw`, default bias
    /// epsilon of 0.001.
    pub fn uniform(qf: f64, qw: f64) -> Self {
        ProcessNoiseDiag::new(Vector3::from_element(qf), Vector3::from_element(qw), 1e-3)
    }

    /// The 12 diagonal entries in channel order fx..fz, ωx..ωz, then biases.
    pub fn diagonal(&self) -> SVector<f64, 12> {
        let mut d = SVector::<f64, 12>::zeros();
        for i in 0..3 {
            d[i] = self.q_f[i];
            d[3 + i] = self.q_omega[i];
            d[6 + i] = self.epsilon_bias;
            d[9 + i] = self.epsilon_bias;
        }
        d
    }

    pub fn scaled(&self, s: f64) -> Self {
        ProcessNoiseDiag::new(self.q_f * s, self.q_omega * s, self.epsilon_bias * s)
    }

    pub fn is_valid(&self) -> bool {
        self.diagonal().iter().all(|&v| v > 0.0 && v.is_finite())
    }
}

/// GNSS position measurement model: H = [I₃ 0₃ₓ₁₂] with diagonal R in m².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModel {
    pub h: MeasurementMatrix,
    pub r: Matrix3<f64>,
}

impl MeasurementModel {
    pub fn gnss_position(r_diag: (f64, f64, f64)) -> Self {
        let mut h = MeasurementMatrix::zeros();
        h.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        MeasurementModel {
            h,
            r: Matrix3::from_diagonal(&Vector3::new(r_diag.0, r_diag.1, r_diag.2)),
        }
    }
}

/// Error estimate plus covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFilterState {
    pub dx: StateVector,
    pub p: Covariance,
    pub time: f64,
}

impl ErrorFilterState {
    pub fn new(p0: Covariance, time: f64) -> Self {
        ErrorFilterState {
            dx: StateVector::zeros(),
            p: p0,
            time,
        }
    }

    /// Broad default initial covariance:
    /// σ_p² = 1 m², σ_v² = 0.01 (m/s)², σ_ε² = 1e-6 rad²,
    /// σ_ba² = 1e-4, σ_bg² = 1e-6.
    pub fn default_initial(time: f64) -> Self {
        ErrorFilterState::new(default_initial_covariance(), time)
    }
}

/// The default initial covariance diagonal as a matrix.
pub fn default_initial_covariance() -> Covariance {
    let mut p = Covariance::zeros();
    for i in 0..3 {
        p[(i, i)] = 1.0;
        p[(3 + i, 3 + i)] = 0.01;
        p[(6 + i, 6 + i)] = 1e-6;
        p[(9 + i, 9 + i)] = 1e-4;
        p[(12 + i, 12 + i)] = 1e-6;
    }
    p
}

/// Numerical options for the covariance recursion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterOptions {
    /// Use the Joseph-form covariance update instead of (I − KH)P.
    pub joseph_update: bool,
    /// Predict fails with [`FilterError::CovarianceBlowup`] above this trace.
    pub trace_ceiling: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            joseph_update: false,
            trace_ceiling: 1e12,
        }
    }
}

pub(crate) fn symmetrize15(m: &Covariance) -> Covariance {
    (m + m.transpose()) * 0.5
}

/// Continuous error dynamics matrix F at the current navigation state.
///
/// Standard NED 15-state forms: curvature and transport couplings in the
/// position/velocity/misalignment blocks, −T_b^n in the velocity row's
/// accel-bias block, +T_b^n in the misalignment row's gyro-bias block, and
/// zero rows for the bias random walks.
pub fn build_f(
    em: &EarthModel,
    nav: &NavState,
    f_b: &Vector3<f64>,
) -> Result<SystemMatrix, FilterError> {
    let lat = nav.pos.lat;
    if (lat.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9 {
        return Err(GeodesyError::PoleSingularity(lat).into());
    }
    let (rm, rn) = em.principal_radii(lat);
    let km = 1.0 / (rm + nav.pos.alt);
    let kn = 1.0 / (rn + nav.pos.alt);
    let (s_lat, c_lat) = lat.sin_cos();
    let t_lat = s_lat / c_lat;
    let v = nav.vel;
    let t = nav.att.dcm;
    let rates = em.earth_rates(&nav.pos, &v)?;
    let omega = em.earth_rate;

    let mut f = SystemMatrix::zeros();

    // δṗ = F_pp δp + δv
    let f_pp = Matrix3::new(
        -v.z * km,
        0.0,
        -v.x * km,
        v.y * t_lat * km,
        -(v.z * kn + v.x * t_lat * km),
        -v.y * kn,
        0.0,
        0.0,
        0.0,
    );
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&f_pp);
    f.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());

    // partials of the frame rates w.r.t. latitude, altitude, and velocity
    let dwie_dlat = Vector3::new(-omega * s_lat, 0.0, -omega * c_lat);
    let dwen_dlat = Vector3::new(0.0, 0.0, -v.y * kn / (c_lat * c_lat));
    let dwen_dh = Vector3::new(-v.y * kn * kn, v.x * km * km, v.y * t_lat * kn * kn);
    let w_v = Matrix3::new(0.0, kn, 0.0, -km, 0.0, 0.0, 0.0, -t_lat * kn, 0.0);

    // δv̇ = F_vp δp + F_vv δv + [f^n×] δε − T b_a  (+ vertical gravity gradient)
    let vx = skew(&v);
    let mut f_vp = Matrix3::zeros();
    f_vp.set_column(0, &(vx * (2.0 * dwie_dlat + dwen_dlat) * km));
    f_vp.set_column(2, &(-(vx * dwen_dh)));
    f_vp[(2, 2)] += em.gravity_params.free_air;
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&f_vp);
    let f_vv = -skew(&(rates.omega_en + 2.0 * rates.omega_ie)) + vx * w_v;
    f.fixed_view_mut::<3, 3>(3, 3).copy_from(&f_vv);
    let f_n = t * f_b;
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&skew(&f_n));
    f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-t));

    // δε̇ = F_εp δp + F_εv δv − [ω_in×] δε + T b_g
    let mut f_ep = Matrix3::zeros();
    f_ep.set_column(0, &((dwie_dlat + dwen_dlat) * km));
    f_ep.set_column(2, &(-dwen_dh));
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&f_ep);
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&w_v);
    f.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(-skew(&rates.omega_in())));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&t);

    Ok(f)
}

/// Noise shaping matrix G: accel noise drives velocity through T_b^n, gyro
/// noise drives misalignment through −T_b^n, bias random walks drive the
/// bias states through identities.
pub fn build_g(nav: &NavState) -> ShapingMatrix {
    let t = nav.att.dcm;
    let mut g = ShapingMatrix::zeros();
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&t);
    g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-t));
    g.fixed_view_mut::<3, 3>(9, 6)
        .copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(12, 9)
        .copy_from(&Matrix3::identity());
    g
}

/// First-order discretization: Φ = I + F·dt, Qd = G·diag(Qc)·Gᵀ·dt
/// (symmetrized).
pub fn discretize(
    f: &SystemMatrix,
    g: &ShapingMatrix,
    qc: &ProcessNoiseDiag,
    dt: f64,
) -> (SystemMatrix, Covariance) {
    let phi = SystemMatrix::identity() + f * dt;
    let gq = g * SMatrix::<f64, 12, 12>::from_diagonal(&qc.diagonal());
    let qd = symmetrize15(&(gq * g.transpose() * dt));
    (phi, qd)
}

/// Time propagation: δx̂⁻ = 0, P⁻ = ΦPΦᵀ + Qd (symmetrized).
pub fn predict(
    state: &ErrorFilterState,
    phi: &SystemMatrix,
    qd: &Covariance,
    opts: &FilterOptions,
) -> Result<ErrorFilterState, FilterError> {
    let p = symmetrize15(&(phi * state.p * phi.transpose() + qd));
    let trace = p.trace();
    if !trace.is_finite() || trace > opts.trace_ceiling {
        return Err(FilterError::CovarianceBlowup(trace));
    }
    Ok(ErrorFilterState {
        dx: StateVector::zeros(),
        p,
        time: state.time,
    })
}

/// Measurement update. Returns the posterior state, the Kalman gain, and the
/// innovation (the residual itself, since the predicted error is zero).
pub fn update(
    state: &ErrorFilterState,
    meas: &MeasurementModel,
    residual: &Vector3<f64>,
    opts: &FilterOptions,
) -> Result<(ErrorFilterState, GainMatrix, Vector3<f64>), FilterError> {
    let ph_t = state.p * meas.h.transpose();
    let s = meas.h * ph_t + meas.r;
    let s_inv = s.try_inverse().ok_or(FilterError::SingularInnovation)?;
    if !s_inv.iter().all(|v| v.is_finite()) {
        return Err(FilterError::SingularInnovation);
    }
    let k = ph_t * s_inv;
    let dx = k * residual;
    let i_kh = SystemMatrix::identity() - k * meas.h;
    let p = if opts.joseph_update {
        symmetrize15(&(i_kh * state.p * i_kh.transpose() + k * meas.r * k.transpose()))
    } else {
        symmetrize15(&(i_kh * state.p))
    };
    Ok((
        ErrorFilterState {
            dx,
            p,
            time: state.time,
        },
        k,
        *residual,
    ))
}

/// Result of folding the estimated error back into the navigation solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub nav: NavState,
    pub filter: ErrorFilterState,
    /// Accelerometer bias increment to accumulate into the persistent
    /// estimate subtracted from subsequent IMU samples.
    pub accel_bias: Vector3<f64>,
    /// Gyro bias increment, same contract.
    pub gyro_bias: Vector3<f64>,
}

/// Closed-loop correction: fold δx̂ into the navigation state, hand the bias
/// estimates to the caller, and zero the error estimate. P is left unchanged.
pub fn inject_and_reset(
    em: &EarthModel,
    nav: &NavState,
    state: &ErrorFilterState,
) -> Result<Correction, FilterError> {
    let dp = Vector3::new(state.dx[0], state.dx[1], state.dx[2]);
    let dv = Vector3::new(state.dx[3], state.dx[4], state.dx[5]);
    let de = Vector3::new(state.dx[6], state.dx[7], state.dx[8]);
    if de.norm() >= 0.1 {
        return Err(FilterError::LargeErrorState(de.norm()));
    }
    let (rm, rn) = em.principal_radii(nav.pos.lat);
    // δp estimates (true − estimated): move the estimate toward the truth.
    let pos = GeoPosition::new(
        nav.pos.lat + dp.x / (rm + nav.pos.alt),
        nav.pos.lon + dp.y / ((rn + nav.pos.alt) * nav.pos.lat.cos()),
        nav.pos.alt - dp.z,
    );
    let vel = nav.vel + dv;
    let att =
        Attitude::from_dcm((Matrix3::identity() - skew(&de)) * nav.att.dcm).orthonormalized();
    Ok(Correction {
        nav: NavState::new(pos, vel, att, nav.time),
        filter: ErrorFilterState {
            dx: StateVector::zeros(),
            p: state.p,
            time: state.time,
        },
        accel_bias: Vector3::new(state.dx[9], state.dx[10], state.dx[11]),
        gyro_bias: Vector3::new(state.dx[12], state.dx[13], state.dx[14]),
    })
}

/// Measurement residual (fix − nav) expressed in local NED meters at the
/// navigation estimate.
pub fn gnss_residual(
    em: &EarthModel,
    nav: &NavState,
    fix: &GnssFix,
    time_tol: f64,
) -> Result<Vector3<f64>, FilterError> {
    if (fix.time - nav.time).abs() > time_tol {
        return Err(FilterError::TimeMisalignment {
            fix: fix.time,
            nav: nav.time,
        });
    }
    let (rm, rn) = em.principal_radii(nav.pos.lat);
    Ok(Vector3::new(
        (fix.pos.lat - nav.pos.lat) * (rm + nav.pos.alt),
        (fix.pos.lon - nav.pos.lon) * (rn + nav.pos.alt) * nav.pos.lat.cos(),
        -(fix.pos.alt - nav.pos.alt),
    ))
}

/// Navigation error [δp, δv, δε] of an estimate against the truth, in the
/// filter's error conventions. Used for consistency evaluation.
pub fn nav_error_state(em: &EarthModel, est: &NavState, truth: &NavState) -> SVector<f64, 9> {
    let (rm, rn) = em.principal_radii(est.pos.lat);
    let mut e = SVector::<f64, 9>::zeros();
    e[0] = (truth.pos.lat - est.pos.lat) * (rm + est.pos.alt);
    e[1] = (truth.pos.lon - est.pos.lon) * (rn + est.pos.alt) * est.pos.lat.cos();
    e[2] = -(truth.pos.alt - est.pos.alt);
    for i in 0..3 {
        e[3 + i] = truth.vel[i] - est.vel[i];
    }
    // T̂·T_trueᵀ ≈ I + [δε×]
    let a = est.att.dcm * truth.att.dcm.transpose();
    e[6] = 0.5 * (a[(2, 1)] - a[(1, 2)]);
    e[7] = 0.5 * (a[(0, 2)] - a[(2, 0)]);
    e[8] = 0.5 * (a[(1, 0)] - a[(0, 1)]);
    e
}
