//! Earth model, reference frames, and rotation utilities.
//!
//! Everything the mechanization and filter equations consume as geometry:
//! WGS-84 curvature radii, Somigliana normal gravity with a linear free-air
//! correction, earth-rate and transport-rate vectors, and conversions
//! between Euler angles (ZYX, yaw-pitch-roll) and the body-to-nav direction
//! cosine matrix.
//!
//! The navigation frame is NED: x north, y east, z down. All angles are in
//! radians, all lengths in meters.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = 6.69437999014e-3;
/// Earth rotation rate (rad/s).
pub const EARTH_RATE: f64 = 7.292115e-5;
/// Normal gravity at the equator (m/s²).
pub const GRAVITY_EQUATOR: f64 = 9.7803253359;
/// Somigliana constant k = (b·γ_p)/(a·γ_e) − 1.
pub const SOMIGLIANA_K: f64 = 1.931852646396904e-3;
/// Free-air gravity gradient (m/s² per meter of altitude).
pub const FREE_AIR_GRADIENT: f64 = 3.086e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeodesyError {
    /// Latitude within 1e-9 rad of ±π/2; tan(φ) terms are unusable.
    #[error("latitude {0} rad is too close to a pole")]
    PoleSingularity(f64),
    /// |cos θ| < 1e-9 during Euler extraction.
    #[error("gimbal lock: pitch too close to ±π/2")]
    GimbalLock,
}

/// Coefficients of the normal-gravity model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityParams {
    /// Gravity at the equator on the ellipsoid surface (m/s²).
    pub equator: f64,
    /// Somigliana latitude coefficient (dimensionless).
    pub somigliana_k: f64,
    /// Linear free-air altitude gradient (m/s² per m).
    pub free_air: f64,
}

/// Reference ellipsoid plus rotation rate and gravity coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthModel {
    pub semi_major_axis: f64,
    pub eccentricity_sq: f64,
    pub earth_rate: f64,
    pub gravity_params: GravityParams,
}

impl EarthModel {
    /// The WGS-84 ellipsoid with standard constants.
    pub fn wgs84() -> Self {
        EarthModel {
            semi_major_axis: WGS84_A,
            eccentricity_sq: WGS84_E2,
            earth_rate: EARTH_RATE,
            gravity_params: GravityParams {
                equator: GRAVITY_EQUATOR,
                somigliana_k: SOMIGLIANA_K,
                free_air: FREE_AIR_GRADIENT,
            },
        }
    }

    /// Non-rotating sphere of radius `a` with uniform gravity `g`.
    /// Degenerate model used by tests.
    pub fn sphere(a: f64, g: f64) -> Self {
        EarthModel {
            semi_major_axis: a,
            eccentricity_sq: 0.0,
            earth_rate: 0.0,
            gravity_params: GravityParams {
                equator: g,
                somigliana_k: 0.0,
                free_air: 0.0,
            },
        }
    }

    /// Meridian (north-south) and normal (east-west) curvature radii.
    ///
    /// R_M = a(1−e²)/(1−e²sin²φ)^{3/2},  R_N = a/√(1−e²sin²φ).
    pub fn principal_radii(&self, lat: f64) -> (f64, f64) {
        let s2 = lat.sin() * lat.sin();
        let den = 1.0 - self.eccentricity_sq * s2;
        let rn = self.semi_major_axis / den.sqrt();
        let rm = self.semi_major_axis * (1.0 - self.eccentricity_sq) / (den * den.sqrt());
        (rm, rn)
    }

    /// Magnitude of normal gravity at latitude `lat` and altitude `alt`.
    pub fn gravity(&self, lat: f64, alt: f64) -> f64 {
        let s2 = lat.sin() * lat.sin();
        let g0 = self.gravity_params.equator * (1.0 + self.gravity_params.somigliana_k * s2)
            / (1.0 - self.eccentricity_sq * s2).sqrt();
        g0 - self.gravity_params.free_air * alt
    }

    /// Gravity vector in NED: `[0, 0, g]` with g down-positive.
    pub fn gravity_n(&self, pos: &GeoPosition) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity(pos.lat, pos.alt))
    }

    /// Earth-rate and transport-rate vectors resolved in NED.
    ///
    /// ω_ie^n = Ω[cosφ, 0, −sinφ];
    /// ω_en^n = [v_E/(R_N+h), −v_N/(R_M+h), −v_E·tanφ/(R_N+h)].
    pub fn earth_rates(
        &self,
        pos: &GeoPosition,
        vel: &Vector3<f64>,
    ) -> Result<EarthRates, GeodesyError> {
        if (pos.lat.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9 {
            return Err(GeodesyError::PoleSingularity(pos.lat));
        }
        let (rm, rn) = self.principal_radii(pos.lat);
        let omega_ie = Vector3::new(
            self.earth_rate * pos.lat.cos(),
            0.0,
            -self.earth_rate * pos.lat.sin(),
        );
        let omega_en = Vector3::new(
            vel.y / (rn + pos.alt),
            -vel.x / (rm + pos.alt),
            -vel.y * pos.lat.tan() / (rn + pos.alt),
        );
        Ok(EarthRates { omega_ie, omega_en })
    }
}

/// Earth-rate / transport-rate pair at a given position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthRates {
    /// Rotation of ECEF w.r.t. inertial, resolved in NED (rad/s).
    pub omega_ie: Vector3<f64>,
    /// Rotation of NED w.r.t. ECEF caused by vehicle motion (rad/s).
    pub omega_en: Vector3<f64>,
}

impl EarthRates {
    /// ω_in^n = ω_ie^n + ω_en^n.
    pub fn omega_in(&self) -> Vector3<f64> {
        self.omega_ie + self.omega_en
    }
}

/// Geodetic position: latitude, longitude (rad), altitude (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPosition {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GeoPosition {
    /// New position with the longitude wrapped to (−π, π].
    pub fn new(lat: f64, lon: f64, alt: f64) -> Self {
        GeoPosition {
            lat,
            lon: wrap_longitude(lon),
            alt,
        }
    }
}

/// Wrap an angle to (−π, π]. Values already in range pass through exactly.
pub fn wrap_longitude(lon: f64) -> f64 {
    use std::f64::consts::PI;
    if -PI < lon && lon <= PI {
        return lon;
    }
    let mut l = (lon + PI).rem_euclid(2.0 * PI);
    if l == 0.0 {
        l = 2.0 * PI; // keep +π instead of −π
    }
    l - PI
}

/// Body-to-nav rotation held as a direction cosine matrix T_b^n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attitude {
    pub dcm: Matrix3<f64>,
}

/// Roll, pitch, yaw (rad) in the ZYX convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        EulerAngles { roll, pitch, yaw }
    }

    pub fn zero() -> Self {
        EulerAngles::new(0.0, 0.0, 0.0)
    }
}

impl Attitude {
    /// Wrap a matrix that is already a rotation.
    pub fn from_dcm(dcm: Matrix3<f64>) -> Self {
        Attitude { dcm }
    }

    pub fn identity() -> Self {
        Attitude {
            dcm: Matrix3::identity(),
        }
    }

    /// Euler angles extracted from the DCM; see [`dcm_to_euler`].
    pub fn euler(&self) -> Result<EulerAngles, GeodesyError> {
        dcm_to_euler(&self.dcm)
    }

    /// Frobenius distance of `dcm·dcmᵀ` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.dcm * self.dcm.transpose() - Matrix3::identity()).norm()
    }

    /// Project onto the nearest rotation with one symmetric correction step:
    /// T ← T(3I − TᵀT)/2. Adequate for per-step drift at 1e-9 scales.
    pub fn orthonormalized(&self) -> Attitude {
        let t = self.dcm;
        let corr = (Matrix3::identity() * 3.0 - t.transpose() * t) * 0.5;
        Attitude { dcm: t * corr }
    }
}

/// Skew-symmetric cross-product matrix: skew(v)·w = v × w.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Build T_b^n from ZYX Euler angles (yaw about z, then pitch, then roll).
pub fn euler_to_dcm(e: &EulerAngles) -> Attitude {
    let (sr, cr) = e.roll.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    let (sy, cy) = e.yaw.sin_cos();
    // T_b^n = Rz(yaw)·Ry(pitch)·Rx(roll)
    let dcm = Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    );
    Attitude { dcm }
}

/// Extract ZYX Euler angles from T_b^n.
///
/// Fails with [`GeodesyError::GimbalLock`] when |cos θ| < 1e-9, where roll
/// and yaw are no longer separable.
pub fn dcm_to_euler(dcm: &Matrix3<f64>) -> Result<EulerAngles, GeodesyError> {
    let sp = -dcm[(2, 0)];
    let cp = (dcm[(2, 1)] * dcm[(2, 1)] + dcm[(2, 2)] * dcm[(2, 2)]).sqrt();
    if cp < 1e-9 {
        return Err(GeodesyError::GimbalLock);
    }
    Ok(EulerAngles {
        roll: dcm[(2, 1)].atan2(dcm[(2, 2)]),
        pitch: sp.atan2(cp),
        yaw: dcm[(1, 0)].atan2(dcm[(0, 0)]),
    })
}
