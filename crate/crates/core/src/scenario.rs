//! Trajectory simulation and dataset generation.
//!
//! A [`MotionProfile`] prescribes vehicle Euler-angle rates and navigation-
//! frame accelerations as closed-form functions of time. The generator
//! synthesizes the ideal IMU readings a perfect sensor would report along
//! that motion (inverse IMU), steps the truth state with the same integrator
//! the mechanization uses, corrupts channels with calibrated white noise,
//! slices them into labeled windows, and simulates GNSS position fixes.

use crate::geodesy::{dcm_to_euler, skew, EarthModel, GeoPosition, GeodesyError};
use crate::mechanization::{integrate_step, ImuSample, MechanizationError, NavState};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Mechanization(#[from] MechanizationError),
    /// Pitch too close to ±π/2 for the Euler-rate transform.
    #[error("pitch {0} rad is too close to ±π/2 for gyro synthesis")]
    NearGimbalLock(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// Window request on a stream shorter than one window.
    #[error("stream shorter than one window")]
    EmptyStream,
    /// A stratification cell cannot appear in both partitions.
    #[error("cell {0} has too few examples to split")]
    InsufficientExamples(String),
    #[error("GNSS step {dtau} is not a multiple of the stream period {dt}")]
    BadGnssCadence { dtau: f64, dt: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One of the six IMU channels, in the canonical fx..ωz order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImuChannel {
    Fx,
    Fy,
    Fz,
    Wx,
    Wy,
    Wz,
}

impl ImuChannel {
    pub const ALL: [ImuChannel; 6] = [
        ImuChannel::Fx,
        ImuChannel::Fy,
        ImuChannel::Fz,
        ImuChannel::Wx,
        ImuChannel::Wy,
        ImuChannel::Wz,
    ];

    /// Diagonal slot (0..6) in the continuous process-noise matrix.
    pub fn index(self) -> usize {
        match self {
            ImuChannel::Fx => 0,
            ImuChannel::Fy => 1,
            ImuChannel::Fz => 2,
            ImuChannel::Wx => 3,
            ImuChannel::Wy => 4,
            ImuChannel::Wz => 5,
        }
    }

    pub fn extract(self, s: &ImuSample) -> f64 {
        match self {
            ImuChannel::Fx => s.accel.x,
            ImuChannel::Fy => s.accel.y,
            ImuChannel::Fz => s.accel.z,
            ImuChannel::Wx => s.gyro.x,
            ImuChannel::Wy => s.gyro.y,
            ImuChannel::Wz => s.gyro.z,
        }
    }

    pub fn parse(s: &str) -> Option<ImuChannel> {
        match s {
            "fx" => Some(ImuChannel::Fx),
            "fy" => Some(ImuChannel::Fy),
            "fz" => Some(ImuChannel::Fz),
            "wx" => Some(ImuChannel::Wx),
            "wy" => Some(ImuChannel::Wy),
            "wz" => Some(ImuChannel::Wz),
            _ => None,
        }
    }
}

impl fmt::Display for ImuChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ImuChannel::Fx => "fx",
            ImuChannel::Fy => "fy",
            ImuChannel::Fz => "fz",
            ImuChannel::Wx => "wx",
            ImuChannel::Wy => "wy",
            ImuChannel::Wz => "wz",
        };
        f.write_str(s)
    }
}

/// N consecutive samples of one IMU channel with the injected noise variance
/// as the regression label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub samples: Vec<f64>,
    pub label: f64,
    pub channel: ImuChannel,
}

/// A GNSS position fix with the per-axis noise variance that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssFix {
    pub time: f64,
    pub pos: GeoPosition,
    /// (north m², east m², down m²) in local NED.
    pub noise_var: (f64, f64, f64),
}

/// Closed-form motion command: Euler-angle rates and NED acceleration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProfileShape {
    /// Constant-velocity straight leg.
    Straight,
    /// Straight leg with a sinusoidal along-track acceleration.
    AccelDecel { amplitude: f64, period: f64 },
    /// Constant-rate circle at constant speed.
    Loiter { yaw_rate: f64 },
    /// Sinusoidal yaw rate sweeping a figure-eight, with a gentle roll sway.
    FigureEight { yaw_amp: f64, period: f64 },
    /// Loiter plus constant climb and a pitch sway.
    ClimbingSpiral { yaw_rate: f64, climb: f64 },
    /// Yaw weave with an altitude oscillation and a roll sway.
    STurnWeave { yaw_amp: f64, period: f64 },
}

/// Ground-truth motion description: shape, speed, duration, and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub name: String,
    pub shape: ProfileShape,
    /// Nominal horizontal speed (m/s).
    pub speed: f64,
    /// Seconds of motion.
    pub duration: f64,
    /// IMU rate (Hz).
    pub rate: f64,
    pub lat0: f64,
    pub lon0: f64,
    pub alt0: f64,
}

impl MotionProfile {
    /// Commanded (roll, pitch, yaw) rates at time `t`.
    pub fn euler_rates(&self, t: f64) -> Vector3<f64> {
        use std::f64::consts::TAU;
        match &self.shape {
            ProfileShape::Straight => Vector3::zeros(),
            ProfileShape::AccelDecel { .. } => Vector3::zeros(),
            ProfileShape::Loiter { yaw_rate } => Vector3::new(0.0, 0.0, *yaw_rate),
            ProfileShape::FigureEight { yaw_amp, period } => Vector3::new(
                0.015 * (TAU * t / 50.0).cos(),
                0.0,
                yaw_amp * (TAU * t / period).cos(),
            ),
            ProfileShape::ClimbingSpiral { yaw_rate, .. } => {
                Vector3::new(0.0, 0.008 * (TAU * t / 80.0).cos(), *yaw_rate)
            }
            ProfileShape::STurnWeave { yaw_amp, period } => Vector3::new(
                0.02 * (TAU * t / 30.0).cos(),
                0.0,
                yaw_amp * (TAU * t / period).sin(),
            ),
        }
    }

    /// Commanded NED acceleration at time `t`.
    pub fn accel_n(&self, t: f64) -> Vector3<f64> {
        use std::f64::consts::TAU;
        match &self.shape {
            ProfileShape::Straight => Vector3::zeros(),
            ProfileShape::AccelDecel { amplitude, period } => {
                Vector3::new(amplitude * (TAU * t / period).sin(), 0.0, 0.0)
            }
            ProfileShape::Loiter { yaw_rate } => {
                let psi = yaw_rate * t;
                self.speed * yaw_rate * Vector3::new(-psi.sin(), psi.cos(), 0.0)
            }
            ProfileShape::FigureEight { yaw_amp, period } => {
                let w = TAU / period;
                let psi = yaw_amp / w * (w * t).sin();
                let psi_dot = yaw_amp * (w * t).cos();
                self.speed * psi_dot * Vector3::new(-psi.sin(), psi.cos(), 0.0)
            }
            ProfileShape::ClimbingSpiral { yaw_rate, .. } => {
                let psi = yaw_rate * t;
                self.speed * yaw_rate * Vector3::new(-psi.sin(), psi.cos(), 0.0)
            }
            ProfileShape::STurnWeave { yaw_amp, period } => {
                let w = TAU / period;
                let psi = -yaw_amp / w * ((w * t).cos() - 1.0);
                let psi_dot = yaw_amp * (w * t).sin();
                let horiz = self.speed * psi_dot * Vector3::new(-psi.sin(), psi.cos(), 0.0);
                horiz + Vector3::new(0.0, 0.0, 0.3 * (TAU * t / 40.0).sin())
            }
        }
    }

    /// State at t = 0 consistent with the closed forms.
    pub fn initial_state(&self) -> NavState {
        let vel = match &self.shape {
            ProfileShape::ClimbingSpiral { climb, .. } => {
                Vector3::new(self.speed, 0.0, -*climb)
            }
            _ => Vector3::new(self.speed, 0.0, 0.0),
        };
        NavState::new(
            GeoPosition::new(self.lat0, self.lon0, self.alt0),
            vel,
            crate::geodesy::Attitude::identity(),
            0.0,
        )
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }
}

/// Generation parameters for the baseline set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub duration: f64,
    pub rate: f64,
    pub lat0: f64,
    pub lon0: f64,
    pub alt0: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            duration: 400.0,
            rate: 100.0,
            lat0: 32.1_f64.to_radians(),
            lon0: 34.8_f64.to_radians(),
            alt0: 100.0,
        }
    }
}

impl BaselineConfig {
    fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration <= 0.0 || self.rate <= 0.0 {
            return Err(ScenarioError::InvalidConfig(
                "duration and rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The six baseline motion profiles, chosen for dynamic diversity.
pub fn baseline_profiles(cfg: &BaselineConfig) -> Vec<MotionProfile> {
    let base = |name: &str, shape, speed| MotionProfile {
        name: name.to_string(),
        shape,
        speed,
        duration: cfg.duration,
        rate: cfg.rate,
        lat0: cfg.lat0,
        lon0: cfg.lon0,
        alt0: cfg.alt0,
    };
    vec![
        base("straight-line", ProfileShape::Straight, 30.0),
        base(
            "accel-decel",
            ProfileShape::AccelDecel {
                amplitude: 1.0,
                period: 100.0,
            },
            25.0,
        ),
        base(
            "circular-loiter",
            ProfileShape::Loiter {
                yaw_rate: std::f64::consts::TAU / 200.0,
            },
            25.0,
        ),
        base(
            "figure-eight",
            ProfileShape::FigureEight {
                yaw_amp: 0.05,
                period: 200.0,
            },
            22.0,
        ),
        base(
            "climbing-spiral",
            ProfileShape::ClimbingSpiral {
                yaw_rate: std::f64::consts::TAU / 160.0,
                climb: 2.0,
            },
            20.0,
        ),
        base(
            "s-turn-weave",
            ProfileShape::STurnWeave {
                yaw_amp: 0.08,
                period: 60.0,
            },
            28.0,
        ),
    ]
}

/// Gyro reading that realizes commanded Euler-angle rates at `state`:
/// ω_ib^b = T_n^b(ω_en^n + ω_ie^n) + M(φ,θ)·𝒫.
pub fn synth_gyro(
    em: &EarthModel,
    state: &NavState,
    euler_rates: &Vector3<f64>,
) -> Result<Vector3<f64>, ScenarioError> {
    let euler = dcm_to_euler(&state.att.dcm).map_err(|_| {
        ScenarioError::NearGimbalLock(std::f64::consts::FRAC_PI_2)
    })?;
    if euler.pitch.abs() >= std::f64::consts::FRAC_PI_2 - 1e-6 {
        return Err(ScenarioError::NearGimbalLock(euler.pitch));
    }
    let rates = em.earth_rates(&state.pos, &state.vel)?;
    let (sr, cr) = euler.roll.sin_cos();
    let (sp, cp) = euler.pitch.sin_cos();
    let m = Matrix3::new(1.0, 0.0, -sp, 0.0, cr, sr * cp, 0.0, -sr, cr * cp);
    Ok(state.att.dcm.transpose() * rates.omega_in() + m * euler_rates)
}

/// Accelerometer reading that realizes a commanded NED acceleration:
/// f^b = T_n^b[a − g^n + ([ω_en×] + 2[ω_ie×])v^n].
pub fn synth_accel(
    em: &EarthModel,
    state: &NavState,
    accel_n: &Vector3<f64>,
) -> Result<Vector3<f64>, ScenarioError> {
    let rates = em.earth_rates(&state.pos, &state.vel)?;
    let g = em.gravity_n(&state.pos);
    let bracket = (skew(&rates.omega_en) + 2.0 * skew(&rates.omega_ie)) * state.vel;
    Ok(state.att.dcm.transpose() * (accel_n - g + bracket))
}

/// A ground-truth trajectory with its ideal IMU stream.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub profile: MotionProfile,
    /// samples()+1 states; `truth[k]` is the state at t = k/rate.
    pub truth: Vec<NavState>,
    /// samples() ideal readings; `imu[k]` drives the step k → k+1.
    pub imu: Vec<ImuSample>,
}

/// Step a profile into its discrete truth trajectory and ideal IMU stream.
pub fn generate_truth(em: &EarthModel, profile: &MotionProfile) -> Result<Baseline, ScenarioError> {
    let n = profile.samples();
    let dt = 1.0 / profile.rate;
    let mut truth = Vec::with_capacity(n + 1);
    let mut imu = Vec::with_capacity(n);
    let mut state = profile.initial_state();
    truth.push(state);
    for k in 0..n {
        let t = k as f64 * dt;
        let gyro = synth_gyro(em, &state, &profile.euler_rates(t))?;
        let accel = synth_accel(em, &state, &profile.accel_n(t))?;
        let sample = ImuSample::new(t, accel, gyro);
        state = integrate_step(em, &state, &sample, dt)?;
        imu.push(sample);
        truth.push(state);
    }
    Ok(Baseline {
        profile: profile.clone(),
        truth,
        imu,
    })
}

/// All six baselines for a config.
pub fn gen_baselines(em: &EarthModel, cfg: &BaselineConfig) -> Result<Vec<Baseline>, ScenarioError> {
    cfg.validate()?;
    baseline_profiles(cfg)
        .iter()
        .map(|p| generate_truth(em, p))
        .collect()
}

/// Add i.i.d. zero-mean Gaussian noise with variance `q` to every channel.
/// `q = 0` is accepted for tests and returns the input unchanged.
pub fn corrupt(stream: &[ImuSample], q: f64, seed: u64) -> Vec<ImuSample> {
    let sigma = q.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stream
        .iter()
        .map(|s| {
            let n: [f64; 6] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            ImuSample::new(
                s.time,
                s.accel + sigma * Vector3::new(n[0], n[1], n[2]),
                s.gyro + sigma * Vector3::new(n[3], n[4], n[5]),
            )
        })
        .collect()
}

/// The 15-level noise grid: evenly spaced variances on [0.001, 0.025].
pub fn q_grid() -> Vec<f64> {
    let (lo, hi, n) = (0.001, 0.025, 15);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// One channel of an IMU stream as a plain series.
pub fn channel_series(stream: &[ImuSample], ch: ImuChannel) -> Vec<f64> {
    stream.iter().map(|s| ch.extract(s)).collect()
}

/// Slice a channel series into non-overlapping windows of length `n`,
/// each labeled with the injected variance.
pub fn window(
    series: &[f64],
    n: usize,
    label: f64,
    channel: ImuChannel,
) -> Result<Vec<LabeledWindow>, ScenarioError> {
    if n == 0 || series.len() < n {
        return Err(ScenarioError::EmptyStream);
    }
    Ok(series
        .chunks_exact(n)
        .map(|c| LabeledWindow {
            samples: c.to_vec(),
            label,
            channel,
        })
        .collect())
}

/// A labeled window plus the stratification keys it came from.
#[derive(Debug, Clone)]
pub struct WindowRecord {
    pub baseline: String,
    pub q_index: usize,
    pub window: LabeledWindow,
}

/// The assembled training corpus.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<WindowRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Options for [`build_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Window length N.
    pub window_len: usize,
    /// Cap on windows kept per (baseline × q × channel) cell; `None` keeps all.
    pub max_windows_per_cell: Option<usize>,
    pub seed: u64,
    /// Noise grid; defaults to [`q_grid`].
    pub grid: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            window_len: 200,
            max_windows_per_cell: None,
            seed: 7,
            grid: q_grid(),
        }
    }
}

/// Corrupt every baseline at every grid level and window all six channels.
pub fn build_dataset(
    baselines: &[Baseline],
    cfg: &DatasetConfig,
) -> Result<Dataset, ScenarioError> {
    let mut records = Vec::new();
    for (bi, b) in baselines.iter().enumerate() {
        for (qi, &q) in cfg.grid.iter().enumerate() {
            let seed = derive_seed(cfg.seed, bi as u64, qi as u64);
            let noisy = corrupt(&b.imu, q, seed);
            for ch in ImuChannel::ALL {
                let series = channel_series(&noisy, ch);
                let mut wins = window(&series, cfg.window_len, q, ch)?;
                if let Some(cap) = cfg.max_windows_per_cell {
                    wins.truncate(cap);
                }
                records.extend(wins.into_iter().map(|w| WindowRecord {
                    baseline: b.profile.name.clone(),
                    q_index: qi,
                    window: w,
                }));
            }
        }
    }
    Ok(Dataset { records })
}

/// Deterministic per-cell RNG seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0x85EB_CA6B) ^ (b << 17))
        .wrapping_add(b)
}

/// Random split stratified per (baseline × q) cell so every cell appears in
/// both partitions. Reproducible from `seed`.
pub fn split(
    dataset: &Dataset,
    ratio: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), ScenarioError> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(ScenarioError::InvalidConfig(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        cells
            .entry((r.baseline.clone(), r.q_index))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Dataset::default();
    let mut test = Dataset::default();
    for ((name, qi), mut ids) in cells {
        if ids.len() < 2 {
            return Err(ScenarioError::InsufficientExamples(format!(
                "{name} q[{qi}]"
            )));
        }
        // Fisher-Yates on the cell's indices
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        let n_train = ((ids.len() as f64 * ratio).round() as usize).clamp(1, ids.len() - 1);
        for (k, &id) in ids.iter().enumerate() {
            let rec = dataset.records[id].clone();
            if k < n_train {
                train.records.push(rec);
            } else {
                test.records.push(rec);
            }
        }
    }
    Ok((train, test))
}

/// Position fixes every `dtau` seconds: truth perturbed by zero-mean Gaussian
/// noise with per-axis variance `r_diag`, applied in local NED meters and
/// mapped to geodetic increments through the principal radii.
pub fn simulate_gnss(
    em: &EarthModel,
    truth: &[NavState],
    dtau: f64,
    r_diag: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<GnssFix>, ScenarioError> {
    if truth.len() < 2 {
        return Err(ScenarioError::EmptyStream);
    }
    let dt = truth[1].time - truth[0].time;
    let ratio = dtau / dt;
    let step = ratio.round() as usize;
    if step == 0 || (ratio - step as f64).abs() > 1e-6 {
        return Err(ScenarioError::BadGnssCadence { dtau, dt });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixes = Vec::new();
    let mut k = step;
    while k < truth.len() {
        let s = &truth[k];
        let (rm, rn) = em.principal_radii(s.pos.lat);
        let n = r_diag.0.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let e = r_diag.1.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let d = r_diag.2.sqrt() * rng.sample::<f64, _>(StandardNormal);
        fixes.push(GnssFix {
            time: s.time,
            pos: GeoPosition::new(
                s.pos.lat + n / (rm + s.pos.alt),
                s.pos.lon + e / ((rn + s.pos.alt) * s.pos.lat.cos()),
                s.pos.alt - d,
            ),
            noise_var: r_diag,
        });
        k += step;
    }
    Ok(fixes)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Per-row sidecar for the dataset CSV, aligned by row order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub baseline: String,
    pub q_index: usize,
    pub channel: String,
    /// "train" | "test" | "all"
    pub split: String,
}

/// Everything needed to reproduce a dataset build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_seed: Option<u64>,
    pub split_ratio: Option<f64>,
    pub window_len: usize,
    pub grid: Vec<f64>,
    /// Input preprocessing contract shared by training and online inference.
    pub input_standardization: String,
    pub rows: Vec<ManifestRow>,
}

/// Write windows as CSV (channel_id, label, then N sample columns).
pub fn save_dataset_csv(path: &Path, ds: &Dataset) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path)?;
    let n = ds.records.first().map_or(0, |r| r.window.samples.len());
    let mut header = vec!["channel_id".to_string(), "label".to_string()];
    header.extend((0..n).map(|i| format!("s{i}")));
    w.write_record(&header)?;
    for r in &ds.records {
        let mut row = vec![r.window.channel.to_string(), format!("{:.17e}", r.window.label)];
        row.extend(r.window.samples.iter().map(|v| format!("{v:.17e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<(), ScenarioError> {
    std::fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

/// Truth trajectory CSV with ISO-ordered columns
/// (time, lat, lon, alt, vN, vE, vD, roll, pitch, yaw).
pub fn save_trajectory_csv(path: &Path, truth: &[NavState]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "time", "lat", "lon", "alt", "vN", "vE", "vD", "roll", "pitch", "yaw",
    ])?;
    for s in truth {
        let e = dcm_to_euler(&s.att.dcm).unwrap_or(crate::geodesy::EulerAngles::zero());
        w.write_record(&[
            format!("{:.9}", s.time),
            format!("{:.15e}", s.pos.lat),
            format!("{:.15e}", s.pos.lon),
            format!("{:.9}", s.pos.alt),
            format!("{:.9}", s.vel.x),
            format!("{:.9}", s.vel.y),
            format!("{:.9}", s.vel.z),
            format!("{:.12}", e.roll),
            format!("{:.12}", e.pitch),
            format!("{:.12}", e.yaw),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// GNSS fixes as CSV (time, lat, lon, alt).
pub fn save_fixes_csv(path: &Path, fixes: &[GnssFix]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "lat", "lon", "alt"])?;
    for f in fixes {
        w.write_record(&[
            format!("{:.9}", f.time),
            format!("{:.15e}", f.pos.lat),
            format!("{:.15e}", f.pos.lon),
            format!("{:.9}", f.pos.alt),
        ])?;
    }
    w.flush()?;
    Ok(())
}
