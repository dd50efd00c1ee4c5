//! Process-noise policies and the online INS/GNSS fusion loop.
//!
//! Three interchangeable ways to choose the covariance that drives the
//! filter's prediction step:
//!
//! * **Constant** — a fixed continuous diagonal pushed through the
//!   first-order discretization every tick.
//! * **InnovationWindow** — the windowed innovation outer-product average
//!   C = (1/ξ)·Σ ννᵀ folded through the Kalman gain, Q̂ = K C Kᵀ, re-derived
//!   at each GNSS update and held between updates. Before ξ innovations
//!   exist the constant seed diagonal is used.
//! * **Learned** — the convolutional regressor refreshed every
//!   `tuning_rate` seconds from the most recent raw-IMU windows.
//!
//! The loop itself follows the hybrid online algorithm: every IMU tick
//! mechanize and predict; on the GNSS grid update, log the innovation, and
//! fold the error estimate back into the navigation state; on the tuning
//! grid (learned variant) regress the six channel variances and refresh
//! the continuous process noise.

use crate::eskf::{
    build_f, build_g, discretize, gnss_residual, inject_and_reset, predict, update, Covariance,
    ErrorFilterState, FilterError, FilterOptions, GainMatrix, MeasurementModel, ProcessNoiseDiag,
    ShapingMatrix, StateVector,
};
use crate::geodesy::EarthModel;
use crate::mechanization::{integrate_step, ImuSample, MechanizationError, NavState};
use crate::neuralq::{predict_qc, Clamp, NetError, NetworkParams};
use crate::scenario::GnssFix;
use nalgebra::{Matrix3, Vector3};
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Mechanization(#[from] MechanizationError),
    #[error(transparent)]
    Net(#[from] NetError),
    /// IMU cadence broke: a sample arrived off the expected grid.
    #[error("stream gap at sample {index}: expected t = {expected}, got {got}")]
    StreamGap {
        index: usize,
        expected: f64,
        got: f64,
    },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("innovation window not full")]
    WindowNotFull,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Ring buffer of the most recent innovation vectors.
#[derive(Debug, Clone)]
pub struct InnovationWindowState {
    buf: VecDeque<Vector3<f64>>,
    xi: usize,
}

impl InnovationWindowState {
    pub fn new(xi: usize) -> Self {
        InnovationWindowState {
            buf: VecDeque::with_capacity(xi),
            xi,
        }
    }

    pub fn push(&mut self, nu: Vector3<f64>) {
        if self.buf.len() == self.xi {
            self.buf.pop_front();
        }
        self.buf.push_back(nu);
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.xi
    }

    /// C = (1/ξ)·Σ ννᵀ over the window; symmetric PSD by construction.
    pub fn innovation_matrix(&self) -> Result<Matrix3<f64>, RunError> {
        if !self.is_full() {
            return Err(RunError::WindowNotFull);
        }
        let mut c = Matrix3::zeros();
        for nu in &self.buf {
            c += nu * nu.transpose();
        }
        Ok(c / self.xi as f64)
    }
}

/// Q̂ = K·C·Kᵀ, symmetrized: the innovation-based replacement for the
/// discretized process noise.
pub fn adapt_q(k: &GainMatrix, c: &Matrix3<f64>) -> Covariance {
    let q = k * c * k.transpose();
    (q + q.transpose()) * 0.5
}

/// Process-noise selection policy.
#[derive(Clone)]
pub enum QPolicy {
    /// Fixed continuous diagonal.
    Constant(ProcessNoiseDiag),
    /// Innovation-window adaptation with window size ξ.
    InnovationWindow { xi: usize },
    /// Convolutional regressor over raw IMU windows.
    Learned {
        model: Arc<NetworkParams>,
        /// Seconds between regressor refreshes; a multiple of the IMU period.
        tuning_rate: f64,
        clamp: Clamp,
    },
}

impl std::fmt::Debug for QPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QPolicy::Constant(d) => write!(f, "Constant({d:?})"),
            QPolicy::InnovationWindow { xi } => write!(f, "InnovationWindow(xi={xi})"),
            QPolicy::Learned {
                tuning_rate, clamp, ..
            } => write!(f, "Learned(tuning_rate={tuning_rate}, clamp={clamp:?})"),
        }
    }
}

/// Everything [`next_qd`] may need, snapshotted from the loop state.
pub struct QContext<'a> {
    pub g: &'a ShapingMatrix,
    pub dt: f64,
    /// Multiplier applied to the continuous diagonal before discretization.
    /// 1.0 uses the q values as printed; `dt` reinterprets per-sample
    /// variances as power spectral densities.
    pub qc_scale: f64,
    /// Cold-start / constant-fallback diagonal.
    pub seed_qc: &'a ProcessNoiseDiag,
    /// Held innovation-based Q̂ (already a discrete 15×15), if available.
    pub adaptive_qd: Option<&'a Covariance>,
    /// Most recent regressed diagonal, if any.
    pub learned_qc: Option<&'a ProcessNoiseDiag>,
}

/// The next prediction's discrete process noise under `policy`. Pure with
/// respect to the context snapshot.
pub fn next_qd(policy: &QPolicy, ctx: &QContext) -> Covariance {
    let from_diag = |d: &ProcessNoiseDiag| {
        let (_, qd) = discretize(
            &crate::eskf::SystemMatrix::zeros(),
            ctx.g,
            &d.scaled(ctx.qc_scale),
            ctx.dt,
        );
        qd
    };
    match policy {
        QPolicy::Constant(d) => from_diag(d),
        QPolicy::InnovationWindow { .. } => match ctx.adaptive_qd {
            Some(qd) => *qd,
            None => from_diag(ctx.seed_qc),
        },
        QPolicy::Learned { .. } => from_diag(ctx.learned_qc.unwrap_or(ctx.seed_qc)),
    }
}

/// Loop configuration shared by every policy.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// IMU period Δt (s).
    pub dt: f64,
    /// GNSS period Δτ (s); a multiple of Δt.
    pub dtau: f64,
    pub initial_nav: NavState,
    pub initial_p: Covariance,
    /// Constant seed diagonal: cold start for the adaptive variant and
    /// fallback for the learned variant before its first regression.
    pub seed_qc: ProcessNoiseDiag,
    /// See [`QContext::qc_scale`].
    pub qc_scale: f64,
    /// GNSS measurement noise variances (m²).
    pub r_diag: (f64, f64, f64),
    pub options: FilterOptions,
    /// Optional γ·I floor added to the innovation-based Q̂ for conditioning.
    pub adaptive_floor: Option<f64>,
    /// Window length N for the learned variant.
    pub window_len: usize,
    /// Record per-update snapshots for consistency evaluation.
    pub capture_updates: bool,
}

impl FusionConfig {
    pub fn new(initial_nav: NavState, dt: f64, dtau: f64) -> Self {
        FusionConfig {
            dt,
            dtau,
            initial_nav,
            initial_p: crate::eskf::default_initial_covariance(),
            seed_qc: ProcessNoiseDiag::uniform(0.002, 0.02),
            qc_scale: 1.0,
            r_diag: (0.01, 0.01, 0.02),
            options: FilterOptions::default(),
            adaptive_floor: None,
            window_len: 200,
            capture_updates: false,
        }
    }
}

/// Filter state captured at a GNSS update, before the closed-loop reset.
#[derive(Debug, Clone)]
pub struct UpdateSnapshot {
    pub time: f64,
    /// Posterior error estimate.
    pub dx: StateVector,
    /// Posterior covariance.
    pub p: Covariance,
    /// Navigation state before injection.
    pub nav_pre_inject: NavState,
    /// Accumulated bias estimates before this update's increment.
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

/// Everything a fusion run produces.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Estimated navigation state after every IMU tick.
    pub estimates: Vec<NavState>,
    /// trace(P) after every tick.
    pub p_trace: Vec<f64>,
    /// (time, innovation) at every GNSS update.
    pub innovations: Vec<(f64, Vector3<f64>)>,
    /// (time, six regressed variances) at every tuning event.
    pub q_history: Vec<(f64, [f64; 6])>,
    /// Per-update snapshots when requested.
    pub updates: Vec<UpdateSnapshot>,
}

fn validate(policy: &QPolicy, cfg: &FusionConfig) -> Result<(usize, usize), RunError> {
    if cfg.dt <= 0.0 {
        return Err(RunError::InvalidConfig("dt must be positive".into()));
    }
    let ratio = cfg.dtau / cfg.dt;
    let gnss_every = ratio.round() as usize;
    if gnss_every == 0 || (ratio - gnss_every as f64).abs() > 1e-6 {
        return Err(RunError::InvalidConfig(format!(
            "dtau {} is not a multiple of dt {}",
            cfg.dtau, cfg.dt
        )));
    }
    if !cfg.seed_qc.is_valid() {
        return Err(RunError::InvalidConfig(
            "seed process-noise diagonal must be positive".into(),
        ));
    }
    let tuning_every = match policy {
        QPolicy::Constant(d) => {
            if !d.is_valid() {
                return Err(RunError::InvalidConfig(
                    "constant diagonal must be positive".into(),
                ));
            }
            0
        }
        QPolicy::InnovationWindow { xi } => {
            if *xi < 1 {
                return Err(RunError::InvalidConfig("window size ξ must be ≥ 1".into()));
            }
            0
        }
        QPolicy::Learned {
            model,
            tuning_rate,
            clamp,
        } => {
            if clamp.min <= 0.0 || clamp.max < clamp.min {
                return Err(RunError::InvalidConfig(
                    "clamp bounds must satisfy 0 < min ≤ max".into(),
                ));
            }
            model.require_input_len(cfg.window_len)?;
            let tr = tuning_rate / cfg.dt;
            let every = tr.round() as usize;
            if every == 0 || (tr - every as f64).abs() > 1e-6 {
                return Err(RunError::InvalidConfig(format!(
                    "tuning rate {tuning_rate} is not a multiple of dt {}",
                    cfg.dt
                )));
            }
            every
        }
    };
    Ok((gnss_every, tuning_every))
}

/// Run the full fusion loop over time-aligned IMU and GNSS streams.
pub fn run_filter(
    em: &EarthModel,
    imu: &[ImuSample],
    gnss: &[GnssFix],
    policy: &QPolicy,
    cfg: &FusionConfig,
) -> Result<RunOutput, RunError> {
    let (gnss_every, tuning_every) = validate(policy, cfg)?;
    let t0 = cfg.initial_nav.time;
    let meas = MeasurementModel::gnss_position(cfg.r_diag);

    let mut nav = cfg.initial_nav;
    let mut filt = ErrorFilterState::new(cfg.initial_p, t0);
    let mut b_a = Vector3::zeros();
    let mut b_g = Vector3::zeros();
    let mut window = InnovationWindowState::new(match policy {
        QPolicy::InnovationWindow { xi } => *xi,
        _ => 1,
    });
    let mut adaptive_qd: Option<Covariance> = None;
    let mut learned_qc: Option<ProcessNoiseDiag> = None;
    let mut raw_hist: [VecDeque<f64>; 6] =
        std::array::from_fn(|_| VecDeque::with_capacity(cfg.window_len));

    let mut gnss_iter = gnss.iter();
    let mut out = RunOutput {
        estimates: Vec::with_capacity(imu.len()),
        p_trace: Vec::with_capacity(imu.len()),
        ..Default::default()
    };

    for (k, sample) in imu.iter().enumerate() {
        let expected = t0 + k as f64 * cfg.dt;
        if (sample.time - expected).abs() > cfg.dt / 2.0 {
            return Err(RunError::StreamGap {
                index: k,
                expected,
                got: sample.time,
            });
        }

        // closed loop: subtract the accumulated bias estimates
        let compensated = ImuSample::new(sample.time, sample.accel - b_a, sample.gyro - b_g);
        nav = integrate_step(em, &nav, &compensated, cfg.dt)?;
        filt.time = nav.time;

        let f = build_f(em, &nav, &compensated.accel)?;
        let g = build_g(&nav);
        let phi = crate::eskf::SystemMatrix::identity() + f * cfg.dt;
        let qd = next_qd(
            policy,
            &QContext {
                g: &g,
                dt: cfg.dt,
                qc_scale: cfg.qc_scale,
                seed_qc: &cfg.seed_qc,
                adaptive_qd: adaptive_qd.as_ref(),
                learned_qc: learned_qc.as_ref(),
            },
        );
        filt = predict(&filt, &phi, &qd, &cfg.options)?;

        // raw readings feed the regressor
        for (ci, buf) in raw_hist.iter_mut().enumerate() {
            if buf.len() == cfg.window_len {
                buf.pop_front();
            }
            buf.push_back(match ci {
                0 => sample.accel.x,
                1 => sample.accel.y,
                2 => sample.accel.z,
                3 => sample.gyro.x,
                4 => sample.gyro.y,
                _ => sample.gyro.z,
            });
        }

        let tick = k + 1;
        if tick % gnss_every == 0 {
            if let Some(fix) = gnss_iter.next() {
                let residual = gnss_residual(em, &nav, fix, cfg.dt / 2.0)?;
                let (posterior, gain, nu) = update(&filt, &meas, &residual, &cfg.options)?;
                filt = posterior;
                out.innovations.push((nav.time, nu));
                window.push(nu);
                if matches!(policy, QPolicy::InnovationWindow { .. }) && window.is_full() {
                    let mut qhat = adapt_q(&gain, &window.innovation_matrix()?);
                    if let Some(gamma) = cfg.adaptive_floor {
                        qhat += Covariance::identity() * gamma;
                    }
                    adaptive_qd = Some(qhat);
                }
                if cfg.capture_updates {
                    out.updates.push(UpdateSnapshot {
                        time: nav.time,
                        dx: filt.dx,
                        p: filt.p,
                        nav_pre_inject: nav,
                        accel_bias: b_a,
                        gyro_bias: b_g,
                    });
                }
                let corr = inject_and_reset(em, &nav, &filt)?;
                nav = corr.nav;
                filt = corr.filter;
                b_a += corr.accel_bias;
                b_g += corr.gyro_bias;
            }
        }

        if let QPolicy::Learned { model, clamp, .. } = policy {
            if tuning_every > 0 && tick % tuning_every == 0 && raw_hist[0].len() == cfg.window_len
            {
                let windows: [Vec<f64>; 6] =
                    std::array::from_fn(|ci| raw_hist[ci].iter().copied().collect());
                let qc = predict_qc(model, &windows, *clamp)?;
                let d = qc.diagonal();
                out.q_history
                    .push((nav.time, [d[0], d[1], d[2], d[3], d[4], d[5]]));
                learned_qc = Some(qc);
            }
        }

        out.estimates.push(nav);
        out.p_trace.push(filt.p.trace());
    }
    Ok(out)
}

/// Diagnostics CSV: (time, est lat/lon/alt, truth lat/lon/alt, per-axis
/// position error in NED meters, trace P, q̂₁..q̂₆). Truth columns are NaN
/// when no reference trajectory is supplied.
pub fn save_diagnostics_csv(
    path: &std::path::Path,
    em: &EarthModel,
    out: &RunOutput,
    truth: Option<&[NavState]>,
) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "time", "est_lat", "est_lon", "est_alt", "truth_lat", "truth_lon", "truth_alt", "err_n",
        "err_e", "err_d", "trace_p", "q1", "q2", "q3", "q4", "q5", "q6",
    ])?;
    let mut q_idx = 0;
    let mut last_q = [f64::NAN; 6];
    for (i, est) in out.estimates.iter().enumerate() {
        while q_idx < out.q_history.len() && out.q_history[q_idx].0 <= est.time + 1e-9 {
            last_q = out.q_history[q_idx].1;
            q_idx += 1;
        }
        // estimates[i] corresponds to truth[i+1]: one state per step
        let (tl, terr) = match truth {
            Some(t) if i + 1 < t.len() => {
                let tr = &t[i + 1];
                let e = crate::eskf::nav_error_state(em, est, tr);
                ((tr.pos.lat, tr.pos.lon, tr.pos.alt), (e[0], e[1], e[2]))
            }
            _ => (
                (f64::NAN, f64::NAN, f64::NAN),
                (f64::NAN, f64::NAN, f64::NAN),
            ),
        };
        w.write_record(&[
            format!("{:.9}", est.time),
            format!("{:.15e}", est.pos.lat),
            format!("{:.15e}", est.pos.lon),
            format!("{:.9}", est.pos.alt),
            format!("{:.15e}", tl.0),
            format!("{:.15e}", tl.1),
            format!("{:.9}", tl.2),
            format!("{:.9}", terr.0),
            format!("{:.9}", terr.1),
            format!("{:.9}", terr.2),
            format!("{:.9e}", out.p_trace[i]),
            format!("{:.9e}", last_q[0]),
            format!("{:.9e}", last_q[1]),
            format!("{:.9e}", last_q[2]),
            format!("{:.9e}", last_q[3]),
            format!("{:.9e}", last_q[4]),
            format!("{:.9e}", last_q[5]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::nav_error_state;
    use crate::scenario::{
        baseline_profiles, corrupt, generate_truth, simulate_gnss, BaselineConfig,
    };
    use approx::assert_relative_eq;

    fn em() -> EarthModel {
        EarthModel::wgs84()
    }

    #[test]
    fn innovation_matrix_single_vector() {
        let mut w = InnovationWindowState::new(1);
        w.push(Vector3::new(1.0, 2.0, 3.0));
        let c = w.innovation_matrix().unwrap();
        let nu = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(c, nu * nu.transpose());
        let sv = nalgebra::SVD::new(c, false, false).singular_values;
        assert_eq!(sv.iter().filter(|&&s| s > 1e-12).count(), 1);
    }

    #[test]
    fn innovation_matrix_two_vectors() {
        let mut w = InnovationWindowState::new(2);
        w.push(Vector3::new(1.0, 0.0, 0.0));
        w.push(Vector3::new(0.0, 1.0, 0.0));
        let c = w.innovation_matrix().unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(0.5, 0.5, 0.0)));
    }

    #[test]
    fn innovation_matrix_zeros_and_not_full() {
        let mut w = InnovationWindowState::new(3);
        w.push(Vector3::zeros());
        assert!(matches!(
            w.innovation_matrix(),
            Err(RunError::WindowNotFull)
        ));
        w.push(Vector3::zeros());
        w.push(Vector3::zeros());
        assert_eq!(w.innovation_matrix().unwrap(), Matrix3::zeros());
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = InnovationWindowState::new(2);
        w.push(Vector3::new(9.0, 0.0, 0.0));
        w.push(Vector3::new(1.0, 0.0, 0.0));
        w.push(Vector3::new(1.0, 0.0, 0.0));
        let c = w.innovation_matrix().unwrap();
        assert_eq!(c[(0, 0)], 1.0);
    }

    #[test]
    fn adapt_q_zero_gain() {
        assert_eq!(
            adapt_q(&GainMatrix::zeros(), &Matrix3::identity()),
            Covariance::zeros()
        );
    }

    #[test]
    fn adapt_q_scalar_analogue() {
        let mut k = GainMatrix::zeros();
        k[(0, 0)] = 1.0;
        let c = Matrix3::from_diagonal(&Vector3::new(0.7, 0.0, 0.0));
        let q = adapt_q(&k, &c);
        assert_eq!(q[(0, 0)], 0.7);
        assert_eq!(q.trace(), 0.7);
    }

    #[test]
    fn adapt_q_rank_bound() {
        let mut k = GainMatrix::zeros();
        for i in 0..15 {
            for j in 0..3 {
                k[(i, j)] = ((i * 3 + j) as f64).sin();
            }
        }
        let c = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.5, 0.0, 0.1, 0.0, 1.0);
        let q = adapt_q(&k, &c);
        let sv = nalgebra::SVD::new(q, false, false).singular_values;
        assert!(sv.iter().filter(|&&s| s > 1e-12).count() <= 3);
    }

    fn test_nav() -> NavState {
        baseline_profiles(&BaselineConfig::default())[0].initial_state()
    }

    #[test]
    fn next_qd_constant_matches_discretization() {
        let nav = test_nav();
        let g = build_g(&nav);
        let seed = ProcessNoiseDiag::uniform(0.005, 0.005);
        let cq1 = ProcessNoiseDiag::uniform(0.002, 0.02);
        let ctx = QContext {
            g: &g,
            dt: 0.01,
            qc_scale: 1.0,
            seed_qc: &seed,
            adaptive_qd: None,
            learned_qc: None,
        };
        let qd = next_qd(&QPolicy::Constant(cq1), &ctx);
        let (_, expect) = discretize(&crate::eskf::SystemMatrix::zeros(), &g, &cq1, 0.01);
        assert_eq!(qd, expect);
    }

    #[test]
    fn next_qd_innovation_cold_start_uses_seed() {
        let nav = test_nav();
        let g = build_g(&nav);
        let seed = ProcessNoiseDiag::uniform(0.004, 0.009);
        let ctx = QContext {
            g: &g,
            dt: 0.01,
            qc_scale: 1.0,
            seed_qc: &seed,
            adaptive_qd: None,
            learned_qc: None,
        };
        let qd = next_qd(&QPolicy::InnovationWindow { xi: 3 }, &ctx);
        let (_, expect) = discretize(&crate::eskf::SystemMatrix::zeros(), &g, &seed, 0.01);
        assert_eq!(qd, expect);

        let held = Covariance::identity() * 0.123;
        let ctx_held = QContext {
            adaptive_qd: Some(&held),
            ..ctx
        };
        assert_eq!(
            next_qd(&QPolicy::InnovationWindow { xi: 3 }, &ctx_held),
            held
        );
    }

    #[test]
    fn next_qd_learned_stub_composition() {
        // constant-output stub q̂ = 0.01 → Qd = G·diag(0.01·1₆, 0.001·1₆)·Gᵀ·dt
        let nav = test_nav();
        let g = build_g(&nav);
        let seed = ProcessNoiseDiag::uniform(0.002, 0.02);
        let learned = ProcessNoiseDiag::uniform(0.01, 0.01);
        let ctx = QContext {
            g: &g,
            dt: 0.01,
            qc_scale: 1.0,
            seed_qc: &seed,
            adaptive_qd: None,
            learned_qc: Some(&learned),
        };
        let model = Arc::new(NetworkParams::init(200, 1).unwrap());
        let policy = QPolicy::Learned {
            model,
            tuning_rate: 2.0,
            clamp: Clamp::training_grid(),
        };
        let qd = next_qd(&policy, &ctx);
        let (_, expect) = discretize(&crate::eskf::SystemMatrix::zeros(), &g, &learned, 0.01);
        assert_eq!(qd, expect);
    }

    #[test]
    fn next_qd_is_pure() {
        let nav = test_nav();
        let g = build_g(&nav);
        let seed = ProcessNoiseDiag::uniform(0.002, 0.02);
        let ctx = QContext {
            g: &g,
            dt: 0.01,
            qc_scale: 0.01,
            seed_qc: &seed,
            adaptive_qd: None,
            learned_qc: None,
        };
        let p = QPolicy::Constant(ProcessNoiseDiag::uniform(0.002, 0.02));
        assert_eq!(next_qd(&p, &ctx), next_qd(&p, &ctx));
    }

    #[test]
    fn zero_noise_end_to_end_is_tight() {
        // noiseless IMU and GNSS: the estimate must track the truth to
        // numerical precision regardless of policy
        let em = em();
        let cfg_b = BaselineConfig {
            duration: 60.0,
            ..BaselineConfig::default()
        };
        let b = generate_truth(&em, &baseline_profiles(&cfg_b)[3]).unwrap();
        let fixes = simulate_gnss(&em, &b.truth, 0.2, (0.0, 0.0, 0.0), 1).unwrap();
        let cfg = FusionConfig::new(b.truth[0], 0.01, 0.2);
        let out = run_filter(
            &em,
            &b.imu,
            &fixes,
            &QPolicy::Constant(ProcessNoiseDiag::uniform(0.002, 0.02)),
            &cfg,
        )
        .unwrap();
        let mut sum_sq = 0.0;
        for (i, est) in out.estimates.iter().enumerate() {
            let e = nav_error_state(&em, est, &b.truth[i + 1]);
            sum_sq += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
        }
        let prmse = (sum_sq / out.estimates.len() as f64).sqrt();
        assert!(prmse < 0.05, "zero-noise PRMSE {prmse}");
    }

    #[test]
    fn tuning_rate_bookkeeping() {
        // 60 s at 100 Hz with tuningRate = 2 s: exactly 30 regressions,
        // six variances each
        let em = em();
        let cfg_b = BaselineConfig {
            duration: 60.0,
            ..BaselineConfig::default()
        };
        let b = generate_truth(&em, &baseline_profiles(&cfg_b)[0]).unwrap();
        let noisy = corrupt(&b.imu, 0.004, 5);
        let fixes = simulate_gnss(&em, &b.truth, 0.2, (0.01, 0.01, 0.02), 2).unwrap();
        let mut cfg = FusionConfig::new(b.truth[0], 0.01, 0.2);
        cfg.qc_scale = cfg.dt; // injected q is a per-sample variance
        let mut stub = NetworkParams::architecture(200).unwrap();
        for c in &mut stub.conv {
            c.ln_gain.fill(1.0);
        }
        stub.linear.last_mut().unwrap().bias[0] = 0.013;
        let policy = QPolicy::Learned {
            model: Arc::new(stub),
            tuning_rate: 2.0,
            clamp: Clamp::training_grid(),
        };
        let out = run_filter(&em, &noisy, &fixes, &policy, &cfg).unwrap();
        assert_eq!(out.q_history.len(), 30);
        for (_, q) in &out.q_history {
            for v in q.iter().take(6) {
                assert_relative_eq!(*v, 0.013, epsilon = 1e-12);
            }
        }
        assert_relative_eq!(out.q_history[0].0, 2.0, epsilon = 1e-9);
        assert_relative_eq!(out.q_history[29].0, 60.0, epsilon = 1e-9);
    }

    #[test]
    fn innovation_qhat_stays_psd() {
        let em = em();
        let cfg_b = BaselineConfig {
            duration: 30.0,
            ..BaselineConfig::default()
        };
        let b = generate_truth(&em, &baseline_profiles(&cfg_b)[2]).unwrap();
        let noisy = corrupt(&b.imu, 0.013, 7);
        let fixes = simulate_gnss(&em, &b.truth, 0.2, (0.01, 0.01, 0.02), 8).unwrap();
        let mut cfg = FusionConfig::new(b.truth[0], 0.01, 0.2);
        cfg.qc_scale = cfg.dt;
        cfg.capture_updates = true;
        let out = run_filter(
            &em,
            &noisy,
            &fixes,
            &QPolicy::InnovationWindow { xi: 3 },
            &cfg,
        )
        .unwrap();
        assert!(!out.updates.is_empty());
        for u in &out.updates {
            let eig = nalgebra::SymmetricEigen::new(u.p).eigenvalues;
            let trace = u.p.trace();
            assert!(eig.iter().all(|&l| l >= -1e-9 * trace));
        }
    }

    #[test]
    fn stream_gap_detected() {
        let em = em();
        let cfg_b = BaselineConfig {
            duration: 5.0,
            ..BaselineConfig::default()
        };
        let b = generate_truth(&em, &baseline_profiles(&cfg_b)[0]).unwrap();
        let mut imu = b.imu.clone();
        imu[200].time += 0.3;
        let cfg = FusionConfig::new(b.truth[0], 0.01, 0.2);
        let res = run_filter(
            &em,
            &imu,
            &[],
            &QPolicy::Constant(ProcessNoiseDiag::uniform(0.002, 0.02)),
            &cfg,
        );
        assert!(matches!(res, Err(RunError::StreamGap { index: 200, .. })));
    }

    #[test]
    fn learned_policy_rejects_mismatched_model_length() {
        let em = em();
        let cfg_b = BaselineConfig {
            duration: 2.0,
            ..BaselineConfig::default()
        };
        let b = generate_truth(&em, &baseline_profiles(&cfg_b)[0]).unwrap();
        let cfg = FusionConfig::new(b.truth[0], 0.01, 0.2); // window_len = 200
        let model = Arc::new(NetworkParams::init(400, 3).unwrap());
        let res = run_filter(
            &em,
            &b.imu,
            &[],
            &QPolicy::Learned {
                model,
                tuning_rate: 2.0,
                clamp: Clamp::training_grid(),
            },
            &cfg,
        );
        assert!(matches!(res, Err(RunError::Net(_))));
    }

    #[test]
    fn diagnostics_csv_row_count() {
        let em = em();
        let cfg_b = BaselineConfig {
            duration: 4.0,
            ..BaselineConfig::default()
        };
        let b = generate_truth(&em, &baseline_profiles(&cfg_b)[0]).unwrap();
        let noisy = corrupt(&b.imu, 0.005, 3);
        let fixes = simulate_gnss(&em, &b.truth, 0.2, (0.01, 0.01, 0.02), 4).unwrap();
        let mut cfg = FusionConfig::new(b.truth[0], 0.01, 0.2);
        cfg.qc_scale = cfg.dt;
        let out = run_filter(
            &em,
            &noisy,
            &fixes,
            &QPolicy::Constant(ProcessNoiseDiag::uniform(0.002, 0.02)),
            &cfg,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        save_diagnostics_csv(&path, &em, &out, Some(&b.truth)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 401); // header + one row per tick
    }
}
