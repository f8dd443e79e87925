//! Adaptive Kalman filter over a 9-state constant-acceleration model
//! (position, velocity, acceleration per axis).
//!
//! Position fixes drive an innovation-based adaptation of the measurement
//! covariance: the sample covariance of recent innovations, minus the
//! predicted part `H P H^T`, projected back to the PSD cone with a floor
//! on the eigenvalues. Dilution-of-precision feedback additionally scales
//! the position covariance per update.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trilat::EpochFix;
use crate::Vec3;

type State = SVector<f64, 9>;
type Cov = SMatrix<f64, 9, 9>;

#[derive(Debug, Error, PartialEq)]
pub enum AkfError {
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("covariance update produced a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AkfConfig {
    /// White-jerk intensity driving the process noise.
    pub q0: f64,
    /// Initial position measurement variance per axis.
    pub r_init: f64,
    /// Innovation window length for the covariance adaptation.
    pub adapt_window: usize,
    /// Eigenvalue floor for the adapted measurement covariance.
    pub r_floor: f64,
    /// Dilution-of-precision reference; fixes with gdop below it are not
    /// penalized.
    pub gdop_ref: f64,
    /// Initial state covariance per axis, position / velocity / accel.
    pub p0: [f64; 3],
    /// Accelerometer measurement variance per axis.
    pub r_accel: f64,
}

impl Default for AkfConfig {
    fn default() -> Self {
        AkfConfig {
            q0: 0.5,
            r_init: 0.05,
            adapt_window: 50,
            r_floor: 1e-6,
            gdop_ref: 2.0,
            p0: [4.0, 1.0, 1.0],
            r_accel: 0.05,
        }
    }
}

/// Scales a position measurement covariance by the squared dilution
/// penalty `alpha(g) = max(1, g / gdop_ref)`.
pub fn scale_r_by_gdop(r: &Matrix3<f64>, gdop: f64, gdop_ref: f64) -> Matrix3<f64> {
    let alpha = (gdop / gdop_ref).max(1.0);
    r * (alpha * alpha)
}

/// Sample covariance of an innovation window about its own mean, with
/// 1/(N-1) normalization. Centering matters for stability downstream: a
/// systematic offset in the innovations (the filter lagging truth) must
/// not masquerade as measurement noise, or the adapted R grows, the
/// corrections weaken, and the lag feeds back on itself.
pub fn innovation_covariance(window: &[Vector3<f64>]) -> Matrix3<f64> {
    assert!(window.len() >= 2, "sample covariance needs two innovations");
    let mean: Vector3<f64> = window.iter().sum::<Vector3<f64>>() / window.len() as f64;
    let mut c = Matrix3::zeros();
    for y in window {
        let d = y - mean;
        c += d * d.transpose();
    }
    c / (window.len() - 1) as f64
}

/// Projects a symmetric matrix onto the PSD cone with an eigenvalue floor.
pub fn psd_project(m: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let l = eig.eigenvalues[i].max(floor);
        let v = eig.eigenvectors.column(i);
        out += v * v.transpose() * l;
    }
    out
}

pub struct Akf {
    pub x: State,
    pub p: Cov,
    pub r_pos: Matrix3<f64>,
    cfg: AkfConfig,
    innovations: VecDeque<Vector3<f64>>,
    /// `H P H^T` captured alongside each innovation, used by the adaptation.
    predicted_cov: VecDeque<Matrix3<f64>>,
}

impl Akf {
    pub fn new(initial_position: Vec3, cfg: AkfConfig) -> Self {
        let mut x = State::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&initial_position);
        let mut p = Cov::zeros();
        for axis in 0..3 {
            p[(axis, axis)] = cfg.p0[0];
            p[(3 + axis, 3 + axis)] = cfg.p0[1];
            p[(6 + axis, 6 + axis)] = cfg.p0[2];
        }
        let r_pos = Matrix3::identity() * cfg.r_init;
        Akf {
            x,
            p,
            r_pos,
            cfg,
            innovations: VecDeque::new(),
            predicted_cov: VecDeque::new(),
        }
    }

    pub fn position(&self) -> Vec3 {
        self.x.fixed_rows::<3>(0).into()
    }

    pub fn velocity(&self) -> Vec3 {
        self.x.fixed_rows::<3>(3).into()
    }

    /// Propagates the constant-acceleration model by `dt` seconds and adds
    /// white-jerk process noise `G q0 G^T` with `G = [dt^3/6, dt^2/2, dt]`
    /// per axis.
    pub fn predict(&mut self, dt: f64) -> Result<(), AkfError> {
        if !dt.is_finite() || dt < 0.0 {
            return Err(AkfError::BadTimeStep(dt));
        }
        if dt == 0.0 {
            return Ok(());
        }
        let mut f = Cov::identity();
        for axis in 0..3 {
            f[(axis, 3 + axis)] = dt;
            f[(axis, 6 + axis)] = 0.5 * dt * dt;
            f[(3 + axis, 6 + axis)] = dt;
        }
        let mut g = SMatrix::<f64, 9, 3>::zeros();
        for axis in 0..3 {
            g[(axis, axis)] = dt * dt * dt / 6.0;
            g[(3 + axis, axis)] = 0.5 * dt * dt;
            g[(6 + axis, axis)] = dt;
        }
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + g * g.transpose() * self.cfg.q0;
        self.symmetrize()?;
        Ok(())
    }

    fn symmetrize(&mut self) -> Result<(), AkfError> {
        self.p = (self.p + self.p.transpose()) * 0.5;
        if self.p.iter().any(|v| !v.is_finite()) || self.x.iter().any(|v| !v.is_finite()) {
            return Err(AkfError::NonFinite);
        }
        Ok(())
    }

    fn update_block<const OFFSET: usize>(
        &mut self,
        z: Vector3<f64>,
        r: &Matrix3<f64>,
    ) -> Result<Option<Vector3<f64>>, AkfError> {
        let hx: Vector3<f64> = self.x.fixed_rows::<3>(OFFSET).into();
        let y = z - hx;
        let php: Matrix3<f64> = self
            .p
            .fixed_view::<3, 3>(OFFSET, OFFSET)
            .into_owned();
        let s = php + r;
        let Some(chol) = s.cholesky() else {
            // fully collapsed covariance with an exact model: nothing to gain
            return Ok(None);
        };
        let s_inv = chol.inverse();
        let ph: SMatrix<f64, 9, 3> = self.p.fixed_columns::<3>(OFFSET).into_owned();
        let k = ph * s_inv;
        self.x += k * y;
        let mut kh = Cov::zeros();
        kh.fixed_columns_mut::<3>(OFFSET).copy_from(&k);
        self.p = (Cov::identity() - kh) * self.p;
        self.symmetrize()?;
        Ok(Some(y))
    }

    /// Position update. `gdop` inflates the measurement covariance when the
    /// fix geometry is poor; the pre-update innovation and predicted
    /// covariance feed the adaptation window.
    ///
    /// The stored innovation is divided by the dilution penalty (and the
    /// stored covariance by its square) so the window estimates the
    /// reference-geometry noise. Adapting on raw innovations and then
    /// rescaling by the penalty on the next update would count the
    /// dilution twice, which diverges: inflated R weakens the correction,
    /// the drift inflates the innovations, and R grows without bound.
    pub fn update_position(&mut self, z: Vec3, gdop: Option<f64>) -> Result<(), AkfError> {
        let alpha = match gdop {
            Some(g) => (g / self.cfg.gdop_ref).max(1.0),
            None => 1.0,
        };
        let r = self.r_pos * (alpha * alpha);
        let php: Matrix3<f64> = self.p.fixed_view::<3, 3>(0, 0).into_owned();
        if let Some(y) = self.update_block::<0>(z, &r)? {
            self.innovations.push_back(y / alpha);
            self.predicted_cov.push_back(php / (alpha * alpha));
            while self.innovations.len() > self.cfg.adapt_window {
                self.innovations.pop_front();
                self.predicted_cov.pop_front();
            }
            if self.innovations.len() == self.cfg.adapt_window {
                self.adapt_r();
            }
        }
        Ok(())
    }

    /// Accelerometer update on the acceleration block. These innovations do
    /// not feed the position covariance adaptation.
    pub fn update_accel(&mut self, z: Vec3) -> Result<(), AkfError> {
        let r = Matrix3::identity() * self.cfg.r_accel;
        self.update_block::<6>(z, &r)?;
        Ok(())
    }

    /// Innovation-based measurement covariance estimate: sample covariance
    /// of the window minus the mean predicted `H P H^T`, floored per axis.
    ///
    /// Only the diagonal is kept. Fix errors are correlated across axes by
    /// the anchor geometry, so the windowed estimate routinely shows a
    /// near-singular cross structure whose smallest eigenvalue is mostly
    /// sampling noise. Feeding that into `S = H P H^T + R` lets one axis's
    /// innovation drive corrections on another with an effective gain far
    /// outside [0, 1], which destabilizes the filter. Per-axis variances
    /// keep every correction bounded by its own innovation.
    fn adapt_r(&mut self) {
        let n = self.innovations.len();
        debug_assert!(n >= 2);
        let window: Vec<Vector3<f64>> = self.innovations.iter().copied().collect();
        let c = innovation_covariance(&window);
        let mut php = Matrix3::zeros();
        for m in &self.predicted_cov {
            php += m;
        }
        php /= n as f64;
        let est = c - php;
        let mut r = Matrix3::zeros();
        for axis in 0..3 {
            r[(axis, axis)] = est[(axis, axis)].max(self.cfg.r_floor);
        }
        self.r_pos = r;
    }

    pub fn measurement_covariance(&self) -> Matrix3<f64> {
        self.r_pos
    }
}

/// One estimated trajectory point.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub t: f64,
    pub position: Vec3,
}

/// Runs the filter over a measurement timeline.
///
/// The filter starts at the first fix constrained by at least four anchors
/// and consumes only such fixes afterwards; sparser fixes are a documented
/// weakness of this loosely coupled baseline and are skipped. Corrected
/// world-frame accelerations act as acceleration measurements. Estimates
/// are emitted at the requested grid times.
pub fn run_akf(
    accel_world: &[(f64, Vec3)],
    fixes: &[EpochFix],
    grid: &[f64],
    cfg: &AkfConfig,
) -> Result<Vec<Estimate>, AkfError> {
    #[derive(Clone, Copy)]
    enum Event {
        Accel(usize),
        Fix(usize),
    }

    let usable = |f: &EpochFix| f.fix.n_anchors >= 4 && f.fix.converged;
    let Some(first_fix) = fixes.iter().position(usable) else {
        return Ok(Vec::new());
    };
    let t_start = fixes[first_fix].t;

    let mut events: Vec<(f64, u8, Event)> = Vec::new();
    for (i, (t, _)) in accel_world.iter().enumerate() {
        if *t >= t_start {
            events.push((*t, 0, Event::Accel(i)));
        }
    }
    for (i, f) in fixes.iter().enumerate().skip(first_fix) {
        if usable(f) {
            events.push((f.t, 1, Event::Fix(i)));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut filter = Akf::new(fixes[first_fix].fix.position_vec(), cfg.clone());
    let mut t_now = t_start;
    let mut out = Vec::with_capacity(grid.len());
    let mut next_grid = grid.iter().position(|&t| t >= t_start).unwrap_or(grid.len());

    for (t, _, ev) in events {
        // emit grid points that fall before this event
        while next_grid < grid.len() && grid[next_grid] < t {
            let mut probe = grid[next_grid] - t_now;
            if probe < 0.0 {
                probe = 0.0;
            }
            let mut preview = filter.p; // save
            let x_save = filter.x;
            filter.predict(probe)?;
            out.push(Estimate {
                t: grid[next_grid],
                position: filter.position(),
            });
            filter.x = x_save;
            std::mem::swap(&mut filter.p, &mut preview);
            next_grid += 1;
        }
        filter.predict((t - t_now).max(0.0))?;
        t_now = t;
        match ev {
            Event::Accel(i) => filter.update_accel(accel_world[i].1)?,
            Event::Fix(i) => {
                filter.update_position(fixes[i].fix.position_vec(), fixes[i].fix.gdop)?
            }
        }
    }
    while next_grid < grid.len() {
        let dt = (grid[next_grid] - t_now).max(0.0);
        filter.predict(dt)?;
        t_now = grid[next_grid];
        out.push(Estimate {
            t: grid[next_grid],
            position: filter.position(),
        });
        next_grid += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn exact_cfg() -> AkfConfig {
        AkfConfig {
            q0: 0.0,
            r_init: 0.0,
            adapt_window: 1000, // effectively disabled
            r_floor: 0.0,
            gdop_ref: 2.0,
            p0: [1.0, 1.0, 1.0],
            r_accel: 0.05,
        }
    }

    #[test]
    fn noise_free_constant_velocity_is_recovered_exactly() {
        // truth: p(t) = p0 + v t, exact position measurements, Q = R = 0
        let p0 = Vector3::new(1.0, -2.0, 3.0);
        let v = Vector3::new(0.5, 0.25, -0.75);
        let dt = 0.1;
        let mut filter = Akf::new(p0, exact_cfg());
        for k in 1..=4 {
            let t = k as f64 * dt;
            filter.predict(dt).unwrap();
            filter.update_position(p0 + v * t, None).unwrap();
        }
        let p_err = (filter.position() - (p0 + v * (4.0 * dt))).norm();
        let v_err = (filter.velocity() - v).norm();
        assert!(p_err < 1e-9, "position error {p_err}");
        assert!(v_err < 1e-9, "velocity error {v_err}");
    }

    #[test]
    fn single_update_matches_hand_computed_kalman_gain() {
        // one predict-update cycle verified against the textbook formulas
        // written out independently below
        let mut filter = Akf::new(Vector3::zeros(), AkfConfig::default());
        let dt = 0.2;
        filter.predict(dt).unwrap();
        let p_prior = filter.p;
        let x_prior = filter.x;
        let z = Vector3::new(0.3, -0.1, 0.2);
        filter.update_position(z, None).unwrap();

        let php: Matrix3<f64> = p_prior.fixed_view::<3, 3>(0, 0).into_owned();
        let r = Matrix3::identity() * AkfConfig::default().r_init;
        let s = php + r;
        let s_inv = s.try_inverse().unwrap();
        let ph = p_prior.fixed_columns::<3>(0).into_owned();
        let k = ph * s_inv;
        let y = z - x_prior.fixed_rows::<3>(0);
        let x_post = x_prior + k * y;
        for i in 0..9 {
            assert_relative_eq!(filter.x[i], x_post[i], epsilon = 1e-12);
        }
    }

    /// The filter holds a stationary target it already knows exactly, with
    /// near-zero prior covariance and no process noise, so the innovations
    /// are the i.i.d. measurement noise itself. One adaptation over the
    /// full 200-sample window must then recover the injected variances.
    #[test]
    fn adaptation_recovers_injected_measurement_noise() {
        let r_true: [f64; 3] = [0.04, 0.09, 0.16]; // variances per axis
        let cfg = AkfConfig {
            q0: 0.0,
            r_init: 1.0, // deliberately wrong
            adapt_window: 200,
            p0: [1e-6, 1e-6, 1e-6],
            ..AkfConfig::default()
        };
        let p0 = Vector3::new(3.0, -2.0, 1.0);
        let mut filter = Akf::new(p0, cfg);
        let mut rng = crate::sub_rng(42, "akf/adapt");
        let dists: Vec<Normal<f64>> = r_true
            .iter()
            .map(|&var| Normal::new(0.0, var.sqrt()).unwrap())
            .collect();
        for _ in 1..=200 {
            filter.predict(0.05).unwrap();
            let z = p0
                + Vector3::new(
                    dists[0].sample(&mut rng),
                    dists[1].sample(&mut rng),
                    dists[2].sample(&mut rng),
                );
            filter.update_position(z, None).unwrap();
        }
        let r_est = filter.measurement_covariance();
        for axis in 0..3 {
            let est = r_est[(axis, axis)];
            let truth = r_true[axis];
            let rel = (est - truth).abs() / truth;
            assert!(
                rel < 0.3,
                "axis {axis}: adapted variance {est} vs true {truth} (rel {rel:.2})"
            );
        }
    }

    #[test]
    fn innovation_covariance_is_centered_with_bessel_correction() {
        // two opposite unit vectors: mean zero, spread 2 on the first axis
        let pair = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
        let c = innovation_covariance(&pair);
        assert_relative_eq!(c[(0, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(c[(1, 1)], 0.0);
        assert_eq!(c[(2, 2)], 0.0);

        // identical vectors carry no spread at all, wherever they sit
        let same = [Vector3::new(4.0, -7.0, 2.5); 6];
        assert_eq!(innovation_covariance(&same), Matrix3::zeros());
    }

    /// A window with zero sample variance adapts R down to the floor, not
    /// to the second moment of the (offset) innovations.
    #[test]
    fn adaptation_floors_r_on_constant_innovations() {
        let cfg = AkfConfig {
            q0: 0.0,
            r_init: 0.5,
            adapt_window: 8,
            p0: [1e-9, 1e-9, 1e-9],
            ..AkfConfig::default()
        };
        let p0 = Vector3::new(1.0, 2.0, 3.0);
        let mut filter = Akf::new(p0, cfg.clone());
        for _ in 0..8 {
            filter.predict(0.05).unwrap();
            // constant offset measurement: every innovation is (almost)
            // the same vector
            filter
                .update_position(p0 + Vector3::new(0.4, -0.2, 0.1), None)
                .unwrap();
        }
        let r = filter.measurement_covariance();
        for axis in 0..3 {
            assert!(
                r[(axis, axis)] < 10.0 * cfg.r_floor,
                "axis {axis}: {} should be near the floor {}",
                r[(axis, axis)],
                cfg.r_floor
            );
        }
    }

    #[test]
    fn psd_projection_floors_negative_eigenvalues() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.2);
        let proj = psd_project(&m, 1e-6);
        let eig = proj.symmetric_eigen();
        for l in eig.eigenvalues.iter() {
            assert!(*l >= 1e-6 - 1e-15, "eigenvalue {l} below floor");
        }
        // untouched directions keep their values
        assert_relative_eq!(proj[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(proj[(2, 2)], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn gdop_scaling_kicks_in_above_the_reference() {
        let r = Matrix3::identity() * 0.01;
        let same = scale_r_by_gdop(&r, 1.0, 2.0);
        assert_relative_eq!(same[(0, 0)], 0.01, epsilon = 1e-15);
        let worse = scale_r_by_gdop(&r, 4.0, 2.0);
        assert_relative_eq!(worse[(0, 0)], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn covariance_stays_symmetric_under_random_driving() {
        let mut filter = Akf::new(Vector3::zeros(), AkfConfig::default());
        let mut rng = crate::sub_rng(9, "akf/sym");
        for _ in 0..500 {
            filter.predict(rng.gen_range(0.001..0.2)).unwrap();
            if rng.gen_bool(0.7) {
                let z = Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                );
                filter.update_position(z, Some(rng.gen_range(1.0..8.0))).unwrap();
            } else {
                let a = Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                filter.update_accel(a).unwrap();
            }
            let asym = (filter.p - filter.p.transpose()).norm();
            assert!(asym < 1e-9, "covariance asymmetry {asym}");
            // diagonal stays positive
            for i in 0..9 {
                assert!(filter.p[(i, i)] > 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_time_steps() {
        let mut filter = Akf::new(Vector3::zeros(), AkfConfig::default());
        assert_eq!(filter.predict(-0.1), Err(AkfError::BadTimeStep(-0.1)));
        assert!(matches!(
            filter.predict(f64::NAN),
            Err(AkfError::BadTimeStep(_))
        ));
    }
}
