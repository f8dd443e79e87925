//! Waypoint trajectories: Catmull-Rom interpolation with an arc-length
//! parameterization and a speed profile on top.
//!
//! The spline itself is sampled densely once at construction to build a
//! cumulative arc-length table; evaluation then inverts distance-along-path
//! to a spline parameter by binary search. Everything here is pure float
//! arithmetic, so repeated evaluation is bit-reproducible.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least one waypoint")]
    NoWaypoints,
    #[error("waypoint {0} has a non-finite coordinate")]
    NonFiniteWaypoint(usize),
    #[error("speed profile parameter is not positive and finite: {0}")]
    BadSpeed(f64),
    #[error("waypoints trace a zero-length path")]
    ZeroLengthPath,
    #[error("a single-waypoint trajectory needs an explicit scenario duration")]
    StaticNeedsDuration,
}

/// How fast the node moves along the path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum SpeedProfile {
    /// Constant ground speed in m/s.
    Constant { speed: f64 },
    /// Ramp up at `accel` m/s^2 to `v_max`, cruise, ramp down to rest.
    /// Short paths degenerate to a triangular profile.
    Trapezoid { v_max: f64, accel: f64 },
}

impl SpeedProfile {
    fn validate(&self) -> Result<(), TrajectoryError> {
        let params = match *self {
            SpeedProfile::Constant { speed } => vec![speed],
            SpeedProfile::Trapezoid { v_max, accel } => vec![v_max, accel],
        };
        for v in params {
            if !v.is_finite() || v <= 0.0 {
                return Err(TrajectoryError::BadSpeed(v));
            }
        }
        Ok(())
    }
}

/// Declarative description of the node's motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<[f64; 3]>,
    pub speed: SpeedProfile,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.waypoints.is_empty() {
            return Err(TrajectoryError::NoWaypoints);
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if !w.iter().all(|c| c.is_finite()) {
                return Err(TrajectoryError::NonFiniteWaypoint(i));
            }
        }
        self.speed.validate()
    }
}

// dense samples per spline segment for the arc-length table
const ARC_SAMPLES_PER_SEGMENT: usize = 512;

#[derive(Debug)]
enum Kind {
    Static(Vec3),
    Moving {
        points: Vec<Vec3>,
        /// cumulative arc length at parameter u = i / ARC_SAMPLES_PER_SEGMENT
        cum_len: Vec<f64>,
        profile: SpeedProfile,
    },
}

/// A sampled trajectory: position as a function of time.
#[derive(Debug)]
pub struct Trajectory {
    kind: Kind,
    /// Time to traverse the full path; 0 for a static trajectory.
    pub travel_time: f64,
    /// Total arc length in meters.
    pub length: f64,
}

/// Catmull-Rom basis (tension 1/2) on one segment, endpoints clamped.
fn spline_point(points: &[Vec3], seg: usize, s: f64) -> Vec3 {
    let n = points.len();
    let p0 = points[seg.saturating_sub(1)];
    let p1 = points[seg];
    let p2 = points[(seg + 1).min(n - 1)];
    let p3 = points[(seg + 2).min(n - 1)];
    let s2 = s * s;
    let s3 = s2 * s;
    0.5 * ((2.0 * p1)
        + (p2 - p0) * s
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s2
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * s3)
}

/// Derivative of the basis with respect to the segment parameter.
fn spline_deriv(points: &[Vec3], seg: usize, s: f64) -> Vec3 {
    let n = points.len();
    let p0 = points[seg.saturating_sub(1)];
    let p1 = points[seg];
    let p2 = points[(seg + 1).min(n - 1)];
    let p3 = points[(seg + 2).min(n - 1)];
    0.5 * ((p2 - p0)
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * (2.0 * s)
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * (3.0 * s * s))
}

/// Second derivative of the basis with respect to the segment parameter.
fn spline_second(points: &[Vec3], seg: usize, s: f64) -> Vec3 {
    let n = points.len();
    let p0 = points[seg.saturating_sub(1)];
    let p1 = points[seg];
    let p2 = points[(seg + 1).min(n - 1)];
    let p3 = points[(seg + 2).min(n - 1)];
    0.5 * ((2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * 2.0
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * (6.0 * s))
}

/// Maps an arc length to (segment, local parameter) through the sampled
/// arc-length table, interpolating linearly between table entries.
fn locate(cum_len: &[f64], n_points: usize, s: f64) -> (usize, f64) {
    let idx = cum_len.partition_point(|&l| l < s);
    let u = if idx == 0 {
        0.0
    } else if idx >= cum_len.len() {
        (cum_len.len() - 1) as f64
    } else {
        let lo = cum_len[idx - 1];
        let hi = cum_len[idx];
        let frac = if hi > lo { (s - lo) / (hi - lo) } else { 0.0 };
        (idx - 1) as f64 + frac
    };
    let u = u / ARC_SAMPLES_PER_SEGMENT as f64;
    let seg = (u.floor() as usize).min(n_points - 2);
    (seg, u - seg as f64)
}

/// Ramp time and peak speed of a trapezoid profile over `total` meters;
/// degenerates to the triangular profile when the path is too short to
/// reach `v_max`.
fn trapezoid_ramp(total: f64, v_max: f64, accel: f64) -> (f64, f64) {
    let ramp_dist = v_max * v_max / (2.0 * accel);
    if 2.0 * ramp_dist >= total {
        let v_peak = (accel * total).sqrt();
        (v_peak / accel, v_peak)
    } else {
        (v_max / accel, v_max)
    }
}

impl Trajectory {
    pub fn build(spec: &TrajectorySpec) -> Result<Self, TrajectoryError> {
        spec.validate()?;
        let points: Vec<Vec3> = spec.waypoints.iter().map(|w| Vector3::from(*w)).collect();
        if points.len() == 1 {
            return Ok(Trajectory {
                kind: Kind::Static(points[0]),
                travel_time: 0.0,
                length: 0.0,
            });
        }

        let segments = points.len() - 1;
        let mut cum_len = Vec::with_capacity(segments * ARC_SAMPLES_PER_SEGMENT + 1);
        cum_len.push(0.0);
        let mut prev = points[0];
        let mut total = 0.0;
        for seg in 0..segments {
            for i in 1..=ARC_SAMPLES_PER_SEGMENT {
                let s = i as f64 / ARC_SAMPLES_PER_SEGMENT as f64;
                let p = spline_point(&points, seg, s);
                total += (p - prev).norm();
                cum_len.push(total);
                prev = p;
            }
        }
        if total <= 0.0 {
            return Err(TrajectoryError::ZeroLengthPath);
        }

        let travel_time = match spec.speed {
            SpeedProfile::Constant { speed } => total / speed,
            SpeedProfile::Trapezoid { v_max, accel } => {
                let ramp_dist = v_max * v_max / (2.0 * accel);
                if 2.0 * ramp_dist >= total {
                    // triangular: never reaches v_max
                    2.0 * (total / accel).sqrt()
                } else {
                    2.0 * v_max / accel + (total - 2.0 * ramp_dist) / v_max
                }
            }
        };

        Ok(Trajectory {
            kind: Kind::Moving {
                points,
                cum_len,
                profile: spec.speed,
            },
            travel_time,
            length: total,
        })
    }

    /// Distance traveled along the path after `t` seconds (clamped to the
    /// path length).
    fn distance_at(&self, t: f64) -> f64 {
        let Kind::Moving { profile, .. } = &self.kind else {
            return 0.0;
        };
        let t = t.clamp(0.0, self.travel_time);
        let total = self.length;
        match *profile {
            SpeedProfile::Constant { speed } => (speed * t).min(total),
            SpeedProfile::Trapezoid { v_max, accel } => {
                let (t_ramp, v_peak) = trapezoid_ramp(total, v_max, accel);
                let t_total = self.travel_time;
                let s = if t <= t_ramp {
                    0.5 * accel * t * t
                } else if t >= t_total - t_ramp {
                    let dt = t_total - t;
                    total - 0.5 * accel * dt * dt
                } else {
                    0.5 * accel * t_ramp * t_ramp + v_peak * (t - t_ramp)
                };
                s.clamp(0.0, total)
            }
        }
    }

    /// Position at time `t`; before the start or after the traversal the
    /// endpoint positions are held.
    pub fn position(&self, t: f64) -> Vec3 {
        match &self.kind {
            Kind::Static(p) => *p,
            Kind::Moving { points, cum_len, .. } => {
                let s = self.distance_at(t);
                let (seg, local) = locate(cum_len, points.len(), s);
                spline_point(points, seg, local)
            }
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self.kind, Kind::Static(_))
    }

    /// Scalar speed along the path; zero when parked before the start or
    /// after arrival.
    fn speed_scalar(&self, t: f64) -> f64 {
        let Kind::Moving { profile, .. } = &self.kind else {
            return 0.0;
        };
        if t < 0.0 || t > self.travel_time {
            return 0.0;
        }
        match *profile {
            SpeedProfile::Constant { speed } => speed,
            SpeedProfile::Trapezoid { v_max, accel } => {
                let (t_ramp, v_peak) = trapezoid_ramp(self.length, v_max, accel);
                if t <= t_ramp {
                    accel * t
                } else if t >= self.travel_time - t_ramp {
                    (accel * (self.travel_time - t)).max(0.0)
                } else {
                    v_peak
                }
            }
        }
    }

    /// Signed scalar acceleration along the path.
    fn accel_scalar(&self, t: f64) -> f64 {
        let Kind::Moving { profile, .. } = &self.kind else {
            return 0.0;
        };
        if t < 0.0 || t >= self.travel_time {
            return 0.0;
        }
        match *profile {
            SpeedProfile::Constant { .. } => 0.0,
            SpeedProfile::Trapezoid { v_max, accel } => {
                let (t_ramp, _) = trapezoid_ramp(self.length, v_max, accel);
                if t < t_ramp {
                    accel
                } else if t > self.travel_time - t_ramp {
                    -accel
                } else {
                    0.0
                }
            }
        }
    }

    /// World-frame acceleration of the moving point: the scalar profile
    /// combined with the spline geometry through the chain rule,
    /// `p'' = c'' u'^2 + c' u''` with `u' = v / |c'|`. Differentiating the
    /// interpolated inverse arc-length map directly would drop the `u''`
    /// term and bend straight-line accelerations, so the derivatives are
    /// taken on the spline itself.
    pub fn acceleration(&self, t: f64) -> Vec3 {
        let Kind::Moving { points, cum_len, .. } = &self.kind else {
            return Vector3::zeros();
        };
        if t < 0.0 || t > self.travel_time {
            return Vector3::zeros();
        }
        let s = self.distance_at(t);
        let (seg, local) = locate(cum_len, points.len(), s);
        let d1 = spline_deriv(points, seg, local);
        let d2 = spline_second(points, seg, local);
        let sigma2 = d1.norm_squared();
        if sigma2 == 0.0 {
            return Vector3::zeros();
        }
        let v = self.speed_scalar(t);
        let a = self.accel_scalar(t);
        let u_t = v / sigma2.sqrt();
        let u_tt = a / sigma2.sqrt() - v * v * d1.dot(&d2) / (sigma2 * sigma2);
        d2 * (u_t * u_t) + d1 * u_tt
    }
}
