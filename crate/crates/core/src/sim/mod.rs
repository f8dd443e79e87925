//! Synthetic scenario generation: trajectories, ranging channels with
//! NLOS bias and outages, inertial measurements with slowly drifting bias,
//! and sparse reference fixes.
//!
//! All randomness is derived from the scenario seed through labeled
//! sub-streams, one per purpose and anchor, so regenerating a scenario is
//! bit-reproducible and editing one schedule never shifts the draws of an
//! unrelated stream. Channel draws happen on every ranging slot whether or
//! not the anchor is visible, so toggling an outage interval does not
//! reshuffle the noise of the slots around it.

mod reference;
mod trajectory;

pub use reference::{reference_scenario, REFERENCE_ANCHOR_COUNT};
pub use trajectory::{SpeedProfile, Trajectory, TrajectoryError, TrajectorySpec};

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::Vec3;

/// Gravitational acceleration in the world frame, m/s^2.
pub const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

pub const MAX_ANCHORS: usize = 16;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario must define between 1 and {MAX_ANCHORS} anchors, got {0}")]
    AnchorCount(usize),
    #[error("anchor {0} has a non-finite coordinate")]
    NonFiniteAnchor(usize),
    #[error("rates must satisfy imu >= uwb >= ref > 0, got imu={imu}, uwb={uwb}, reference={reference}")]
    RateOrdering { imu: f64, uwb: f64, reference: f64 },
    #[error("trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid channel model: {0}")]
    BadChannel(String),
    #[error("invalid imu model: {0}")]
    BadImu(String),
    #[error("duration must be positive and finite, got {0}")]
    BadDuration(f64),
    #[error("bounding box has min >= max on axis {0}")]
    BadBounds(usize),
    #[error("trajectory leaves the bounding box at t={t}: position {position:?}")]
    OutOfBounds { t: f64, position: [f64; 3] },
    #[error("log contains no {0} records")]
    EmptyStream(&'static str),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Half-open time interval `[start, end)` in seconds.
pub type Interval = (f64, f64);

fn interval_contains(intervals: &[Interval], t: f64) -> bool {
    intervals.iter().any(|&(a, b)| t >= a && t < b)
}

/// Piecewise-constant function of time given as `(start, value)` breakpoints
/// sorted by start; before the first breakpoint the value is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Schedule(pub Vec<(f64, f64)>);

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule(vec![(0.0, v)])
    }

    pub fn value(&self, t: f64) -> f64 {
        let mut v = 0.0;
        for &(start, value) in &self.0 {
            if t >= start {
                v = value;
            } else {
                break;
            }
        }
        v
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        let mut prev = f64::NEG_INFINITY;
        for &(start, value) in &self.0 {
            if !start.is_finite() || start < prev {
                return Err(SimError::BadChannel(format!(
                    "{what}: breakpoints must be finite and sorted"
                )));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::BadChannel(format!(
                    "{what}: probability {value} outside [0, 1]"
                )));
            }
            prev = start;
        }
        Ok(())
    }
}

/// Ranging channel behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    /// Line-of-sight range noise, one sigma in meters.
    pub los_sigma: f64,
    /// Mean of the positive NLOS range bias in meters.
    pub nlos_bias_mean: f64,
    /// Spread of the NLOS range bias in meters.
    pub nlos_bias_sigma: f64,
    /// Per-anchor NLOS probability over time; empty means never.
    pub nlos_prob: Vec<Schedule>,
    /// Per-anchor outage intervals; empty means always visible.
    pub outages: Vec<Vec<Interval>>,
    /// Optional timestamp quantum in seconds; ranges snap to a grid of
    /// `c * quantum` meters.
    pub timestamp_quantum: Option<f64>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            los_sigma: 0.1,
            nlos_bias_mean: 0.5,
            nlos_bias_sigma: 0.3,
            nlos_prob: Vec::new(),
            outages: Vec::new(),
            timestamp_quantum: None,
        }
    }
}

/// Inertial sensor behavior. The additive bias evolves as
/// `bias(t) = bias_constant + bias_ramp * t` in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuModel {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub bias_constant: [f64; 3],
    pub bias_ramp: [f64; 3],
    /// Fixed body-to-world mounting rotation, axis-angle in radians.
    pub mount_rotvec: [f64; 3],
}

impl Default for ImuModel {
    fn default() -> Self {
        ImuModel {
            accel_sigma: 0.05,
            gyro_sigma: 0.002,
            bias_constant: [0.0; 3],
            bias_ramp: [0.0; 3],
            mount_rotvec: [0.0; 3],
        }
    }
}

pub fn default_bounds() -> ([f64; 3], [f64; 3]) {
    ([-1e6, -1e6, -1e6], [1e6, 1e6, 1e6])
}

/// Complete description of one synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub anchors: Vec<[f64; 3]>,
    pub trajectory: TrajectorySpec,
    pub imu_rate: f64,
    pub uwb_rate: f64,
    pub ref_rate: f64,
    /// Run length in seconds; defaults to the trajectory traversal time.
    #[serde(default)]
    pub duration: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub imu: ImuModel,
    /// Reference fix noise, one sigma in meters.
    #[serde(default)]
    pub ref_sigma: f64,
    #[serde(default = "default_bounds")]
    pub bounds: ([f64; 3], [f64; 3]),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.anchors.len();
        if n == 0 || n > MAX_ANCHORS {
            return Err(SimError::AnchorCount(n));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if !a.iter().all(|c| c.is_finite()) {
                return Err(SimError::NonFiniteAnchor(i));
            }
        }
        if !(self.imu_rate >= self.uwb_rate
            && self.uwb_rate >= self.ref_rate
            && self.ref_rate > 0.0
            && self.imu_rate.is_finite())
        {
            return Err(SimError::RateOrdering {
                imu: self.imu_rate,
                uwb: self.uwb_rate,
                reference: self.ref_rate,
            });
        }
        self.trajectory.validate()?;
        if let Some(d) = self.duration {
            if !d.is_finite() || d <= 0.0 {
                return Err(SimError::BadDuration(d));
            }
        }
        let c = &self.channel;
        if c.los_sigma < 0.0 || c.nlos_bias_sigma < 0.0 || !c.los_sigma.is_finite() {
            return Err(SimError::BadChannel("negative noise sigma".into()));
        }
        if !c.nlos_prob.is_empty() && c.nlos_prob.len() != n {
            return Err(SimError::BadChannel(format!(
                "nlos_prob has {} entries for {n} anchors",
                c.nlos_prob.len()
            )));
        }
        for (i, s) in c.nlos_prob.iter().enumerate() {
            s.validate(&format!("anchor {i}"))?;
        }
        if !c.outages.is_empty() && c.outages.len() != n {
            return Err(SimError::BadChannel(format!(
                "outages has {} entries for {n} anchors",
                c.outages.len()
            )));
        }
        for (i, spans) in c.outages.iter().enumerate() {
            for &(a, b) in spans {
                if !a.is_finite() || !b.is_finite() || a >= b {
                    return Err(SimError::BadChannel(format!(
                        "anchor {i}: outage interval ({a}, {b}) is empty or non-finite"
                    )));
                }
            }
        }
        if let Some(q) = c.timestamp_quantum {
            if !q.is_finite() || q <= 0.0 {
                return Err(SimError::BadChannel(format!("timestamp quantum {q}")));
            }
        }
        if self.imu.accel_sigma < 0.0 || self.imu.gyro_sigma < 0.0 {
            return Err(SimError::BadImu("negative noise sigma".into()));
        }
        if self.ref_sigma < 0.0 {
            return Err(SimError::BadImu("negative reference sigma".into()));
        }
        for axis in 0..3 {
            if self.bounds.0[axis] >= self.bounds.1[axis] {
                return Err(SimError::BadBounds(axis));
            }
        }
        Ok(())
    }
}

/// One inertial sample: specific force plus bias and noise in the body
/// frame, angular rate in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub accel: [f64; 3],
    pub gyro: [f64; 3],
}

/// One ranging measurement. When `valid` is false the anchor was in outage
/// and the range field carries no information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UwbRecord {
    pub t: f64,
    pub anchor_id: usize,
    pub range: f64,
    pub valid: bool,
}

/// A timestamped position, used for both reference fixes and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosSample {
    pub t: f64,
    pub position: [f64; 3],
}

impl PosSample {
    pub fn position_vec(&self) -> Vec3 {
        Vector3::from(self.position)
    }
}

impl ImuSample {
    pub fn accel_vec(&self) -> Vec3 {
        Vector3::from(self.accel)
    }
}

/// One line of the on-disk log format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Imu {
        t: f64,
        accel: [f64; 3],
        gyro: [f64; 3],
    },
    Uwb {
        t: f64,
        anchor_id: usize,
        range: f64,
        valid: bool,
    },
    Ref {
        t: f64,
        position: [f64; 3],
    },
    Truth {
        t: f64,
        position: [f64; 3],
    },
}

/// All measurement streams of one run, each sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementLog {
    pub imu: Vec<ImuSample>,
    pub uwb: Vec<UwbRecord>,
    pub reference: Vec<PosSample>,
    pub truth: Vec<PosSample>,
}

impl MeasurementLog {
    /// Flattens the streams into time-ordered records (ties break by
    /// stream kind, then anchor id) for the JSON-Lines format.
    pub fn to_records(&self) -> Vec<LogRecord> {
        let mut records: Vec<(f64, u8, usize, LogRecord)> = Vec::with_capacity(
            self.imu.len() + self.uwb.len() + self.reference.len() + self.truth.len(),
        );
        for s in &self.imu {
            records.push((
                s.t,
                0,
                0,
                LogRecord::Imu {
                    t: s.t,
                    accel: s.accel,
                    gyro: s.gyro,
                },
            ));
        }
        for r in &self.uwb {
            records.push((
                r.t,
                1,
                r.anchor_id,
                LogRecord::Uwb {
                    t: r.t,
                    anchor_id: r.anchor_id,
                    range: r.range,
                    valid: r.valid,
                },
            ));
        }
        for s in &self.reference {
            records.push((
                s.t,
                2,
                0,
                LogRecord::Ref {
                    t: s.t,
                    position: s.position,
                },
            ));
        }
        for s in &self.truth {
            records.push((
                s.t,
                3,
                0,
                LogRecord::Truth {
                    t: s.t,
                    position: s.position,
                },
            ));
        }
        records.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        records.into_iter().map(|(_, _, _, r)| r).collect()
    }

    pub fn from_records(records: Vec<LogRecord>) -> Self {
        let mut log = MeasurementLog::default();
        for record in records {
            match record {
                LogRecord::Imu { t, accel, gyro } => log.imu.push(ImuSample { t, accel, gyro }),
                LogRecord::Uwb {
                    t,
                    anchor_id,
                    range,
                    valid,
                } => log.uwb.push(UwbRecord {
                    t,
                    anchor_id,
                    range,
                    valid,
                }),
                LogRecord::Ref { t, position } => log.reference.push(PosSample { t, position }),
                LogRecord::Truth { t, position } => log.truth.push(PosSample { t, position }),
            }
        }
        log
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write_jsonl(path, &self.to_records())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, JsonlError> {
        Ok(Self::from_records(jsonl::read_jsonl(path)?))
    }

    /// Ground truth linearly interpolated at `t`; `None` outside the span.
    pub fn truth_at(&self, t: f64) -> Option<Vec3> {
        interp_position(&self.truth, t)
    }
}

/// Linear interpolation over time-sorted position samples.
pub fn interp_position(samples: &[PosSample], t: f64) -> Option<Vec3> {
    if samples.is_empty() {
        return None;
    }
    let first = samples.first().unwrap();
    let last = samples.last().unwrap();
    if t < first.t || t > last.t {
        return None;
    }
    let idx = samples.partition_point(|s| s.t <= t);
    if idx == 0 {
        return Some(first.position_vec());
    }
    if idx >= samples.len() {
        return Some(last.position_vec());
    }
    let a = &samples[idx - 1];
    let b = &samples[idx];
    let span = b.t - a.t;
    if span <= 0.0 {
        return Some(a.position_vec());
    }
    let w = (t - a.t) / span;
    Some(a.position_vec() * (1.0 - w) + b.position_vec() * w)
}

/// Generates all measurement streams for a scenario.
///
/// Ground truth is emitted at twice the ranging rate so the ranging slots
/// (and the model grid derived from them) coincide exactly with truth
/// samples. Ranging records are emitted for every anchor on every slot;
/// outages mark them invalid rather than dropping them.
pub fn generate(scenario: &Scenario) -> Result<MeasurementLog, SimError> {
    scenario.validate()?;
    let traj = Trajectory::build(&scenario.trajectory)?;
    let duration = match scenario.duration {
        Some(d) => d,
        None if traj.is_static() => return Err(TrajectoryError::StaticNeedsDuration.into()),
        None => traj.travel_time,
    };
    if !duration.is_finite() || duration <= 0.0 {
        return Err(SimError::BadDuration(duration));
    }

    let g = Vector3::from(GRAVITY);
    let mount = Rotation3::new(Vector3::from(scenario.imu.mount_rotvec));
    let bias0 = Vector3::from(scenario.imu.bias_constant);
    let bias1 = Vector3::from(scenario.imu.bias_ramp);

    let mut log = MeasurementLog::default();

    // ground truth at 2x the ranging rate
    let truth_rate = 2.0 * scenario.uwb_rate;
    let n_truth = (duration * truth_rate).floor() as usize;
    for k in 0..=n_truth {
        let t = k as f64 / truth_rate;
        let p = traj.position(t);
        if !inside(&scenario.bounds, &p) {
            return Err(SimError::OutOfBounds {
                t,
                position: [p.x, p.y, p.z],
            });
        }
        log.truth.push(PosSample {
            t,
            position: [p.x, p.y, p.z],
        });
    }

    // reference fixes
    {
        let mut rng = crate::sub_rng(scenario.seed, "sim/ref");
        let noise = Normal::new(0.0, scenario.ref_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let n_ref = (duration * scenario.ref_rate).floor() as usize;
        for k in 0..=n_ref {
            let t = k as f64 / scenario.ref_rate;
            let p = traj.position(t);
            let jitter = if scenario.ref_sigma > 0.0 {
                Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                // keep the draw count stable whether or not noise is enabled
                let _ = (
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                );
                Vector3::zeros()
            };
            let p = p + jitter;
            log.reference.push(PosSample {
                t,
                position: [p.x, p.y, p.z],
            });
        }
    }

    // inertial stream
    {
        let mut rng = crate::sub_rng(scenario.seed, "sim/imu");
        let accel_noise = Normal::new(0.0, scenario.imu.accel_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let gyro_noise = Normal::new(0.0, scenario.imu.gyro_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let n_imu = (duration * scenario.imu_rate).floor() as usize;
        let world_to_body = mount.inverse();
        for k in 0..=n_imu {
            let t = k as f64 / scenario.imu_rate;
            let a_true = traj.acceleration(t);
            let clean = world_to_body * (a_true + g);
            let bias = bias0 + bias1 * t;
            let an = Vector3::new(
                accel_noise.sample(&mut rng),
                accel_noise.sample(&mut rng),
                accel_noise.sample(&mut rng),
            );
            let gn = Vector3::new(
                gyro_noise.sample(&mut rng),
                gyro_noise.sample(&mut rng),
                gyro_noise.sample(&mut rng),
            );
            let accel = if scenario.imu.accel_sigma > 0.0 {
                clean + bias + an
            } else {
                clean + bias
            };
            let gyro = if scenario.imu.gyro_sigma > 0.0 { gn } else { Vector3::zeros() };
            log.imu.push(ImuSample {
                t,
                accel: [accel.x, accel.y, accel.z],
                gyro: [gyro.x, gyro.y, gyro.z],
            });
        }
    }

    // ranging stream: per-anchor independent substreams; draws happen on
    // every slot so schedules only gate visibility, never the noise stream
    {
        let n_slots = (duration * scenario.uwb_rate).floor() as usize;
        let quantum_m = scenario
            .channel
            .timestamp_quantum
            .map(|q| q * crate::ranging::SPEED_OF_LIGHT);
        for (anchor_id, anchor) in scenario.anchors.iter().enumerate() {
            let a = Vector3::from(*anchor);
            let mut rng = crate::sub_rng(scenario.seed, &format!("sim/uwb/{anchor_id}"));
            let los = Normal::new(0.0, scenario.channel.los_sigma.max(f64::MIN_POSITIVE)).unwrap();
            let bias_dist = Normal::new(
                scenario.channel.nlos_bias_mean,
                scenario.channel.nlos_bias_sigma.max(f64::MIN_POSITIVE),
            )
            .unwrap();
            let prob = scenario
                .channel
                .nlos_prob
                .get(anchor_id)
                .cloned()
                .unwrap_or_default();
            let outages = scenario
                .channel
                .outages
                .get(anchor_id)
                .cloned()
                .unwrap_or_default();

            let mut in_nlos = false;
            let mut nlos_bias = 0.0;
            for k in 0..=n_slots {
                let t = k as f64 / scenario.uwb_rate;
                let u: f64 = rng.gen();
                let noise = if scenario.channel.los_sigma > 0.0 {
                    los.sample(&mut rng)
                } else {
                    let _ = los.sample(&mut rng);
                    0.0
                };
                let nlos_now = u < prob.value(t);
                if nlos_now && !in_nlos {
                    // one bias per contiguous NLOS burst
                    nlos_bias = bias_dist.sample(&mut rng).max(0.0);
                }
                in_nlos = nlos_now;

                let valid = !interval_contains(&outages, t);
                let range = if valid {
                    let d = (traj.position(t) - a).norm();
                    let mut r = d + noise + if in_nlos { nlos_bias } else { 0.0 };
                    if let Some(qm) = quantum_m {
                        r = (r / qm).round() * qm;
                    }
                    r.max(0.0)
                } else {
                    0.0
                };
                log.uwb.push(UwbRecord {
                    t,
                    anchor_id,
                    range,
                    valid,
                });
            }
        }
        // interleave anchors by slot time
        log.uwb
            .sort_by(|a, b| a.t.total_cmp(&b.t).then(a.anchor_id.cmp(&b.anchor_id)));
    }

    Ok(log)
}

fn inside(bounds: &([f64; 3], [f64; 3]), p: &Vec3) -> bool {
    (0..3).all(|i| p[i] >= bounds.0[i] && p[i] <= bounds.1[i])
}

/// Number of distinct anchors with at least one valid ranging record per
/// time bin of width `dt`, from t = 0 to the last ranging record.
pub fn visibility_series(log: &MeasurementLog, dt: f64) -> Vec<(f64, usize)> {
    assert!(dt > 0.0, "bin width must be positive");
    let Some(t_max) = log.uwb.iter().map(|r| r.t).fold(None, |m: Option<f64>, t| {
        Some(m.map_or(t, |m| m.max(t)))
    }) else {
        return Vec::new();
    };
    let n_bins = (t_max / dt).floor() as usize + 1;
    let mut seen: Vec<u32> = vec![0; n_bins];
    for r in &log.uwb {
        if !r.valid {
            continue;
        }
        let bin = ((r.t / dt).floor() as usize).min(n_bins - 1);
        seen[bin] |= 1u32 << (r.anchor_id % 32);
    }
    seen.iter()
        .enumerate()
        .map(|(i, mask)| (i as f64 * dt, mask.count_ones() as usize))
        .collect()
}
