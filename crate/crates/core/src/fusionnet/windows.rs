//! Window construction: slicing a measurement log into fixed-length,
//! time-aligned training units on the ranging-rate grid.
//!
//! Each window covers `T` consecutive ranging slots. IMU samples are
//! mean-pooled within each slot, ranges and masks come straight from the
//! per-slot ranging records, and ground truth is taken at the slot
//! boundaries (T+1 rows). The slot grid times are `k / rate`, computed by
//! division exactly as the simulator computes its timestamps, so the
//! alignment check below compares floats bitwise rather than with a
//! tolerance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::percentile;
use crate::sim::MeasurementLog;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("log has no ground-truth samples")]
    NoTruth,
    #[error("log provides {steps} full slots, window needs {window}")]
    TooShort { steps: usize, window: usize },
    #[error("anchor id {id} outside the configured set of {n_anchors}")]
    AnchorOutOfRange { id: usize, n_anchors: usize },
    #[error("stream does not align with the {rate} Hz slot grid: {detail}")]
    RateMismatch { rate: f64, detail: String },
    #[error("{0} split is empty; need more windows")]
    EmptySplit(&'static str),
}

/// One training/inference unit: `T` slots of fused sensor data plus the
/// `T+1` boundary truth positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWindow {
    /// Time of the first slot boundary.
    pub t0: f64,
    /// Slot length in seconds (1 / ranging rate).
    pub dt: f64,
    /// Slot-mean world-frame acceleration, `T x 3`.
    pub imu: Vec<[f64; 3]>,
    /// Measured range per slot and anchor, `T x N_A`; zero where invalid.
    pub ranges: Vec<Vec<f64>>,
    /// Validity mask, `T x N_A`, entries 0 or 1.
    pub mask: Vec<Vec<f64>>,
    /// Ground-truth positions at slot boundaries, `(T+1) x 3`.
    pub truth: Vec<[f64; 3]>,
}

impl FusionWindow {
    pub fn steps(&self) -> usize {
        self.imu.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    /// Truth displacement across each slot, `T x 3`.
    pub fn truth_deltas(&self) -> Vec<[f64; 3]> {
        self.truth
            .windows(2)
            .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]])
            .collect()
    }

    /// Fraction of visible anchors per slot.
    pub fn visible_fraction(&self) -> Vec<f64> {
        self.mask
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// Number of visible anchors per slot.
    pub fn visible_counts(&self) -> Vec<usize> {
        self.mask
            .iter()
            .map(|row| row.iter().filter(|&&m| m == 1.0).count())
            .collect()
    }
}

/// Cuts the log into as many non-overlapping `window`-slot windows as it
/// can cover. `accel` must be the bias-corrected world-frame acceleration
/// series (IMU rate); `rate` is the ranging rate the log was produced at.
pub fn build_windows(
    log: &MeasurementLog,
    accel: &[(f64, Vec3)],
    rate: f64,
    window: usize,
    n_anchors: usize,
) -> Result<Vec<FusionWindow>, WindowError> {
    assert!(rate > 0.0 && window > 0, "rate and window must be positive");
    if log.truth.is_empty() {
        return Err(WindowError::NoTruth);
    }
    // slot s spans [s/rate, (s+1)/rate); boundary s needs truth sample 2s
    let max_boundary = (log.truth.len() - 1) / 2;
    let n_windows = max_boundary / window;
    if n_windows == 0 {
        return Err(WindowError::TooShort {
            steps: max_boundary,
            window,
        });
    }
    let steps = n_windows * window;
    for s in 0..=steps {
        let expected = s as f64 / rate;
        let got = log.truth[2 * s].t;
        if got.to_bits() != expected.to_bits() {
            return Err(WindowError::RateMismatch {
                rate,
                detail: format!("truth sample {} at t={got}, slot boundary is {expected}", 2 * s),
            });
        }
    }

    // slot-mean IMU; slots are contiguous so one forward walk suffices
    let mut imu_slots = vec![[0.0; 3]; steps];
    let mut idx = 0;
    let mut previous = [0.0; 3];
    for (s, slot) in imu_slots.iter_mut().enumerate() {
        let end = (s + 1) as f64 / rate;
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        while idx < accel.len() && accel[idx].0 < end {
            let start = s as f64 / rate;
            if accel[idx].0 >= start {
                sum += accel[idx].1;
                n += 1;
            }
            idx += 1;
        }
        if n > 0 {
            let mean = sum / n as f64;
            *slot = [mean.x, mean.y, mean.z];
        } else {
            // slot without IMU data inherits its predecessor; only possible
            // when the IMU rate drops below the ranging rate
            *slot = previous;
        }
        previous = *slot;
    }

    let mut ranges = vec![vec![0.0; n_anchors]; steps];
    let mut masks = vec![vec![0.0; n_anchors]; steps];
    for rec in &log.uwb {
        let slot_f = rec.t * rate;
        let slot = slot_f.round();
        if (slot_f - slot).abs() > 1e-6 {
            return Err(WindowError::RateMismatch {
                rate,
                detail: format!("ranging record at t={} is off-grid", rec.t),
            });
        }
        let slot = slot as usize;
        if slot >= steps {
            continue;
        }
        if rec.anchor_id >= n_anchors {
            return Err(WindowError::AnchorOutOfRange {
                id: rec.anchor_id,
                n_anchors,
            });
        }
        if rec.valid {
            masks[slot][rec.anchor_id] = 1.0;
            ranges[slot][rec.anchor_id] = rec.range;
        }
    }

    let dt = 1.0 / rate;
    let mut out = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let s0 = w * window;
        let truth: Vec<[f64; 3]> = (s0..=s0 + window)
            .map(|s| log.truth[2 * s].position)
            .collect();
        out.push(FusionWindow {
            t0: log.truth[2 * s0].t,
            dt,
            imu: imu_slots[s0..s0 + window].to_vec(),
            ranges: ranges[s0..s0 + window].to_vec(),
            mask: masks[s0..s0 + window].to_vec(),
            truth,
        });
    }
    Ok(out)
}

/// Age of information in slots: zero at the window start by definition,
/// zero whenever a measurement arrives, otherwise counting up from the
/// previous step.
pub fn compute_aoi(mask: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = mask.first() else {
        return Vec::new();
    };
    let n_anchors = first.len();
    let mut tau = vec![vec![0.0; n_anchors]; mask.len()];
    for t in 1..mask.len() {
        for a in 0..n_anchors {
            tau[t][a] = if mask[t][a] == 1.0 {
                0.0
            } else {
                tau[t - 1][a] + 1.0
            };
        }
    }
    tau
}

/// Propagates the most recent valid range forward in time; slots before
/// an anchor's first valid measurement fall back to that anchor's
/// training mean. Never looks ahead.
pub fn causal_fill(ranges: &[Vec<f64>], mask: &[Vec<f64>], fallback: &[f64]) -> Vec<Vec<f64>> {
    let Some(first) = ranges.first() else {
        return Vec::new();
    };
    let n_anchors = first.len();
    assert_eq!(fallback.len(), n_anchors, "one fallback per anchor");
    let mut last: Vec<Option<f64>> = vec![None; n_anchors];
    let mut out = vec![vec![0.0; n_anchors]; ranges.len()];
    for t in 0..ranges.len() {
        for a in 0..n_anchors {
            if mask[t][a] == 1.0 {
                last[a] = Some(ranges[t][a]);
            }
            out[t][a] = last[a].unwrap_or(fallback[a]);
        }
    }
    out
}

/// Normalisation statistics and output scaling, frozen from the training
/// split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Per-anchor mean of valid ranges; doubles as the causal-fill
    /// fallback.
    pub range_mu: Vec<f64>,
    /// Per-anchor standard deviation of valid ranges.
    pub range_sigma: Vec<f64>,
    /// Mean mask value over the training split.
    pub q_prior: f64,
    /// Per-axis 99th percentile of |truth displacement per slot|,
    /// floored at 1 mm.
    pub step_scale: [f64; 3],
}

impl NormStats {
    pub fn compute(train: &[FusionWindow], n_anchors: usize) -> Self {
        let mut per_anchor: Vec<Vec<f64>> = vec![Vec::new(); n_anchors];
        let mut mask_sum = 0.0;
        let mut mask_n = 0usize;
        let mut deltas: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for w in train {
            for t in 0..w.steps() {
                for (a, pool) in per_anchor.iter_mut().enumerate() {
                    mask_sum += w.mask[t][a];
                    mask_n += 1;
                    if w.mask[t][a] == 1.0 {
                        pool.push(w.ranges[t][a]);
                    }
                }
            }
            for d in w.truth_deltas() {
                for i in 0..3 {
                    deltas[i].push(d[i].abs());
                }
            }
        }

        let stats = |vals: &[f64]| -> Option<(f64, f64)> {
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            Some((mu, var.sqrt()))
        };
        let all: Vec<f64> = per_anchor.iter().flatten().copied().collect();
        let global = stats(&all).unwrap_or((0.0, 1.0));
        let mut range_mu = Vec::with_capacity(n_anchors);
        let mut range_sigma = Vec::with_capacity(n_anchors);
        for vals in &per_anchor {
            let (mu, sigma) = stats(vals).unwrap_or(global);
            range_mu.push(mu);
            range_sigma.push(sigma);
        }

        let mut step_scale = [1e-3; 3];
        for i in 0..3 {
            if !deltas[i].is_empty() {
                deltas[i].sort_by(f64::total_cmp);
                step_scale[i] = percentile(&deltas[i], 99.0).max(1e-3);
            }
        }

        NormStats {
            range_mu,
            range_sigma,
            q_prior: if mask_n > 0 { mask_sum / mask_n as f64 } else { 0.0 },
            step_scale,
        }
    }
}

/// Contiguous 70/15/15 split boundaries at window granularity. The
/// windows are time-ordered, so the splits are disjoint time segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

pub fn split_windows(n: usize) -> Result<Split, WindowError> {
    let a = (0.7 * n as f64).floor() as usize;
    let b = (0.85 * n as f64).floor() as usize;
    if a == 0 {
        return Err(WindowError::EmptySplit("train"));
    }
    if b == a {
        return Err(WindowError::EmptySplit("validation"));
    }
    Ok(Split {
        train: 0..a,
        val: a..b,
        test: b..n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, ChannelModel, Scenario};
    use crate::sim::{SpeedProfile, TrajectorySpec};
    use approx::assert_relative_eq;

    fn rowy(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn aoi_follows_the_counting_recursion() {
        // single anchor column [1,0,0,1,0]
        let mask = rowy(&[&[1.0], &[0.0], &[0.0], &[1.0], &[0.0]]);
        let tau: Vec<f64> = compute_aoi(&mask).iter().map(|r| r[0]).collect();
        assert_eq!(tau, vec![0.0, 1.0, 2.0, 0.0, 1.0]);

        let all_on = rowy(&[&[1.0], &[1.0], &[1.0]]);
        assert!(compute_aoi(&all_on).iter().all(|r| r[0] == 0.0));

        let all_off = rowy(&[&[0.0], &[0.0], &[0.0], &[0.0]]);
        let tau: Vec<f64> = compute_aoi(&all_off).iter().map(|r| r[0]).collect();
        assert_eq!(tau, vec![0.0, 1.0, 2.0, 3.0]);

        // the window start is fresh by definition even without a measurement
        let gap_start = rowy(&[&[0.0], &[0.0], &[1.0]]);
        let tau: Vec<f64> = compute_aoi(&gap_start).iter().map(|r| r[0]).collect();
        assert_eq!(tau, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn causal_fill_carries_the_last_valid_value() {
        let ranges = rowy(&[&[5.0], &[0.0], &[0.0], &[8.0]]);
        let mask = rowy(&[&[1.0], &[0.0], &[0.0], &[1.0]]);
        let filled: Vec<f64> = causal_fill(&ranges, &mask, &[99.0])
            .iter()
            .map(|r| r[0])
            .collect();
        assert_eq!(filled, vec![5.0, 5.0, 5.0, 8.0]);

        let never = causal_fill(&ranges, &rowy(&[&[0.0], &[0.0], &[0.0], &[0.0]]), &[42.0]);
        assert!(never.iter().all(|r| r[0] == 42.0));
    }

    #[test]
    fn causal_fill_ignores_the_future() {
        let base_r = rowy(&[&[1.0, 9.0], &[2.0, 0.0], &[0.0, 0.0], &[3.0, 7.0]]);
        let base_m = rowy(&[&[1.0, 1.0], &[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let filled = causal_fill(&base_r, &base_m, &[0.0, 0.0]);

        let mut pert_r = base_r.clone();
        let mut pert_m = base_m.clone();
        pert_r[3] = vec![111.0, 222.0];
        pert_m[3] = vec![0.0, 0.0];
        let pert = causal_fill(&pert_r, &pert_m, &[0.0, 0.0]);
        assert_eq!(filled[..3], pert[..3], "history must not change");
    }

    fn tiny_scenario() -> Scenario {
        let channel = ChannelModel {
            los_sigma: 0.0,
            nlos_prob: vec![crate::sim::Schedule::constant(0.0); 2],
            outages: vec![vec![], vec![(0.4, 1.2)]],
            ..ChannelModel::default()
        };
        Scenario {
            anchors: vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]],
            trajectory: TrajectorySpec {
                waypoints: vec![[2.0, 1.0, 0.0], [6.0, 1.0, 0.0]],
                speed: SpeedProfile::Constant { speed: 0.5 },
            },
            imu_rate: 50.0,
            uwb_rate: 5.0,
            ref_rate: 1.0,
            duration: None,
            seed: 9,
            channel,
            imu: Default::default(),
            ref_sigma: 0.0,
            bounds: crate::sim::default_bounds(),
        }
    }

    #[test]
    fn windows_align_with_the_slot_grid() {
        let scenario = tiny_scenario();
        let log = generate(&scenario).unwrap();
        let accel: Vec<(f64, crate::Vec3)> = log
            .imu
            .iter()
            .map(|s| (s.t, s.accel_vec()))
            .collect();
        // 8 s at 5 Hz = 40 slots, window 8 -> 5 windows
        let ws = build_windows(&log, &accel, 5.0, 8, 2).unwrap();
        assert_eq!(ws.len(), 5);
        for (w, window) in ws.iter().enumerate() {
            assert_eq!(window.steps(), 8);
            assert_eq!(window.truth.len(), 9);
            assert_eq!(window.t0.to_bits(), ((w * 8) as f64 / 5.0).to_bits());
            // truth rows are the actual boundary samples
            for s in 0..=8 {
                let global = w * 8 + s;
                assert_eq!(window.truth[s], log.truth[2 * global].position);
            }
        }

        // outage [0.4, 1.2) hides anchor 1 for slots 2..=5
        for slot in 0..8 {
            let expected = if (2..6).contains(&slot) { 0.0 } else { 1.0 };
            assert_eq!(ws[0].mask[slot][1], expected, "slot {slot}");
            assert_eq!(ws[0].mask[slot][0], 1.0);
            if expected == 0.0 {
                assert_eq!(ws[0].ranges[slot][1], 0.0);
            } else {
                assert!(ws[0].ranges[slot][1] > 0.0);
            }
        }
    }

    #[test]
    fn imu_slots_hold_the_sample_mean() {
        let scenario = tiny_scenario();
        let log = generate(&scenario).unwrap();
        // synthetic series: accel x = t makes slot means easy to predict
        let accel: Vec<(f64, crate::Vec3)> = log
            .imu
            .iter()
            .map(|s| (s.t, crate::Vec3::new(s.t, 0.0, 0.0)))
            .collect();
        let ws = build_windows(&log, &accel, 5.0, 8, 2).unwrap();
        // slot 3 of window 0 spans [0.6, 0.8): samples 30..39 at 50 Hz
        let expected: f64 = (30..40).map(|k| k as f64 / 50.0).sum::<f64>() / 10.0;
        assert_relative_eq!(ws[0].imu[3][0], expected, max_relative = 1e-12);
        assert_eq!(ws[0].imu[3][1], 0.0);
    }

    #[test]
    fn short_logs_and_bad_anchors_are_rejected() {
        let scenario = tiny_scenario();
        let log = generate(&scenario).unwrap();
        let accel: Vec<(f64, crate::Vec3)> =
            log.imu.iter().map(|s| (s.t, s.accel_vec())).collect();
        assert!(matches!(
            build_windows(&log, &accel, 5.0, 4000, 2),
            Err(WindowError::TooShort { .. })
        ));
        assert!(matches!(
            build_windows(&log, &accel, 5.0, 8, 1),
            Err(WindowError::AnchorOutOfRange { id: 1, .. })
        ));
        assert!(matches!(
            build_windows(&log, &accel, 7.0, 8, 2),
            Err(WindowError::RateMismatch { .. })
        ));
    }

    #[test]
    fn norm_stats_use_only_valid_ranges() {
        let w = FusionWindow {
            t0: 0.0,
            dt: 0.2,
            imu: vec![[0.0; 3]; 4],
            ranges: rowy(&[&[10.0, 500.0], &[12.0, 500.0], &[14.0, 500.0], &[0.0, 500.0]]),
            mask: rowy(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]]),
            truth: vec![[0.0; 3]; 5],
        };
        let stats = NormStats::compute(std::slice::from_ref(&w), 2);
        assert_relative_eq!(stats.range_mu[0], 12.0, max_relative = 1e-12);
        // anchor 1 never valid: falls back to global stats over anchor 0
        assert_relative_eq!(stats.range_mu[1], 12.0, max_relative = 1e-12);
        assert_relative_eq!(stats.q_prior, 3.0 / 8.0, max_relative = 1e-12);
        // static truth: step scale hits the floor
        assert_eq!(stats.step_scale, [1e-3; 3]);
    }

    #[test]
    fn step_scale_tracks_the_large_axis() {
        let mut truth = vec![[0.0; 3]; 21];
        for (s, row) in truth.iter_mut().enumerate() {
            row[0] = 0.5 * s as f64; // constant 0.5 m steps on x
        }
        let w = FusionWindow {
            t0: 0.0,
            dt: 0.05,
            imu: vec![[0.0; 3]; 20],
            ranges: vec![vec![0.0]; 20],
            mask: vec![vec![0.0]; 20],
            truth,
        };
        let stats = NormStats::compute(std::slice::from_ref(&w), 1);
        assert_relative_eq!(stats.step_scale[0], 0.5, max_relative = 1e-9);
        assert_eq!(stats.step_scale[1], 1e-3);
    }

    #[test]
    fn split_is_contiguous_70_15_15() {
        let s = split_windows(40).unwrap();
        assert_eq!(s.train, 0..28);
        assert_eq!(s.val, 28..34);
        assert_eq!(s.test, 34..40);
        assert!(split_windows(1).is_err());
        assert!(split_windows(2).is_err(), "two windows leave no validation slice");
    }
}
