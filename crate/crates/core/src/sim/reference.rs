//! The built-in benchmark scenario: a descending outdoor-scale run past a
//! sparse chain of anchors.
//!
//! The node covers roughly 710 m of displacement while descending ~340 m,
//! at walking-to-jogging speed. Six anchors line the route, each visible
//! only while the node passes its stretch, so at most four are usable at
//! once and long stretches offer just one or two. Short dropouts, two full
//! outages and scheduled NLOS bursts make the ranging stream realistically
//! hostile. The schedule constants below are the source of truth; the
//! shipped JSON config is generated from them.

use super::{ChannelModel, ImuModel, Scenario, Schedule, SpeedProfile, TrajectorySpec};

pub const REFERENCE_ANCHOR_COUNT: usize = 6;

/// Builds the benchmark scenario for a given seed. Everything except the
/// seed is fixed.
pub fn reference_scenario(seed: u64) -> Scenario {
    let anchors = vec![
        [20.0, 60.0, 330.0],
        [150.0, -50.0, 255.0],
        [290.0, 70.0, 185.0],
        [430.0, -60.0, 100.0],
        [560.0, 60.0, 30.0],
        [630.0, -30.0, 5.0],
    ];

    let trajectory = TrajectorySpec {
        waypoints: vec![
            [0.0, 0.0, 343.0],
            [140.0, 45.0, 262.0],
            [300.0, -35.0, 180.0],
            [455.0, 40.0, 92.0],
            [620.0, 0.0, 0.0],
        ],
        speed: SpeedProfile::Trapezoid {
            v_max: 6.8,
            accel: 0.35,
        },
    };

    // Per-anchor visibility: outside its window an anchor never answers.
    // Short dropouts sit inside the windows; [66, 69) and [117, 119) are
    // full outages where no anchor is visible at all.
    const END: f64 = 1e9;
    let outages = vec![
        vec![(12.0, 13.5), (36.0, END)],
        vec![(0.0, 4.0), (15.0, 17.0), (40.0, 42.0), (58.0, END)],
        vec![(0.0, 24.0), (45.0, 47.0), (66.0, 69.0), (80.0, 82.0), (104.0, END)],
        vec![(0.0, 30.0), (55.0, 56.5), (66.0, 69.0), (95.0, 97.0), (108.0, END)],
        vec![(0.0, 78.0), (90.0, 92.0), (112.0, 114.0), (117.0, 119.0)],
        vec![(0.0, 84.0), (108.0, 109.0), (117.0, 119.0), (122.0, 123.5)],
    ];

    // Each anchor suffers one heavy NLOS burst while it is in view, on top
    // of a light background probability.
    let nlos_prob = vec![
        Schedule(vec![(0.0, 0.05), (20.0, 0.85), (30.0, 0.05)]),
        Schedule(vec![(0.0, 0.05), (30.0, 0.85), (40.0, 0.05)]),
        Schedule(vec![(0.0, 0.05), (60.0, 0.85), (75.0, 0.05)]),
        Schedule(vec![(0.0, 0.05), (75.0, 0.85), (90.0, 0.05)]),
        Schedule(vec![(0.0, 0.05), (95.0, 0.85), (110.0, 0.05)]),
        Schedule(vec![(0.0, 0.05), (110.0, 0.85), (122.0, 0.05)]),
    ];

    Scenario {
        anchors,
        trajectory,
        imu_rate: 400.0,
        uwb_rate: 20.0,
        ref_rate: 10.0,
        duration: None,
        seed,
        channel: ChannelModel {
            los_sigma: 0.10,
            nlos_bias_mean: 0.5,
            nlos_bias_sigma: 0.3,
            nlos_prob,
            outages,
            timestamp_quantum: Some(15e-12),
        },
        imu: ImuModel {
            accel_sigma: 0.12,
            gyro_sigma: 0.002,
            bias_constant: [0.08, -0.05, 0.06],
            bias_ramp: [8e-4, -5e-4, 4e-4],
            mount_rotvec: [0.010, -0.008, 0.012],
        },
        ref_sigma: 0.02,
        bounds: ([-50.0, -120.0, -20.0], [700.0, 120.0, 400.0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, visibility_series, Trajectory};

    #[test]
    fn covers_the_advertised_displacement() {
        let scenario = reference_scenario(1);
        let traj = Trajectory::build(&scenario.trajectory).unwrap();
        let start = traj.position(0.0);
        let end = traj.position(traj.travel_time);
        let displacement = (end - start).norm();
        assert!(
            (700.0..=720.0).contains(&displacement),
            "displacement {displacement} m"
        );
        assert!(
            (100.0..=160.0).contains(&traj.travel_time),
            "travel time {} s",
            traj.travel_time
        );
    }

    #[test]
    fn at_most_four_anchors_are_visible_at_once() {
        let log = generate(&reference_scenario(1)).unwrap();
        let series = visibility_series(&log, 1.0);
        let max = series.iter().map(|&(_, n)| n).max().unwrap();
        assert_eq!(max, 4, "peak simultaneous visibility");
        // sparse stretches with one or two anchors exist as well
        assert!(series.iter().any(|&(_, n)| n == 1));
        assert!(series.iter().any(|&(_, n)| n == 2));
    }

    #[test]
    fn full_outages_are_present() {
        let log = generate(&reference_scenario(1)).unwrap();
        let series = visibility_series(&log, 0.5);
        let zero_spans: Vec<f64> = series
            .iter()
            .filter(|&&(_, n)| n == 0)
            .map(|&(t, _)| t)
            .collect();
        assert!(
            zero_spans.iter().any(|&t| (66.0..69.0).contains(&t)),
            "missing early full outage: {zero_spans:?}"
        );
        assert!(
            zero_spans.iter().any(|&t| (117.0..119.0).contains(&t)),
            "missing late full outage: {zero_spans:?}"
        );
    }

    #[test]
    fn every_anchor_contributes_valid_ranges() {
        let log = generate(&reference_scenario(1)).unwrap();
        for id in 0..REFERENCE_ANCHOR_COUNT {
            let n = log
                .uwb
                .iter()
                .filter(|r| r.anchor_id == id && r.valid)
                .count();
            assert!(n > 50, "anchor {id} has only {n} valid ranges");
        }
    }
}
